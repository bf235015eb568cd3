use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use maxmatch_core::augment::{
    build_uncertainty_set, strong_ops, weak_augment, AugmentConfig, TransformOp,
};
use maxmatch_core::data::{DatasetSpec, SampleShape};
use maxmatch_core::rng::{derive, stream};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{
    emit_json, now_ms, output_dir, read_json_or_default, write_json, write_text, RunManifest,
    SeedTriple,
};
use crate::Global;

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Dataset spec as JSON.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Augmentation settings as JSON.
    #[arg(long)]
    pub augment: Option<PathBuf>,
    /// Number of training samples to show.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Strong views per sample.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct PreviewSample {
    index: usize,
    label: usize,
    original: Vec<f64>,
    weak: Vec<f64>,
    variants: Vec<Vec<f64>>,
    ops: Vec<Vec<TransformOp>>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
enum Rendered {
    Image { pgm: PathBuf, svg: PathBuf },
    Scatter { svg: PathBuf },
}

pub fn run(args: &PreviewArgs, g: &Global) -> CliResult<()> {
    if args.count == 0 || args.k == 0 {
        return Err(CliError::Config("--count and --k must be positive".into()));
    }
    let spec: DatasetSpec = read_json_or_default(args.data.as_deref())?;
    let aug: AugmentConfig = read_json_or_default(args.augment.as_deref())?;
    aug.validate()?;
    let (train, _) = spec.load()?;
    let shape = train.sample_shape;
    let dir = output_dir(args.out.as_deref(), &g.out_root, "augment-preview")?;

    let mut samples = Vec::new();
    for (pos, i) in (0..train.len().min(args.count)).enumerate() {
        let x = train.sample(i);
        let weak_seed = derive(
            args.seed,
            &[stream::WEAK_UNLABELED, i as u64, 0, pos as u64],
        );
        let weak = weak_augment(x, shape, weak_seed, &aug);
        let set = build_uncertainty_set(&weak, shape, args.k, args.seed, i as u64, 0, &aug)?;
        let ops = set
            .seeds
            .iter()
            .map(|&s| strong_ops(shape, s, &aug))
            .collect::<maxmatch_core::Result<Vec<_>>>()?;
        samples.push(PreviewSample {
            index: i,
            label: train.labels[i],
            original: x.to_vec(),
            weak,
            variants: set.variants,
            ops,
        });
    }

    let rendered = match shape {
        SampleShape::Image {
            channels,
            height,
            width,
        } => {
            let tiles: Vec<Vec<Vec<f64>>> = samples
                .iter()
                .map(|s| {
                    std::iter::once(&s.original)
                        .chain(std::iter::once(&s.weak))
                        .chain(&s.variants)
                        .map(|v| grayscale(v, channels, height * width))
                        .collect()
                })
                .collect();
            let (pgm, svg) = (dir.join("preview.pgm"), dir.join("preview.svg"));
            write_text(&pgm, &image_grid_pgm(&tiles, height, width))?;
            write_text(&svg, &image_grid_svg(&tiles, height, width))?;
            Rendered::Image { pgm, svg }
        }
        SampleShape::Vector { .. } => {
            let svg = dir.join("preview.svg");
            write_text(&svg, &scatter_svg(&samples))?;
            Rendered::Scatter { svg }
        }
    };

    let mut manifest = RunManifest::new(
        "augment-preview",
        &serde_json::json!({ "dataset": spec, "augment": aug, "count": args.count, "k": args.k }),
        SeedTriple {
            model: 0,
            data: 0,
            augment: args.seed,
        },
    )?;
    match &rendered {
        Rendered::Image { pgm, svg } => {
            manifest.outputs.insert("pgm".into(), pgm.clone());
            manifest.outputs.insert("svg".into(), svg.clone());
        }
        Rendered::Scatter { svg } => {
            manifest.outputs.insert("svg".into(), svg.clone());
        }
    }
    manifest
        .outputs
        .insert("samples".into(), dir.join("samples.json"));
    write_json(&dir.join("samples.json"), &samples)?;
    manifest.finished_at = Some(now_ms());
    manifest.write(&dir)?;
    emit_json(&rendered)?;
    Ok(())
}

/// Channel mean of a channel-major image.
fn grayscale(x: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|p| (0..channels).map(|c| x[c * plane + p]).sum::<f64>() / channels as f64)
        .collect()
}

/// Maps each row of tiles to 0..=255 using the range of its first tile.
fn quantize(row: &[Vec<f64>]) -> Vec<Vec<u8>> {
    let lo = row[0].iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    row.iter()
        .map(|t| {
            t.iter()
                .map(|v| (255.0 * ((v - lo) / span).clamp(0.0, 1.0)).round() as u8)
                .collect()
        })
        .collect()
}

const GAP: usize = 2;

fn image_grid_pgm(tiles: &[Vec<Vec<f64>>], h: usize, w: usize) -> String {
    let cols = tiles[0].len();
    let (gw, gh) = (cols * (w + GAP) - GAP, tiles.len() * (h + GAP) - GAP);
    let mut px = vec![128u8; gw * gh];
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in quantize(row).iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    px[(r * (h + GAP) + y) * gw + c * (w + GAP) + x] = tile[y * w + x];
                }
            }
        }
    }
    let mut out = format!("P2\n{gw} {gh}\n255\n");
    for line in px.chunks(gw) {
        let text: Vec<String> = line.iter().map(u8::to_string).collect();
        out.push_str(&text.join(" "));
        out.push('\n');
    }
    out
}

fn image_grid_svg(tiles: &[Vec<Vec<f64>>], h: usize, w: usize) -> String {
    const CELL: usize = 4;
    let cols = tiles[0].len();
    let width = (cols * (w + GAP) - GAP) * CELL;
    let height = (tiles.len() * (h + GAP) - GAP) * CELL;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" shape-rendering=\"crispEdges\">\n<rect width=\"100%\" height=\"100%\" fill=\"#808080\"/>\n"
    );
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in quantize(row).iter().enumerate() {
            let (ox, oy) = (c * (w + GAP) * CELL, r * (h + GAP) * CELL);
            for y in 0..h {
                for x in 0..w {
                    let v = tile[y * w + x];
                    let _ = writeln!(
                        s,
                        "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({v},{v},{v})\"/>",
                        ox + x * CELL,
                        oy + y * CELL
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Originals in black, weak views in grey, strong views coloured and joined to their weak view.
fn scatter_svg(samples: &[PreviewSample]) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 24.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    ];
    let xy = |v: &[f64]| (v[0], v.get(1).copied().unwrap_or(0.0));
    let all: Vec<(f64, f64)> = samples
        .iter()
        .flat_map(|s| {
            std::iter::once(&s.original)
                .chain(std::iter::once(&s.weak))
                .chain(&s.variants)
        })
        .map(|v| xy(v))
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let map = |(x, y): (f64, f64)| {
        (
            PAD + (x - x0) / span * (SIZE - 2.0 * PAD),
            SIZE - PAD - (y - y0) / span * (SIZE - 2.0 * PAD),
        )
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for smp in samples {
        let (wx, wy) = map(xy(&smp.weak));
        for (j, v) in smp.variants.iter().enumerate() {
            let (vx, vy) = map(xy(v));
            let color = COLORS[j % COLORS.len()];
            let _ = writeln!(
                s,
                "<line x1=\"{wx:.2}\" y1=\"{wy:.2}\" x2=\"{vx:.2}\" y2=\"{vy:.2}\" stroke=\"{color}\" stroke-width=\"0.8\"/>\n<circle cx=\"{vx:.2}\" cy=\"{vy:.2}\" r=\"3\" fill=\"{color}\"/>"
            );
        }
        let (ox, oy) = map(xy(&smp.original));
        let _ = writeln!(
            s,
            "<circle cx=\"{wx:.2}\" cy=\"{wy:.2}\" r=\"3\" fill=\"#999999\"/>\n<circle cx=\"{ox:.2}\" cy=\"{oy:.2}\" r=\"4\" fill=\"black\"/>"
        );
    }
    s.push_str("</svg>\n");
    s
}
