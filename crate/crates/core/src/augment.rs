//! Weak and strong class-invariant transformations.
//!
//! Every function here is pure in its seed: the same input and seed give the
//! same bits regardless of batch composition or thread.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SampleShape;
use crate::rng::{derive, rng_from, stream};
use crate::{Error, Result};

/// Atomic transformations. The first nine act on images, the last three on
/// plain feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    Invert,
    Solarize,
    Brightness,
    Contrast,
    Rotate,
    Translate,
    Shear,
    Posterize,
    Rotate2d,
    Scale,
    Jitter,
}

impl TransformKind {
    pub const IMAGE_POOL: [TransformKind; 9] = [
        TransformKind::Identity,
        TransformKind::Invert,
        TransformKind::Solarize,
        TransformKind::Brightness,
        TransformKind::Contrast,
        TransformKind::Rotate,
        TransformKind::Translate,
        TransformKind::Shear,
        TransformKind::Posterize,
    ];

    pub const VECTOR_POOL: [TransformKind; 3] = [
        TransformKind::Rotate2d,
        TransformKind::Scale,
        TransformKind::Jitter,
    ];

    fn is_vector_op(self) -> bool {
        matches!(
            self,
            TransformKind::Rotate2d | TransformKind::Scale | TransformKind::Jitter
        )
    }
}

/// One transformation with its strength in `[0, 1]` and direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformOp {
    pub kind: TransformKind,
    pub magnitude: f64,
    /// `+1.0` or `−1.0`; ignored by direction-free ops.
    pub sign: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct AugmentConfig {
    /// Strong-augmentation pool; `None` picks the default pool for the sample shape.
    pub pool: Option<Vec<TransformKind>>,
    pub n_ops: usize,
    /// Noise scale of the weak view for vector samples.
    pub weak_noise: f64,
    /// Zero padding used by the weak random crop.
    pub crop_padding: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pool: None,
            n_ops: 2,
            weak_noise: 0.05,
            crop_padding: 4,
        }
    }
}

impl AugmentConfig {
    pub fn pool_for(&self, shape: SampleShape) -> Result<Vec<TransformKind>> {
        let pool = match (&self.pool, shape) {
            (Some(p), _) => p.clone(),
            (None, SampleShape::Image { .. }) => TransformKind::IMAGE_POOL.to_vec(),
            (None, SampleShape::Vector { .. }) => TransformKind::VECTOR_POOL.to_vec(),
        };
        if pool.is_empty() {
            return Err(Error::config("strong augmentation pool is empty"));
        }
        if let SampleShape::Vector { .. } = shape {
            if let Some(k) = pool
                .iter()
                .find(|k| !k.is_vector_op() && **k != TransformKind::Identity)
            {
                return Err(Error::Config(format!("{k:?} needs image samples")));
            }
        }
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise >= 0.0 && self.weak_noise.is_finite()) {
            return Err(Error::config("weak noise must be finite and nonnegative"));
        }
        if matches!(&self.pool, Some(p) if p.is_empty()) {
            return Err(Error::config("strong augmentation pool is empty"));
        }
        Ok(())
    }
}

/// Flip and crop for images, small Gaussian noise for vectors.
pub fn weak_augment(x: &[f64], shape: SampleShape, seed: u64, cfg: &AugmentConfig) -> Vec<f64> {
    let mut rng = rng_from(seed);
    match shape {
        SampleShape::Vector { .. } => {
            if cfg.weak_noise == 0.0 {
                return x.to_vec();
            }
            let normal = Normal::new(0.0, cfg.weak_noise).expect("validated");
            x.iter().map(|v| v + normal.sample(&mut rng)).collect()
        }
        SampleShape::Image {
            channels,
            height,
            width,
        } => {
            let flip = rng.random_bool(0.5);
            let pad = cfg.crop_padding as i64;
            let oy = (rng.random_range(0..=2 * pad) - pad) as isize;
            let ox = (rng.random_range(0..=2 * pad) - pad) as isize;
            let (h, w) = (height as isize, width as isize);
            let mut out = vec![0.0; x.len()];
            for c in 0..channels {
                let plane = c * height * width;
                for y in 0..h {
                    for xx in 0..w {
                        let sy = y + oy;
                        let sx0 = xx + ox;
                        if sy < 0 || sy >= h || sx0 < 0 || sx0 >= w {
                            continue;
                        }
                        let sx = if flip { w - 1 - sx0 } else { sx0 };
                        out[plane + (y * w + xx) as usize] = x[plane + (sy * w + sx) as usize];
                    }
                }
            }
            out
        }
    }
}

/// Draws `n_ops` transformations from the pool and applies them in order.
pub fn strong_augment(
    x: &[f64],
    shape: SampleShape,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<Vec<f64>> {
    let pool = cfg.pool_for(shape)?;
    let mut rng = rng_from(seed);
    let mut out = x.to_vec();
    for _ in 0..cfg.n_ops {
        let op = sample_op(&pool, &mut rng);
        out = apply_op(&out, shape, op, &mut rng);
    }
    Ok(out)
}

/// The transformation sequence `strong_augment` would apply for `seed`.
pub fn strong_ops(shape: SampleShape, seed: u64, cfg: &AugmentConfig) -> Result<Vec<TransformOp>> {
    let pool = cfg.pool_for(shape)?;
    let mut rng = rng_from(seed);
    let mut x = vec![0.0; shape.len()];
    let mut ops = Vec::with_capacity(cfg.n_ops);
    for _ in 0..cfg.n_ops {
        let op = sample_op(&pool, &mut rng);
        // keep the stream aligned with ops that consume extra draws
        x = apply_op(&x, shape, op, &mut rng);
        ops.push(op);
    }
    Ok(ops)
}

fn sample_op(pool: &[TransformKind], rng: &mut ChaCha8Rng) -> TransformOp {
    let kind = pool[rng.random_range(0..pool.len())];
    let magnitude = rng.random::<f64>();
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    TransformOp {
        kind,
        magnitude,
        sign,
    }
}

/// Applies one transformation. `rng` supplies any extra randomness the op
/// needs (jitter noise, the second translation direction).
pub fn apply_op(x: &[f64], shape: SampleShape, op: TransformOp, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = op.magnitude.clamp(0.0, 1.0);
    let s = op.sign;
    let out = match op.kind {
        TransformKind::Identity => x.to_vec(),
        TransformKind::Invert => x.iter().map(|v| (1.0 - m) * v + m * (1.0 - v)).collect(),
        TransformKind::Solarize => {
            let threshold = 1.0 - m;
            x.iter()
                .map(|&v| if v > threshold { 1.0 - v } else { v })
                .collect()
        }
        TransformKind::Brightness => x.iter().map(|v| v * (1.0 + 0.9 * s * m)).collect(),
        TransformKind::Contrast => {
            let factor = 1.0 + 0.9 * s * m;
            let (plane, channels) = planes(shape, x.len());
            let mut out = x.to_vec();
            for c in 0..channels {
                let p = &mut out[c * plane..(c + 1) * plane];
                let mean = p.iter().sum::<f64>() / plane as f64;
                p.iter_mut().for_each(|v| *v = mean + (*v - mean) * factor);
            }
            out
        }
        TransformKind::Posterize => {
            let bits = 8 - (4.0 * m).round() as u32;
            let step = (1u32 << (8 - bits)) as f64;
            x.iter()
                .map(|&v| {
                    let level = (v.clamp(0.0, 1.0) * 255.0).round();
                    (level / step).floor() * step / 255.0
                })
                .collect()
        }
        TransformKind::Rotate => {
            let angle = (30.0 * s * m).to_radians();
            let (sin, cos) = angle.sin_cos();
            warp(x, shape, |dx, dy| {
                (cos * dx + sin * dy, -sin * dx + cos * dy)
            })
        }
        TransformKind::Translate => {
            let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (h, w) = hw(shape);
            let tx = 0.25 * s * m * w as f64;
            let ty = 0.25 * sy * m * h as f64;
            warp(x, shape, |dx, dy| (dx - tx, dy - ty))
        }
        TransformKind::Shear => {
            let k = 0.3 * s * m;
            warp(x, shape, |dx, dy| (dx - k * dy, dy))
        }
        TransformKind::Rotate2d => {
            let angle = (30.0 * s * m).to_radians();
            let (sin, cos) = angle.sin_cos();
            let mut out = x.to_vec();
            if out.len() >= 2 {
                out[0] = cos * x[0] - sin * x[1];
                out[1] = sin * x[0] + cos * x[1];
            }
            out
        }
        TransformKind::Scale => x.iter().map(|v| v * (1.0 + 0.2 * s * m)).collect(),
        TransformKind::Jitter => {
            let sigma = 0.15 * m;
            if sigma == 0.0 {
                x.to_vec()
            } else {
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                x.iter().map(|v| v + normal.sample(rng)).collect()
            }
        }
    };
    match shape {
        SampleShape::Image { .. } => out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        SampleShape::Vector { .. } => out,
    }
}

fn hw(shape: SampleShape) -> (usize, usize) {
    match shape {
        SampleShape::Image { height, width, .. } => (height, width),
        SampleShape::Vector { dim } => (1, dim),
    }
}

fn planes(shape: SampleShape, len: usize) -> (usize, usize) {
    match shape {
        SampleShape::Image {
            channels,
            height,
            width,
        } => (height * width, channels),
        SampleShape::Vector { .. } => (len.max(1), 1),
    }
}

/// Resamples every channel plane with bilinear interpolation. `inverse` maps
/// an output offset from the image centre to the source offset.
fn warp(x: &[f64], shape: SampleShape, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let SampleShape::Image {
        channels,
        height,
        width,
    } = shape
    else {
        return x.to_vec();
    };
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; x.len()];
    for y in 0..height {
        for xx in 0..width {
            let (sx, sy) = inverse(xx as f64 - cx, y as f64 - cy);
            let (sx, sy) = (sx + cx, sy + cy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for c in 0..channels {
                let plane = &x[c * height * width..(c + 1) * height * width];
                let at = |py: f64, px: f64| -> f64 {
                    if py < 0.0 || px < 0.0 || py >= height as f64 || px >= width as f64 {
                        0.0
                    } else {
                        plane[py as usize * width + px as usize]
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
                out[c * height * width + y * width + xx] = v;
            }
        }
    }
    out
}

/// `K` strong views of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintySet {
    pub sample_id: u64,
    pub variants: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
}

impl UncertaintySet {
    pub fn k(&self) -> usize {
        self.variants.len()
    }
}

/// Seed of variant `j`; independent of `K`, so smaller sets are prefixes of
/// larger ones.
pub fn variant_seed(base_seed: u64, sample_id: u64, epoch: u64, j: usize) -> u64 {
    derive(base_seed, &[stream::STRONG, sample_id, epoch, j as u64])
}

pub fn build_uncertainty_set(
    x: &[f64],
    shape: SampleShape,
    k: usize,
    base_seed: u64,
    sample_id: u64,
    epoch: u64,
    cfg: &AugmentConfig,
) -> Result<UncertaintySet> {
    if k == 0 {
        return Err(Error::config("uncertainty set needs at least one variant"));
    }
    let seeds: Vec<u64> = (0..k)
        .map(|j| variant_seed(base_seed, sample_id, epoch, j))
        .collect();
    let variants = seeds
        .iter()
        .map(|&s| strong_augment(x, shape, s, cfg))
        .collect::<Result<_>>()?;
    Ok(UncertaintySet {
        sample_id,
        variants,
        seeds,
    })
}
