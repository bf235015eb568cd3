use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maxmatch_core::model::{Architecture, Network, ParamSnapshot};
use serde_json::{json, Value};
use tempfile::TempDir;

fn maxmatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maxmatch"))
        .args(args)
        .env("MAXMATCH_OUT_ROOT", dir.join("runs"))
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn small_job() -> Value {
    json!({
        "dataset": {
            "source": { "kind": "two-moons", "n": 200, "noise": 0.1, "seed": 1 },
            "labels-per-class": 4
        },
        "train": { "steps": 60, "log-every": 20, "batch-unlabeled": 16, "k": 2 }
    })
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn train_small(tmp: &Path, name: &str) -> PathBuf {
    let cfg = write_json(&tmp.join(format!("{name}.json")), &small_job());
    let out = tmp.join(name);
    let o = maxmatch(
        tmp,
        &[
            "-q",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let tmp = TempDir::new().unwrap();
    let o = maxmatch(tmp.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "train",
        "eval",
        "bound",
        "converge",
        "augment-preview",
        "selfcheck",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = maxmatch(tmp.path(), &["train", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn config_errors_exit_2_and_missing_files_exit_4() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ \"train\": { \"steps\": ").unwrap();
    let o = maxmatch(tmp.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let unknown = write_json(
        &tmp.path().join("unknown.json"),
        &json!({ "train": { "stepz": 3 } }),
    );
    assert_eq!(
        code(&maxmatch(
            tmp.path(),
            &["train", "--config", unknown.to_str().unwrap()]
        )),
        2
    );

    let invalid = write_json(
        &tmp.path().join("invalid.json"),
        &json!({ "train": { "k": 0 } }),
    );
    assert_eq!(
        code(&maxmatch(
            tmp.path(),
            &["train", "--config", invalid.to_str().unwrap()]
        )),
        2
    );

    let o = maxmatch(tmp.path(), &["train", "--config", "does-not-exist.json"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does-not-exist.json"));
}

#[test]
fn manifest_records_the_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let run = train_small(tmp.path(), "a");
    let m = manifest(&run);
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["config"]["train"]["steps"], 60);
    assert_eq!(m["config"]["train"]["k"], 2);
    assert_eq!(m["config"]["dataset"]["source"]["n"], 200);
    // defaults are filled in
    assert!(m["config"]["train"]["lr"].is_number());
    assert!(m["finished-at"].as_u64().unwrap() >= m["started-at"].as_u64().unwrap());
    for key in ["metrics", "model", "ema"] {
        assert!(Path::new(m["outputs"][key].as_str().unwrap()).exists());
    }

    // feeding the recorded config back yields the same config
    let again = write_json(&tmp.path().join("again.json"), &m["config"]);
    let out = tmp.path().join("b");
    let o = maxmatch(
        tmp.path(),
        &[
            "-q",
            "train",
            "--config",
            again.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(manifest(&out)["config"], m["config"]);
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let run = train_small(tmp.path(), "first");
    let second = tmp.path().join("second");
    let o = maxmatch(
        tmp.path(),
        &[
            "-q",
            "train",
            "--manifest",
            run.join("manifest.json").to_str().unwrap(),
            "--out",
            second.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for file in ["metrics.csv", "model.snap", "ema.snap"] {
        assert_eq!(
            fs::read(run.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(&tmp.path().join("job.json"), &small_job());
    let out = tmp.path().join("s7");
    let o = maxmatch(
        tmp.path(),
        &[
            "-q",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0);
    let m = manifest(&out);
    assert_eq!(m["seeds"], json!({ "model": 7, "data": 7, "augment": 7 }));
    let base = train_small(tmp.path(), "s0");
    assert_ne!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(base.join("metrics.csv")).unwrap()
    );
}

#[test]
fn default_output_goes_under_the_out_root() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(&tmp.path().join("job.json"), &small_job());
    let o = maxmatch(
        tmp.path(),
        &["-q", "train", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0);
    let dirs: Vec<_> = fs::read_dir(tmp.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0]
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .starts_with("train-"));
    assert!(dirs[0].join("metrics.csv").exists());
}

fn last_row(csv_path: &Path) -> Vec<(String, f64)> {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let last = r.records().last().unwrap().unwrap();
    header
        .into_iter()
        .zip(last.iter().map(|v| v.parse().unwrap()))
        .collect()
}

#[test]
fn folds_summary_matches_fold_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(&tmp.path().join("job.json"), &small_job());
    let out = tmp.path().join("folds");
    let o = maxmatch(
        tmp.path(),
        &[
            "-q",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--folds",
            "3",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    let summary = stdout_json(&o);
    assert_eq!(summary["folds"], 3);
    assert_eq!(manifest(&out)["folds"], 3);

    let finals: Vec<f64> = (0..3)
        .map(|f| {
            let row = last_row(&out.join(format!("fold-{f}/metrics.csv")));
            row.iter().find(|c| c.0 == "test_err").unwrap().1
        })
        .collect();
    let mean = finals.iter().sum::<f64>() / 3.0;
    let std = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((summary["test-err"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((summary["test-err"]["std"].as_f64().unwrap() - std).abs() < 1e-12);
    let on_disk: Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk, summary);
    // folds use different seeds
    assert_ne!(
        fs::read(out.join("fold-0/model.snap")).unwrap(),
        fs::read(out.join("fold-1/model.snap")).unwrap()
    );
}

#[test]
fn plot_flag_writes_svg() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(&tmp.path().join("job.json"), &small_job());
    let out = tmp.path().join("p");
    let o = maxmatch(
        tmp.path(),
        &[
            "-q",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--plot",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(out.join("metrics.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn eval_of_constant_classifier() {
    let tmp = TempDir::new().unwrap();
    let mut snap = Network::init(&Architecture::mlp(2, &[], 2), 0)
        .unwrap()
        .snapshot();
    snap.layers[0].weight.data_mut().fill(0.0);
    snap.layers[0].bias.data_mut().copy_from_slice(&[1.0, 0.0]);
    let path = tmp.path().join("const.snap");
    snap.save(&path).unwrap();
    let report = stdout_json(&maxmatch(tmp.path(), &["eval", path.to_str().unwrap()]));
    assert_eq!(report["samples"], 2000);
    assert_eq!(report["raw"]["error-rate"], 0.5);
    assert_eq!(report["raw"]["per-class-errors"], json!([0, 1000]));
    assert_eq!(report["raw"]["per-class-counts"], json!([1000, 1000]));
    assert!(report["ema"].is_null());
}

#[test]
fn eval_of_run_directory_uses_its_dataset() {
    let tmp = TempDir::new().unwrap();
    let run = train_small(tmp.path(), "r");
    let out = tmp.path().join("ev");
    let report = stdout_json(&maxmatch(
        tmp.path(),
        &[
            "eval",
            run.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    let row = last_row(&run.join("metrics.csv"));
    let get = |k: &str| row.iter().find(|c| c.0 == k).unwrap().1;
    assert_eq!(
        report["raw"]["error-rate"].as_f64().unwrap(),
        get("test_err")
    );
    assert_eq!(
        report["ema"]["error-rate"].as_f64().unwrap(),
        get("ema_test_err")
    );
    assert!(out.join("eval.json").exists());

    let labeled = stdout_json(&maxmatch(
        tmp.path(),
        &["eval", run.to_str().unwrap(), "--split", "labeled"],
    ));
    assert_eq!(labeled["samples"], 8);
}

#[test]
fn eval_rejects_wrong_architecture() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("wide.snap");
    Network::init(&Architecture::mlp(3, &[4], 2), 0)
        .unwrap()
        .snapshot()
        .save(&path)
        .unwrap();
    let o = maxmatch(tmp.path(), &["eval", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("3 inputs"));
}

#[test]
fn truncated_snapshot_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let run = train_small(tmp.path(), "t");
    let bytes = fs::read(run.join("model.snap")).unwrap();
    let cut = tmp.path().join("cut.snap");
    fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(ParamSnapshot::load(&cut).is_err());
    assert_eq!(
        code(&maxmatch(tmp.path(), &["eval", cut.to_str().unwrap()])),
        4
    );
}

#[test]
fn diverging_training_exits_3_and_keeps_snapshot() {
    let tmp = TempDir::new().unwrap();
    let mut job = small_job();
    job["train"]["lr"] = json!(1e12);
    let cfg = write_json(&tmp.path().join("job.json"), &job);
    let out = tmp.path().join("nan");
    let o = maxmatch(
        tmp.path(),
        &[
            "-q",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("nan-snapshot.snap").exists());
}

#[test]
fn converge_writes_trace_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(
        &tmp.path().join("c.json"),
        &json!({ "steps": 400, "stride": 50, "dim": 3, "n-centers": 3 }),
    );
    let out = tmp.path().join("cv");
    let summary = stdout_json(&maxmatch(
        tmp.path(),
        &[
            "-q",
            "converge",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--plot",
        ],
    ));
    assert_eq!(summary["steps"], 400);
    assert_eq!(summary["bound-holds"], true);
    let mut r = csv::Reader::from_path(out.join("trace.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["step", "envelope-grad-norm", "running-avg-sq", "rhs-bound"]
    );
    assert!(r.records().count() >= 8);
    assert!(out.join("trace.svg").exists());
    assert_eq!(manifest(&out)["subcommand"], "converge");

    // same seed, same summary
    let again = stdout_json(&maxmatch(
        tmp.path(),
        &[
            "-q",
            "converge",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().join("cv2").to_str().unwrap(),
        ],
    ));
    assert_eq!(again, summary);
}

#[test]
fn converge_sweep_fits_a_negative_slope() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sw");
    let summary = stdout_json(&maxmatch(
        tmp.path(),
        &[
            "-q",
            "converge",
            "--sweep",
            "100,400,1600",
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    assert!(summary["slope"].as_f64().unwrap() < 0.0);
    assert_eq!(
        csv::Reader::from_path(out.join("sweep.csv"))
            .unwrap()
            .records()
            .count(),
        3
    );
}

#[test]
fn converge_divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(
        &tmp.path().join("c.json"),
        &json!({ "steps": 200, "step-policy": { "type": "constant", "eta": 3.0 }, "noise": 0.0 }),
    );
    let o = maxmatch(
        tmp.path(),
        &["-q", "converge", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bound_json_and_risk_flags() {
    let tmp = TempDir::new().unwrap();
    let base = stdout_json(&maxmatch(tmp.path(), &["-q", "bound"]));
    let with_risk = stdout_json(&maxmatch(
        tmp.path(),
        &[
            "-q",
            "bound",
            "--risk-labeled",
            "0.1",
            "--risk-unlabeled",
            "0.2",
        ],
    ));
    let r0 = &base["report"];
    let r1 = &with_risk["report"];
    assert_eq!(r1["risk-labeled"], 0.1);
    assert_eq!(r1["risk-unlabeled"], 0.2);
    assert!(r1["total"].as_f64().unwrap() > r0["total"].as_f64().unwrap());
    assert_eq!(r0["term-labeled-complexity"], r1["term-labeled-complexity"]);
    assert!(base["measured"].is_null());
}

#[test]
fn bound_sweep_emits_csv() {
    let tmp = TempDir::new().unwrap();
    let o = maxmatch(tmp.path(), &["-q", "bound", "--sweep", "k=1:4:4"]);
    assert_eq!(code(&o), 0);
    let mut r = csv::Reader::from_reader(o.stdout.as_slice());
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[0], "k");
    assert_eq!(header.last().unwrap(), "total");
    let rows: Vec<Vec<f64>> = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(
        rows.iter().map(|row| row[0]).collect::<Vec<_>>(),
        [1.0, 2.0, 3.0, 4.0]
    );
    let k_col = header.iter().position(|h| h == "k-summand").unwrap();
    // the K summand is linear in K
    assert!((rows[1][k_col] / rows[0][k_col] - 2.0).abs() < 1e-9);
    assert!((rows[3][k_col] / rows[0][k_col] - 4.0).abs() < 1e-9);

    assert_eq!(
        code(&maxmatch(tmp.path(), &["bound", "--sweep", "k=1:4"])),
        2
    );
    assert_eq!(
        code(&maxmatch(
            tmp.path(),
            &["bound", "--sweep", "nonsense=1:4:3"]
        )),
        2
    );
}

#[test]
fn bound_measured_from_run() {
    let tmp = TempDir::new().unwrap();
    let run = train_small(tmp.path(), "b");
    let out = tmp.path().join("bo");
    let o = stdout_json(&maxmatch(
        tmp.path(),
        &[
            "-q",
            "bound",
            "--run",
            run.to_str().unwrap(),
            "--max-unlabeled",
            "50",
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    assert_eq!(o["config"]["n-labeled"], 8.0);
    assert_eq!(o["config"]["n-classes"], 2.0);
    assert!(o["measured"]["chi"].as_f64().unwrap() > 0.0);
    let rl = o["report"]["risk-labeled"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rl));
    assert!(out.join("bound.json").exists());
}

#[test]
fn preview_of_vectors_is_a_scatter() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("pv");
    let o = stdout_json(&maxmatch(
        tmp.path(),
        &[
            "augment-preview",
            "--count",
            "5",
            "--k",
            "4",
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    assert_eq!(o["kind"], "scatter");
    let svg = fs::read_to_string(out.join("preview.svg")).unwrap();
    assert_eq!(svg.matches("<line").count(), 20);
    let samples: Value =
        serde_json::from_str(&fs::read_to_string(out.join("samples.json")).unwrap()).unwrap();
    assert_eq!(samples.as_array().unwrap().len(), 5);
    assert_eq!(samples[0]["variants"].as_array().unwrap().len(), 4);
}

fn write_idx(dir: &Path, n: usize, side: usize) -> (PathBuf, PathBuf) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n, side, side] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 3;
        labels.push(class as u8);
        for p in 0..side * side {
            images.push(((p * 17 + i * 31 + class * 60) % 256) as u8);
        }
    }
    let (ip, lp) = (dir.join("img.idx"), dir.join("lbl.idx"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

#[test]
fn preview_of_images_writes_pgm_grid() {
    let tmp = TempDir::new().unwrap();
    let (ip, lp) = write_idx(tmp.path(), 12, 6);
    let data = write_json(
        &tmp.path().join("data.json"),
        &json!({ "source": {
            "kind": "idx",
            "train-images": ip, "train-labels": lp,
            "test-images": ip, "test-labels": lp
        } }),
    );
    let out = tmp.path().join("img");
    let o = stdout_json(&maxmatch(
        tmp.path(),
        &[
            "augment-preview",
            "--data",
            data.to_str().unwrap(),
            "--count",
            "3",
            "--k",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    assert_eq!(o["kind"], "image");
    let pgm = fs::read_to_string(out.join("preview.pgm")).unwrap();
    let mut lines = pgm.lines();
    assert_eq!(lines.next(), Some("P2"));
    // 4 tiles of 6 px with 2 px gaps, 3 rows
    assert_eq!(lines.next(), Some("30 22"));
    assert_eq!(lines.next(), Some("255"));
    assert_eq!(lines.count(), 22);
    assert!(out.join("preview.svg").exists());
}

#[test]
fn selfcheck_passes() {
    let tmp = TempDir::new().unwrap();
    let o = maxmatch(tmp.path(), &["-q", "selfcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 8);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}
