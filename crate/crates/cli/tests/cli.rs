use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wmoe_core::checkpoint::Checkpoint;
use wmoe_core::pgm::{quantize8, read_gray};
use wmoe_core::synth::read_dataset;

const SPEC: &str = r#"{
  "image_size": 16,
  "families": [
    {"name": "A", "texture": {"kind": "grating", "period": 4.0, "angle": 0.6},
     "defects": ["blob", "scratch"], "intensity": [0.3, 0.6], "anomaly_rate": 0.5},
    {"name": "B", "texture": {"kind": "checker", "period": 4.0},
     "defects": ["blob", "patch_swap"], "intensity": [0.3, 0.6], "anomaly_rate": 0.5},
    {"name": "C", "texture": {"kind": "noise", "radius": 1},
     "defects": ["blob", "scratch"], "intensity": [0.3, 0.6], "anomaly_rate": 0.5}
  ]
}"#;

const CONFIG: &str = r#"{
  "seed": 3,
  "encoder": {"dim": 16, "grid": [4, 4], "taps": 2, "image_size": [16, 16]},
  "experts": 4,
  "layers": 2,
  "latent_dim": 4,
  "optim": {"lr": 0.001, "epochs": 2, "batch": 4}
}"#;

fn wmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmoe"))
        .args(args)
        .env("WMOE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.json"), SPEC).unwrap();
        fs::write(dir.path().join("config.json"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, out: &str, n: usize) -> Output {
        wmoe(&[
            "gen-data",
            "--spec",
            s(&self.path("spec.json")),
            "--n",
            &n.to_string(),
            "--seed",
            "5",
            "--out",
            s(&self.path(out)),
        ])
    }

    fn train(&self, data: &str, out: &str) -> Output {
        wmoe(&[
            "train",
            "--config",
            s(&self.path("config.json")),
            "--data",
            s(&self.path(data)),
            "--out",
            s(&self.path(out)),
        ])
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["", "pixels", "masks"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            files.push((
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    files
}

#[test]
fn gen_data_is_reproducible_and_guards_its_output() {
    let f = Fixture::new();
    let out = f.gen("a", 10);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let printed = String::from_utf8_lossy(&out.stdout);
    assert!(
        printed.contains("A label=0: 5") && printed.contains("C label=1: 5"),
        "{printed}"
    );
    assert_eq!(code(&f.gen("b", 10)), 0);
    assert_eq!(tree(&f.path("a")), tree(&f.path("b")));
    assert_eq!(read_dataset(f.path("a")).unwrap().len(), 30);

    let refused = f.gen("a", 4);
    assert_eq!(code(&refused), 2);
    assert!(stderr(&refused).contains("--force"));
    let forced = wmoe(&[
        "gen-data",
        "--spec",
        s(&f.path("spec.json")),
        "--n",
        "4",
        "--out",
        s(&f.path("a")),
        "--force",
    ]);
    assert_eq!(code(&forced), 0);
    assert_eq!(read_dataset(f.path("a")).unwrap().len(), 12);
}

#[test]
fn gen_data_rejects_invalid_specs() {
    let f = Fixture::new();
    fs::write(f.path("spec.json"), SPEC.replacen("\"A\"", "\"a/b\"", 1)).unwrap();
    let out = f.gen("x", 4);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("a/b"));
    fs::write(f.path("spec.json"), SPEC.replacen("\"B\"", "\"A\"", 1)).unwrap();
    assert_eq!(code(&f.gen("y", 4)), 2);
}

#[test]
fn train_is_deterministic_and_logs_every_step() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", 6)), 0);
    for run in ["r1", "r2"] {
        let out = f.train("data", run);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = fs::read(f.path("r1/checkpoint.wmoe")).unwrap();
    assert_eq!(a, fs::read(f.path("r2/checkpoint.wmoe")).unwrap());
    Checkpoint::decode(&a).unwrap().into_model().unwrap();
    // 18 images in batches of 4: 5 steps per epoch, 2 epochs.
    let log = fs::read_to_string(f.path("r1/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 5);
}

#[test]
fn train_reports_config_and_data_errors_with_code_two() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("missing", "r")), 2);
    assert_eq!(code(&f.gen("data", 2)), 0);
    fs::write(f.path("config.json"), r#"{"experts": 4, "top_k": 9}"#).unwrap();
    assert_eq!(code(&f.train("data", "r")), 2);
    fs::write(f.path("config.json"), r#"{"unknown_key": 1}"#).unwrap();
    let out = f.train("data", "r");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown_key"));
}

#[test]
fn divergence_exits_with_code_three() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", 4)), 0);
    fs::write(
        f.path("config.json"),
        CONFIG.replace("\"lr\": 0.001", "\"lr\": 1e300"),
    )
    .unwrap();
    let out = f.train("data", "r");
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn eval_writes_metrics_and_exact_heatmaps() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", 6)), 0);
    assert_eq!(code(&f.train("data", "run")), 0);
    let ckpt = f.path("run/checkpoint.wmoe");
    let out = wmoe(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("ev")),
        "--dump-maps",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let text = fs::read_to_string(f.path("ev/metrics.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(
        header[..8],
        [
            "split",
            "family",
            "image_auroc",
            "image_f1max",
            "image_ap",
            "pixel_auroc",
            "pixel_pro",
            "pixel_ap"
        ]
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let families: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(families, ["A", "B", "C", "all"]);
    for r in &rows {
        for v in &r[2..8] {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&x), "{v}");
        }
    }

    let model = Checkpoint::load(&ckpt).unwrap().into_model().unwrap();
    for sample in read_dataset(f.path("data")).unwrap().iter().take(5) {
        let map = model.score_pixels(&sample.pixels).unwrap().map;
        let heat = read_gray(f.path(&format!("ev/maps/{}.pgm", sample.id))).unwrap();
        for (h, m) in heat.data().iter().zip(map.data()) {
            assert_eq!((h * 65535.0).round() as u32 / 257, u32::from(quantize8(*m)));
        }
        let pair = read_gray(f.path(&format!("ev/maps/{}_pair.pgm", sample.id))).unwrap();
        assert_eq!(pair.shape(), &[16, 32]);
        assert_eq!(pair.data()[16..32], heat.data()[..16]);
    }
}

#[test]
fn eval_rejects_incompatible_data_and_corrupt_checkpoints() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", 4)), 0);
    assert_eq!(code(&f.train("data", "run")), 0);
    fs::write(
        f.path("spec.json"),
        SPEC.replace("\"image_size\": 16", "\"image_size\": 32"),
    )
    .unwrap();
    assert_eq!(code(&f.gen("big", 2)), 0);
    let ckpt = f.path("run/checkpoint.wmoe");
    let out = wmoe(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.path("big")),
        "--out",
        s(&f.path("ev")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("image_size"), "{}", stderr(&out));

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(f.path("bad.wmoe"), bytes).unwrap();
    let out = wmoe(&[
        "eval",
        "--checkpoint",
        s(&f.path("bad.wmoe")),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("ev")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("checksum"));
}

#[test]
fn ablate_writes_five_rows_in_order() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", 6)), 0);
    let out = wmoe(&[
        "ablate",
        "--config",
        s(&f.path("config.json")),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("ab")),
        "--train-families",
        "A,B",
        "--eval-families",
        "C",
        "--seeds",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(f.path("ab/ablation.csv")).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(rows, ["baseline", "+ctds", "+ctds+wcma", "+ctds+samoe", "full"]);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(4) == Some("2")));

    let overlap = wmoe(&[
        "ablate",
        "--config",
        s(&f.path("config.json")),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("ab2")),
        "--train-families",
        "A,C",
        "--eval-families",
        "C",
    ]);
    assert_eq!(code(&overlap), 2);
    assert!(stderr(&overlap).contains("zero-shot"));
}

#[test]
fn bad_thread_cap_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_wmoe"))
        .args(["gen-data", "--spec", "x", "--n", "1", "--out", "y"])
        .env("WMOE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("WMOE_THREADS"));
}
