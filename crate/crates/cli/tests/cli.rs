use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use stdenoise::scan_io::{read_labels, read_scan};
use stdenoise::snowsim::{Manifest, Split};

const SMALL: &[&str] = &[
    "--set",
    "sensor.height=16",
    "--set",
    "sensor.width=64",
    "--set",
    "toy.frames_per_sequence=3",
    "--set",
    "network.base_width=8",
    "--set",
    "network.encoder_width=8",
    "--set",
    "network.middle_width=16",
    "--set",
    "network.decoder_width=8",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=2",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stdenoise"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn run_small(args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend_from_slice(SMALL);
    run(&all)
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulated small dataset and a one-epoch checkpoint, shared by the tests.
struct Fixture {
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&root);
        let (data, run) = (root.join("data"), root.join("run"));
        ok(run_small(&["simulate", "--out", s(&data), "--sequences", "4", "--seed", "3"]));
        ok(run_small(&[
            "train",
            "--manifest",
            s(&data.join("manifest.txt")),
            "--out",
            s(&run),
        ]));
        Fixture { data, run }
    })
}

#[test]
fn dry_run_reports_parameter_counts() {
    let count = |ablate: &str| -> u64 {
        let text = ok(run(&["train", "--dry-run", "--ablate", ablate]));
        text.trim().strip_prefix("parameters: ").unwrap().parse().unwrap()
    };
    let full = count("full");
    assert!((400_000..=700_000).contains(&full), "{full}");
    assert!(full > count("no-temporal"));
    assert!(count("conv2d-front") > count("conv2d-no-temporal"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train", "--dry-run", "--set", "network.no_such_key=1"])), 2);
    assert_eq!(code(&run(&["train", "--dry-run", "--set", "network.base_width=2"])), 2);
    assert_eq!(code(&run(&["train", "--dry-run", "--ablate", "sideways"])), 2);
    assert_eq!(code(&run(&["train", "--manifest", "m.txt"])), 2);
}

#[test]
fn missing_inputs_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--manifest", s(&dir.path().join("none.txt")), "--out", s(dir.path())]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.txt"));
    let out = run(&["render", "--scan", s(&dir.path().join("none.bin")), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn simulate_writes_manifest_and_config_snapshot() {
    let f = fixture();
    let m = Manifest::read(f.data.join("manifest.txt")).unwrap();
    assert_eq!(m.entries.len(), 12);
    assert!(!m.split(Split::Test).is_empty());
    let snapshot = f.data.join("config.toml");
    let text = fs::read_to_string(&snapshot).unwrap();
    assert!(text.contains("height = 16"));
    // the snapshot is a loadable config on its own
    let text = ok(run(&["train", "--dry-run", "--config", s(&snapshot)]));
    assert!(text.starts_with("parameters: "));
}

#[test]
fn training_writes_metrics_checkpoint_and_snapshot() {
    let f = fixture();
    let csv = fs::read_to_string(f.run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,val_loss,val_iou");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,0.01000000,"));
    assert!(f.run.join("best.ckpt").is_file());
    assert!(f.run.join("config.toml").is_file());
}

#[test]
fn denoise_partitions_the_scan() {
    let f = fixture();
    let m = Manifest::read(f.data.join("manifest.txt")).unwrap();
    let e = m.split(Split::Test)[1];
    let prev = m.previous(e);
    let ckpt = f.run.join("best.ckpt");
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for (i, precision) in ["f32", "f32", "f64"].iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        ok(run_small(&[
            "denoise",
            "--checkpoint",
            s(&ckpt),
            "--scan",
            s(&m.scan_path(e)),
            "--prev",
            s(&m.scan_path(prev)),
            "--out",
            s(&out),
            "--precision",
            precision,
        ]));
        outs.push(out);
    }
    let scan = read_scan(m.scan_path(e)).unwrap();
    let clean = read_scan(outs[0].join("clean.bin")).unwrap();
    let removed = read_scan(outs[0].join("removed.bin")).unwrap();
    let pred = read_labels(outs[0].join("pred.label")).unwrap();
    assert_eq!(pred.len(), scan.len());
    assert_eq!(clean.len() + removed.len(), scan.len());
    assert_eq!(removed.len(), pred.noise_count());
    for name in ["clean.bin", "removed.bin", "pred.label"] {
        assert_eq!(fs::read(outs[0].join(name)).unwrap(), fs::read(outs[1].join(name)).unwrap());
    }
}

#[test]
fn checkpoint_for_another_sensor_is_rejected() {
    let f = fixture();
    let m = Manifest::read(f.data.join("manifest.txt")).unwrap();
    let e = &m.entries[0];
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "denoise",
        "--checkpoint",
        s(&f.run.join("best.ckpt")),
        "--scan",
        s(&m.scan_path(e)),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
}

fn report_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn eval_reports_frames_and_aggregates() {
    let f = fixture();
    let manifest = f.data.join("manifest.txt");
    let text = ok(run_small(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&f.run.join("best.ckpt")),
    ]));
    let rows = report_rows(&text);
    assert_eq!(rows[0].join(","), "sequence,frame,condition,iou,precision,recall");
    let m = Manifest::read(&manifest).unwrap();
    let frames = m.split(Split::Test).len();
    assert_eq!(rows.iter().filter(|r| r[0] != "aggregate").count() - 1, frames);
    assert_eq!(rows.last().unwrap()[..3], ["aggregate", "", "all"]);
    for r in &rows[1..] {
        for v in &r[3..] {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }
}

#[test]
fn baseline_labels_round_trip_through_eval() {
    let f = fixture();
    let manifest = f.data.join("manifest.txt");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dror");
    let text = ok(run_small(&["baseline", "--manifest", s(&manifest), "--filter", "dror", "--out", s(&out)]));
    assert!(text.starts_with("dror aggregate,,all,"));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let via_pred = ok(run_small(&["eval", "--manifest", s(&manifest), "--pred", s(&out)]));
    let via_filter = ok(run_small(&["eval", "--manifest", s(&manifest), "--filter", "dror"]));
    assert_eq!(report, via_pred);
    assert_eq!(report, via_filter);
    assert_eq!(code(&run_small(&["baseline", "--manifest", s(&manifest), "--filter", "median", "--out", s(&out)])), 2);
}

#[test]
fn eval_without_predictions_is_a_data_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(&[
        "eval",
        "--manifest",
        s(&f.data.join("manifest.txt")),
        "--pred",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn render_writes_images_of_sensor_size() {
    let f = fixture();
    let m = Manifest::read(f.data.join("manifest.txt")).unwrap();
    let e = &m.entries[4];
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("img/frame");
    let text = ok(run_small(&[
        "render",
        "--scan",
        s(&m.scan_path(e)),
        "--labels",
        s(&m.label_path(e)),
        "--out",
        s(&base),
    ]));
    assert_eq!(text.lines().count(), 2);
    let pgm = fs::read(base.with_extension("pgm")).unwrap();
    let ppm = fs::read(base.with_extension("ppm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n64 16\n255\n".len() + 64 * 16);
    assert!(ppm.starts_with(b"P6\n64 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n64 16\n255\n".len() + 3 * 64 * 16);
    assert_eq!(code(&run_small(&["render", "--scan", s(&m.scan_path(e)), "--out", s(&base), "--max-range", "0"])), 2);
}

#[test]
fn bench_prints_a_timing_table() {
    let text = ok(run_small(&["bench", "--frames", "2"]));
    assert!(text.starts_with("sensor 16x64"));
    assert!(text.contains("forward f32"));
}
