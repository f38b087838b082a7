//! Runs the `scanreg` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn scanreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scanreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

/// One zero-motion pair, trained until identical clouds come back as the
/// identity.
const IDENTITY_RUN: &str = r#"
precision = "f32"
[overfit]
pairs = 1
max_rot_deg = 0.0
max_trans_m = 0.0
steps = 600
target_rre_deg = 0.5
target_rte_m = 0.05
"#;

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(scanreg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        scanreg(&["overfit", "--precision", "f16"]).status.code(),
        Some(1)
    );
    assert_eq!(
        scanreg(&["ablate", "--variants", "full,bogus"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(scanreg(&["--help"]).status.code(), Some(0));
}

#[test]
fn init_config_writes_a_loadable_template() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    ok(scanreg(&["init-config", "--out", p(&cfg)]));
    assert_eq!(
        scanreg(&["init-config", "--out", p(&cfg)]).status.code(),
        Some(1)
    );
    let run = dir.path().join("run");
    let out = ok(scanreg(&[
        "overfit",
        "--config",
        p(&cfg),
        "--steps",
        "0",
        "--precision",
        "f32",
        "--out",
        p(&run),
    ]));
    assert!(out.contains("steps 0"));
}

#[test]
fn bad_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nuse_masks = false\n");
    let o = scanreg(&["overfit", "--config", &cfg, "--steps", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("use_masks"));
}

#[test]
fn zero_steps_report_holds_only_the_initial_loss() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(scanreg(&[
        "overfit",
        "--steps",
        "0",
        "--precision",
        "f32",
        "--out",
        p(&run),
    ]));
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    let data: Vec<&str> = report.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 1);
    assert!(data[0].starts_with("0 "));
    assert!(run.join("model.ckpt").is_file() && run.join("config.toml").is_file());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(scanreg(&[
            "overfit",
            "--steps",
            "2",
            "--precision",
            "f32",
            "--seed",
            seed,
            "--out",
            p(&out),
        ]));
        (
            std::fs::read(out.join("model.ckpt")).unwrap(),
            std::fs::read_to_string(out.join("report.txt")).unwrap(),
        )
    };
    let a = run("a", "3");
    let b = run("b", "3");
    let c = run("c", "4");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn divergent_training_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "precision = \"f32\"\n[optim]\nlr = 1e30\nlr_min = 1e30\n",
    );
    let o = scanreg(&[
        "overfit",
        "--config",
        &cfg,
        "--steps",
        "5",
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn parse_pose(out: &str) -> ([f64; 4], [f64; 3]) {
    let nums = |prefix: &str| -> Vec<f64> {
        out.lines()
            .find(|l| l.starts_with(prefix))
            .unwrap()
            .split_whitespace()
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect()
    };
    let q = nums("quaternion ");
    let t = nums("translation ");
    assert_eq!(
        out.lines()
            .find(|l| l.starts_with("kitti "))
            .unwrap()
            .split_whitespace()
            .count(),
        13
    );
    ([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]])
}

#[test]
fn identity_overfit_registers_and_evaluates_self_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), IDENTITY_RUN);
    let run = dir.path().join("run");
    let data = dir.path().join("data");
    ok(scanreg(&["overfit", "--config", &cfg, "--out", p(&run)]));
    ok(scanreg(&[
        "synth",
        "--config",
        &cfg,
        "--identical",
        "--count",
        "3",
        "--seed",
        "40",
        "--out",
        p(&data),
    ]));

    let src = data.join("synth-40_src.bin");
    let out = ok(scanreg(&[
        "register",
        "--checkpoint",
        p(&run),
        p(&src),
        p(&src),
    ]));
    let (q, t) = parse_pose(&out);
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    let angle = 2.0 * q[0].abs().min(1.0).acos().to_degrees();
    assert!(angle < 0.5, "RRE {angle}");
    assert!(t.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.05, "{t:?}");

    let eval_dir = dir.path().join("eval");
    let out = ok(scanreg(&[
        "eval",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--pairs",
        p(&data.join("pairs.txt")),
        "--out",
        p(&eval_dir),
    ]));
    assert!(out.starts_with("# thresholds RRE_deg 5 RTE_m 2"));
    assert!(out.contains("# recall 1.000000 (3/3)"), "{out}");
    let curve = std::fs::read_to_string(eval_dir.join("recall_curve.txt")).unwrap();
    assert!(curve.starts_with("# thresholds RRE_deg 5 RTE_m 2"));
}

#[test]
fn register_and_eval_reject_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none");
    assert_eq!(
        scanreg(&["register", "--checkpoint", p(&missing), "a.bin", "b.bin"])
            .status
            .code(),
        Some(2)
    );

    let run = dir.path().join("run");
    ok(scanreg(&[
        "overfit",
        "--steps",
        "0",
        "--precision",
        "f32",
        "--out",
        p(&run),
    ]));
    let empty = dir.path().join("pairs.txt");
    std::fs::write(&empty, "# nothing here\n").unwrap();
    let o = scanreg(&["eval", "--checkpoint", p(&run), "--pairs", p(&empty)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
    assert_eq!(
        scanreg(&["eval", "--checkpoint", p(&run)]).status.code(),
        Some(1)
    );
}

#[test]
fn eval_echoes_custom_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let data = dir.path().join("data");
    ok(scanreg(&[
        "overfit",
        "--steps",
        "0",
        "--precision",
        "f32",
        "--out",
        p(&run),
    ]));
    ok(scanreg(&["synth", "--count", "2", "--out", p(&data)]));
    let out = ok(scanreg(&[
        "eval",
        "--checkpoint",
        p(&run),
        "--pairs",
        p(&data.join("pairs.txt")),
        "--rre-thresh",
        "1.5",
        "--rte-thresh",
        "0.25",
        "--out",
        p(&dir.path().join("e")),
    ]));
    assert!(
        out.starts_with("# thresholds RRE_deg 1.5 RTE_m 0.25"),
        "{out}"
    );
    assert_eq!(out.lines().filter(|l| l.starts_with("synth-")).count(), 2);
}

#[test]
fn ablation_table_has_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(scanreg(&[
        "ablate",
        "--steps",
        "1",
        "--precision",
        "f32",
        "--variants",
        "full,no-mask,no-all-to-all",
        "--out",
        p(dir.path()),
    ]));
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    for (row, name) in rows.iter().zip(["full", "no-mask", "no-all-to-all"]) {
        assert!(row.starts_with(name));
    }
    // Synthetic scans always leave pixels empty, so dropping the mask must
    // change the prediction.
    let change: f64 = rows[1].split_whitespace().last().unwrap().parse().unwrap();
    assert!(change > 0.0);
    let full: f64 = rows[0].split_whitespace().last().unwrap().parse().unwrap();
    assert_eq!(full, 0.0);
}

#[test]
fn bench_reports_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(scanreg(&[
        "bench",
        "--sizes",
        "256,512",
        "--reps",
        "5",
        "--check",
        "--precision",
        "f32",
        "--out",
        p(dir.path()),
    ]));
    let rows: Vec<Vec<&str>> = out
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][6], "-");
    let ratio: f64 = rows[1][6].parse().unwrap();
    assert!(ratio <= 2.5, "{ratio}");
    let single = ok(scanreg(&[
        "bench",
        "--sizes",
        "128",
        "--reps",
        "1",
        "--out",
        p(dir.path()),
    ]));
    assert_eq!(single.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn project_writes_dump_and_round_trip_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(scanreg(&["synth", "--count", "1", "--out", p(&data)]));
    let out = ok(scanreg(&[
        "project",
        p(&data.join("synth-7_src.bin")),
        "--out",
        p(&dir.path().join("proj")),
    ]));
    assert!(out.contains("round-trip 100.00%"), "{out}");
    assert!(dir.path().join("proj/projection.dump").is_file());

    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, b"").unwrap();
    let o = scanreg(&["project", p(&empty), "--out", p(&dir.path().join("e"))]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no points"));
    assert!(stdout(&o).contains("valid pixels 0 of 1024"));

    let o = scanreg(&[
        "project",
        p(&dir.path().join("missing.bin")),
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
