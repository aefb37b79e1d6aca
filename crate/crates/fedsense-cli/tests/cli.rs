use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedsense"))
}

fn write_cfg(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

const TINY: &str = "\
run.rounds = 3
run.clients = 3
run.batch_size = 8
data.samples_per_client = 8
data.public_samples = 8
data.domains = 4
model.dims = 16,8
csg.bits = 4
server.distill_steps = 1
server.distill_batch = 4
server.uni_pretrain_steps = 5
probe.train_samples = 32
probe.test_samples = 32
probe.steps = 20
";

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_writes_artifacts_and_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let r = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for name in ["metrics.csv", "final.ckpt", "resolved_config.txt"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let metrics = std::fs::read_to_string(out_a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "round,mean_ssl_loss,mean_sst_loss,distill_loss,global_grad_norm_sq,\
         mean_client_drift,uplink_bytes,wall_ms"
    ));
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn set_and_seed_overrides_are_recorded_in_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let r = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--set", "run.rounds=2", "--set", "scg.lambda=0.01", "--seed", "9", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let resolved = std::fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("run.rounds = 2"));
    assert!(resolved.contains("run.seed = 9"));
    assert!(resolved.contains("scg.lambda = 0.01"));
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let r = bin()
        .args(["run", "--set", "bogus.key=1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown config key"));

    let r = bin()
        .args(["run", "--config", "/nonexistent/exp.cfg", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));

    let r = bin()
        .args(["run", "--set", "csg.bits=40", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bits"));
}

#[test]
fn thread_count_env_leaves_outputs_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let mut metrics = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let r = bin()
            .env("FEDSENSE_THREADS", threads)
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        metrics.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1], "thread count changed the results");
}

#[test]
fn codec_bench_lists_every_width() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let r = bin()
        .args(["codec-bench", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("codec_bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bits,bytes,ratio_vs_full,mean_rel_error");
    assert_eq!(lines.len(), 7);
    for (line, bits) in lines[1..].iter().zip([32, 16, 8, 4, 2, 1]) {
        assert!(line.starts_with(&format!("{bits},")), "row order: {line}");
    }
}

#[test]
fn theory_check_reports_pass_lines_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let r = bin()
        .args(["theory-check", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = stdout(&r);
    assert!(text.contains("PASS perturbation-norm "));
    assert!(text.contains("PASS error-bound "));
    assert!(text.contains("PASS horizon-trend "));
    assert!(!text.contains("FAIL"));
    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "rounds,gamma,mean_grad_sq");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn ablate_emits_component_grid_and_width_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let r = bin()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "full",
            "no_scg",
            "no_sst",
            "no_distill",
            "no_scg_sst",
            "no_scg_distill",
            "no_sst_distill",
            "no_scg_sst_distill",
            "bits32",
            "bits8",
            "bits2",
            "bits1",
        ]
    );
}

#[test]
fn probe_scores_a_saved_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let r = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let r = bin()
        .args(["probe", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out.join("final.ckpt"))
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = stdout(&r);
    assert!(text.contains("probe_test_accuracy="));
    assert!(text.contains("classes=4"));

    // A checkpoint whose size disagrees with the configured model is refused.
    let r = bin()
        .args(["probe", "--config"])
        .arg(&cfg)
        .args(["--set", "model.dims=16,4", "--checkpoint"])
        .arg(out.join("final.ckpt"))
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}
