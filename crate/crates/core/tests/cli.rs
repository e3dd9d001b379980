use std::path::Path;
use std::process::{Command, Output};

fn disco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disco"))
        .args(args)
        .env_remove("DISCO_SCHEDULER")
        .output()
        .expect("run disco")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn verify_default_grid_passes() {
    let o = disco(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("overall: PASS"));
}

#[test]
fn verify_mutation_fails_with_check_exit_code() {
    let o = disco(&["verify", "--mutate-inter-rank", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL gradient"));
    let o = disco(&["verify", "--mutate-inter-rank", "--world-size", "1"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn layout_error_exit_code_differs_from_check_failure() {
    let o = disco(&["verify", "--world-size", "3", "--batch-size", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not divisible"));
    assert_eq!(
        disco(&["train", "--world-size", "3", "--batch-size", "8"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        disco(&["model", "--world-size", "3", "--batch-size", "8"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        disco(&["bench", "--precision", "f16"]).status.code(),
        Some(2)
    );
    assert_eq!(disco(&["nonsense"]).status.code(), Some(2));
}

#[test]
fn bench_refuses_oversized_batches() {
    let o = disco(&["bench", "--batch-size", "65536", "--world-size", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceeds"));
}

#[test]
fn bench_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        let o = disco(&[
            "bench",
            "--batch-size",
            "256",
            "--world-size",
            "4",
            "--format",
            "csv",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(read(&a), read(&b));
    let text = String::from_utf8(read(&a)).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("method,B,N,L,D,backbone_elements,loss_elements,total_elements,loss_flops,bytes")
    );
    assert!(lines
        .next()
        .unwrap()
        .starts_with("CLIP,256,4,0,16,0,65536,"));
    assert!(lines
        .next()
        .unwrap()
        .starts_with("DisCo,256,4,0,16,0,32768,"));
}

#[test]
fn bench_two_ranks_has_equal_peaks() {
    let o = disco(&[
        "bench",
        "--batch-size",
        "128",
        "--world-size",
        "2",
        "--format",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows[0]["loss_elements"], rows[1]["loss_elements"]);
}

#[test]
fn train_both_modes_is_deterministic_and_equivalent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        let o = disco(&["train", "--mode", "both", "--out", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        let summary = String::from_utf8_lossy(&o.stderr).into_owned();
        let max_diff: f64 = summary
            .lines()
            .find_map(|l| l.strip_prefix("max |loss_naive - loss_disco|: "))
            .expect("summary line")
            .parse()
            .unwrap();
        assert!(max_diff <= 1e-10);
    }
    assert_eq!(read(&a), read(&b));
    let text = String::from_utf8(read(&a)).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(text.starts_with("step,loss_naive,loss_disco,abs_diff\n0,"));
}

#[test]
fn train_zero_steps_succeeds_with_empty_trajectory() {
    let o = disco(&["train", "--steps", "0", "--mode", "disco"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "step,loss\n");
}

#[test]
fn train_divergence_exits_nonzero_with_step() {
    let o = disco(&["train", "--learning-rate", "1e308", "--mode", "naive"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged at step"));
}

#[test]
fn concurrent_scheduler_from_environment() {
    let lockstep = disco(&["train", "--steps", "5", "--mode", "disco"]);
    let concurrent = Command::new(env!("CARGO_BIN_EXE_disco"))
        .args(["train", "--steps", "5", "--mode", "disco"])
        .env("DISCO_SCHEDULER", "concurrent")
        .output()
        .unwrap();
    assert_eq!(concurrent.status.code(), Some(0));
    assert_eq!(lockstep.stdout, concurrent.stdout);
    let bad = Command::new(env!("CARGO_BIN_EXE_disco"))
        .args(["model"])
        .env("DISCO_SCHEDULER", "ring")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn model_prints_savings_and_sixteen_gib() {
    let o = disco(&["model", "--world-size", "16"]);
    let text = stdout(&o);
    assert!(text.contains("CLIP loss bytes: 17179869184 (16.00 GiB, f32)"));
    assert!(text.contains("savings_fraction(N=16): 7/8"));
    for method in ["CLIP ", "BASIC ", "DisCo ", "DisCo* "] {
        assert!(
            text.lines().any(|l| l.starts_with(method)),
            "{method} missing"
        );
    }
}
