use std::path::Path;
use std::process::Command;

fn odeformer(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_odeformer")).args(args).output().unwrap()
}

fn out_dir(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

#[test]
fn order_study_passes_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = odeformer(&["order-study", "--out", out_dir(dir.path())]);
    assert!(run.status.success());
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("order_study PASS")).count(), 6);
    let orders = std::fs::read_to_string(dir.path().join("orders.csv")).unwrap();
    assert!(orders.starts_with("scheme,problem,n_steps,error,estimated_order\n"));
    assert_eq!(orders.lines().count(), 1 + 2 * 3 * 4);
    assert!(dir.path().join("order_study.csv").exists());
    assert!(dir.path().join("order_study.config").exists());
}

#[test]
fn failed_property_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let run = odeformer(&[
        "copy-task",
        "--out",
        out_dir(dir.path()),
        "--seeds",
        "4",
        "--set",
        "variants=Euler",
        "--set",
        "total_steps=20",
        "--set",
        "eval_every=10",
    ]);
    assert_eq!(run.status.code(), Some(1));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("copy_task FAIL Euler reaches 0.99 token accuracy"), "{stdout}");
    let metrics = dir.path().join("metrics/copy_task-Euler-d2-s4.metrics.csv");
    let text = std::fs::read_to_string(metrics).unwrap();
    assert!(text.starts_with("step,lr,loss,grad_norm,block_grad_norms,coeffs,secs\n"));
    // Header, then steps 1, 10 and 20.
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn config_file_and_seed_flag_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.conf");
    std::fs::write(&cfg, "# tiny\nvariants = RK2\ntotal_steps = 10\nmetrics = false\n").unwrap();
    let run =
        odeformer(&["copy-task", "--config", cfg.to_str().unwrap(), "--seeds", "7,8", "--out", out_dir(dir.path())]);
    assert_eq!(run.status.code(), Some(1));
    let csv = std::fs::read_to_string(dir.path().join("copy_task.csv")).unwrap();
    assert!(csv.contains("copy_task,RK2,2,steps_to_target,7,inf\n"));
    assert!(csv.contains("copy_task,RK2,2,steps_to_target,8,inf\n"));
    assert!(csv.contains("copy_task,RK2,2,steps_to_target,median,inf\n"));
    assert!(!dir.path().join("metrics").exists());
}

#[test]
fn bad_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = odeformer(&["copy-task", "--out", out_dir(dir.path()), "--set", "colour=blue"]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8(run.stderr).unwrap().contains("colour"));
    assert!(!odeformer(&["no-such-study"]).status.success());
}

#[test]
fn defaults_round_trip_through_the_parser() {
    let run = odeformer(&["defaults", "gradient-norm-study"]);
    assert!(run.status.success());
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.contains("depths = 12\n"));
    assert!(text.contains("variants = RK2,RK2GammaOne\n"));
}
