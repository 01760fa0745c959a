use std::path::Path;
use std::process::Command;

fn run(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_ising-stmdp"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ISING_STMDP_OUT")
        .output()
        .expect("binary runs");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into_owned())
}

#[test]
fn solve_and_values_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (code, log) = run(&["solve", "--n", "8", "--lambda", "15/17"], dir.path());
    assert_eq!(code, 0, "{log}");
    assert!(log.contains("agree with the structural theorem: true"), "{log}");
    let values = std::fs::read_to_string(dir.path().join("values.csv")).unwrap();
    assert!(values.starts_with("i,j,value\n"));
    assert_eq!(values.lines().count(), 1 + 37);
    let (code, _) = run(&["values", "--n", "8", "--policy", "pi2"], dir.path());
    assert_eq!(code, 0);
    assert!(dir.path().join("values_pi2.csv").exists());
}

#[test]
fn inequalities_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let (code, log) = run(&["verify-inequalities", "--n", "10", "--lambda", "0.95"], dir.path());
    assert_eq!(code, 0, "{log}");
}

#[test]
fn tiny_sweep_emits_rows() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sweep", "--n", "8", "--kappas", "1,50", "--reps", "2", "--max-epochs", "20"];
    let (code, log) = run(&args, dir.path());
    assert_eq!(code, 0, "{log}");
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kappa,policy,seed,hit_epochs,hit_steps"));
    assert_eq!(lines.count(), 2 * 3 * 2);
    assert!(dir.path().join("sweep_summary.csv").exists());
}

#[test]
fn bad_discount_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&["solve", "--n", "8", "--lambda", "3/2"], dir.path());
    assert_eq!(code, 2);
}
