use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn out_arg(dir: &Path) -> String {
    format!("out_dir={}", dir.display())
}

/// Column `col` of every data row of a metrics CSV.
fn column(csv: &str, col: usize) -> Vec<String> {
    csv.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().to_string()).collect()
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let o = mrnet(&["train", "--set", "L=6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind"), "{}", stderr(&o));

    let o = mrnet(&["train", "--set", "kind=dmrnet", "--set", "depth=6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("depth"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "kind=dmrnet\nL=9\n").unwrap();
    let o = mrnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains('L'));

    let o = mrnet(&["train", "--set", "kind=dmrnet", "--set", "data=cifar10:/nonexistent/cifar"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data"));
}

#[test]
fn analyze_paths_reports_closed_form_means() {
    for (kind, l, mean) in [("dmrnet", "9", "8"), ("resnet", "9", "20"), ("dilnet", "1", "10/3")] {
        let o = mrnet(&["analyze-paths", "--set", &format!("kind={kind}"), "--set", &format!("L={l}")]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.starts_with("length,multiplicity,probability\n"));
        assert!(out.trim_end().ends_with(&format!("mean_exact={mean}")), "{kind}: {out}");
    }
    let o = mrnet(&["analyze-paths", "--set", "kind=dmrnet", "--set", "L=97"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_paths_writes_report_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrnet(&["analyze-paths", "--set", "kind=resnet", "--set", "L=3", "--set", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let written = fs::read_to_string(dir.path().join("paths_resnet_L3_B2.csv")).unwrap();
    assert_eq!(written, stdout(&o));
}

#[test]
fn verify_passes_and_detects_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrnet(&["verify", "--suite", "idempotence", "--set", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("name,max_deviation,tolerance,pass"));
    assert_eq!(csv.lines().count(), 1 + 12);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));

    let o = mrnet(&["verify", "--suite", "lower"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = mrnet(&["verify", "--suite", "lower", "--perturb", "0.01"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains(",false"));

    let o = mrnet(&["verify", "--suite", "everything"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--set", "kind=dmrnet", "--set", "L=6", "--set", "widths=4,8,16", "--set", "epochs=6",
        "--set", "batch_size=32", "--set", "data=synthetic:2:200",
    ];
    let out = out_arg(dir.path());
    let mut train = vec!["train"];
    train.extend(args);
    train.extend(["--set", &out]);
    let o = mrnet(&train);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,lr,train_loss,train_err,test_err,seconds"));
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(column(&csv, 3).iter().any(|e| e == "0"), "{csv}");
    assert!(dir.path().join("model.mrn").is_file());

    let mut eval = vec!["eval"];
    eval.extend(args);
    eval.extend(["--set", &out]);
    let o = mrnet(&eval);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(report.starts_with("split,loss,err\ntest,"));

    let mut wrong = vec!["eval"];
    wrong.extend(args);
    wrong.extend(["--set", &out, "--set", "widths=4,8,8"]);
    assert_eq!(mrnet(&wrong).status.code(), Some(1));
}

#[test]
fn zero_learning_rate_and_determinism() {
    let run = |lr: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = mrnet(&[
            "train", "--set", "kind=resnet", "--set", "L=3", "--set", "widths=2,4,4", "--set", "epochs=3",
            "--set", "batch_size=20", "--set", "data=synthetic:3:60", "--set", "seed=7",
            "--set", &format!("lr={lr}"), "--set", &out_arg(dir.path()),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read_to_string(dir.path().join("metrics.csv")).unwrap()
    };
    let frozen = run("0");
    let losses = column(&frozen, 2);
    assert!(losses.iter().all(|l| *l == losses[0]), "{frozen}");

    let strip = |csv: &str| csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&run("0.05")), strip(&run("0.05")));
}

#[test]
fn diverging_training_exits_3() {
    let o = mrnet(&[
        "train", "--set", "kind=resnet", "--set", "L=3", "--set", "widths=2,4,4", "--set", "epochs=5",
        "--set", "data=synthetic:2:40", "--set", "lr=1e30", "--set", "dtype=f32",
        "--set", &format!("out_dir={}", tempfile::tempdir().unwrap().path().display()),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
