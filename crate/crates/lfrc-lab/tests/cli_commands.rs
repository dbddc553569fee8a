//! End-to-end command tests through the real binary.

use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lfrc-lab")
}

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    config: PathBuf,
    run_dir: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// One trained toy model shared by the command tests.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("toy.ini");
        std::fs::write(
            &config,
            "\
[model]
arch = mlp
hidden = 16
input_shape = 2
classes = 2

[train]
epochs = 8
batch_size = 16
lr = 0.05
lambda = 1
seed = 4

[attack]
eps = 0.5
step = 0.2
iters = 5

[data]
kind = gaussians
classes = 2
n_train_per_class = 100
n_test_per_class = 64
dim = 2
separation = 6
seed = 1

[output]
dir = run
",
        )
        .unwrap();
        let out = Command::new(bin())
            .args(["train", "--config", config.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let run_dir = dir.path().join("run");
        Fixture {
            dir,
            config,
            run_dir,
        }
    })
}

fn eval_csv(args: &[&str], out_name: &str) -> String {
    let f = fixture();
    let out_path = f.run_dir.join(out_name);
    let mut full = vec![
        "eval".to_string(),
        "--checkpoint".into(),
        f.run_dir.join("last.ckpt").display().to_string(),
        "--dataset".into(),
        f.config.display().to_string(),
        "--out".into(),
        out_path.display().to_string(),
    ];
    full.extend(args.iter().map(|s| s.to_string()));
    let out = Command::new(bin()).args(&full).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::read_to_string(&out_path).unwrap()
}

fn accuracy_rows(csv: &str) -> Vec<(String, f64)> {
    csv.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("attack,") && !l.trim().is_empty())
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            (fields[0].to_string(), fields[4].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_attack_none_reports_clean_accuracy_only() {
    let csv = eval_csv(&["--attack", "none"], "none.csv");
    let rows = accuracy_rows(&csv);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, "none");
    assert!(rows[0].1 > 0.8, "toy model should be accurate, got {}", rows[0].1);
}

#[test]
fn eval_zero_eps_pgd_equals_clean() {
    let csv = eval_csv(
        &["--attack", "pgd", "--eps", "0", "--step", "0.1", "--iters", "3"],
        "eps0.csv",
    );
    let rows = accuracy_rows(&csv);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].1, rows[1].1, "eps=0 attack must match clean accuracy");
}

#[test]
fn single_step_pgd_matches_fgsm_through_the_cli() {
    let a = eval_csv(
        &[
            "--attack",
            "pgd",
            "--eps",
            "0.5",
            "--step",
            "0.2",
            "--iters",
            "1",
            "--random-start",
            "false",
        ],
        "pgd1.csv",
    );
    let b = eval_csv(&["--attack", "fgsm", "--eps", "0.2"], "fgsm.csv");
    let acc_a = accuracy_rows(&a)
        .into_iter()
        .find(|(n, _)| n == "pgd")
        .unwrap()
        .1;
    let acc_b = accuracy_rows(&b)
        .into_iter()
        .find(|(n, _)| n == "fgsm")
        .unwrap()
        .1;
    assert_eq!(acc_a, acc_b);
}

#[test]
fn image_eval_defaults_echo_standard_budget() {
    // an image dataset picks up eps 8/255, step 2/255, 20 iterations
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("img.ini");
    std::fs::write(
        &config,
        "\
[model]
arch = mini-resnet
channels = 2,4
input_shape = 1,8,8
classes = 2

[train]
epochs = 1
batch_size = 8
lr = 0.01
seed = 0

[attack]
iters = 2

[data]
kind = gaussian-images
classes = 2
n_train_per_class = 16
n_test_per_class = 8
height = 8
width = 8
seed = 5

[output]
dir = run
",
    )
    .unwrap();
    let out = Command::new(bin())
        .args(["train", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv_path = dir.path().join("eval.csv");
    let out = Command::new(bin())
        .args([
            "eval",
            "--checkpoint",
            dir.path().join("run/last.ckpt").to_str().unwrap(),
            "--dataset",
            config.to_str().unwrap(),
            "--out",
            csv_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(
        csv.contains("pgd eps=0.03137254901960784 step=0.00784313725490196 iters=20"),
        "banner should echo the standard image budget:\n{csv}"
    );
}

#[test]
fn analyze_with_zero_eps_reports_undefined_correlation() {
    let f = fixture();
    let out_dir = f.run_dir.join("analyze_eps0");
    let out = Command::new(bin())
        .args([
            "analyze",
            "--checkpoint",
            f.run_dir.join("last.ckpt").to_str().unwrap(),
            "--dataset",
            f.config.to_str().unwrap(),
            "--batch-size",
            "32",
            "--out",
            out_dir.to_str().unwrap(),
            "--attack",
            "pgd",
            "--eps",
            "0",
            "--step",
            "0.1",
            "--iters",
            "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scatter = std::fs::read_to_string(out_dir.join("scatter.csv")).unwrap();
    let rows = lfrc_lab::analysis::read_scatter_csv(&scatter).unwrap();
    assert_eq!(rows.len(), 4, "128 test examples / 32 per batch");
    for (_, ds, da) in &rows {
        assert!(ds.abs() < 1e-9, "identity attack must give DS ~ 0, got {ds}");
        assert_eq!(*da, 0.0);
    }
    assert!(scatter.contains("# pcc,undefined (constant series)"));

    // two matrices per batch, each as pgm + csv sidecar
    for batch in 0..rows.len() {
        for kind in ["natural", "adversarial"] {
            assert!(out_dir.join(format!("batch{batch:03}_{kind}.pgm")).exists());
            assert!(out_dir.join(format!("batch{batch:03}_{kind}.csv")).exists());
        }
    }
}

#[test]
fn transfer_to_self_matches_white_box_eval() {
    let f = fixture();
    let ckpt = f.run_dir.join("last.ckpt");
    let attack_args = [
        "--attack", "pgd", "--eps", "0.5", "--step", "0.2", "--iters", "5", "--seed", "3",
    ];

    let mut transfer_args = vec![
        "transfer",
        "--surrogate",
        ckpt.to_str().unwrap(),
        "--target",
        ckpt.to_str().unwrap(),
        "--dataset",
        f.config.to_str().unwrap(),
    ];
    transfer_args.extend_from_slice(&attack_args);
    let out = Command::new(bin()).args(&transfer_args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let transfer_acc: f64 = stdout
        .lines()
        .find(|l| l.starts_with("transfer_robust_accuracy"))
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();

    let mut eval_args = vec!["--seed", "3"];
    eval_args.extend_from_slice(&attack_args[..8]);
    let csv = eval_csv(&eval_args, "wb.csv");
    let white_box = accuracy_rows(&csv)
        .into_iter()
        .find(|(n, _)| n == "pgd")
        .unwrap()
        .1;
    assert_eq!(transfer_acc, white_box);
}

#[test]
fn transfer_zero_eps_equals_clean_accuracy() {
    let f = fixture();
    let ckpt = f.run_dir.join("last.ckpt");
    let out = Command::new(bin())
        .args([
            "transfer",
            "--surrogate",
            ckpt.to_str().unwrap(),
            "--target",
            ckpt.to_str().unwrap(),
            "--dataset",
            f.config.to_str().unwrap(),
            "--attack",
            "pgd",
            "--eps",
            "0",
            "--step",
            "0.1",
            "--iters",
            "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let transfer_acc: f64 = stdout
        .lines()
        .find(|l| l.starts_with("transfer_robust_accuracy"))
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let clean = accuracy_rows(&eval_csv(&["--attack", "none"], "clean2.csv"))[0].1;
    assert_eq!(transfer_acc, clean);
}

#[test]
fn lambda_zero_still_reports_consistency_diagnostics() {
    let f = fixture();
    let out_dir = f.dir.path().join("lambda0");
    let out = Command::new(bin())
        .args([
            "train",
            "--config",
            f.config.to_str().unwrap(),
            "--lambda",
            "0",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    let mut lines = history.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "epoch,lr,train_ce,train_lfrc,val_clean_acc,val_robust_acc"
    );
    for line in lines {
        let lfrc: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(
            lfrc >= 1.0,
            "exp-metric diagnostic must still be reported at lambda = 0: {lfrc}"
        );
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    // usage error: missing required flag
    let out = Command::new(bin()).args(["train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // usage error: unknown attack name
    let out = Command::new(bin())
        .args([
            "eval",
            "--checkpoint",
            "x",
            "--dataset",
            "y",
            "--attack",
            "nonsense",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // data error: config file does not exist
    let out = Command::new(bin())
        .args(["train", "--config", "/no/such/config.ini"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // numerical failure: a divergent learning rate aborts with code 4
    let f = fixture();
    let diverging = std::fs::read_to_string(&f.config)
        .unwrap()
        .replace("lr = 0.05", "lr = 1e18");
    let bad_config = f.dir.path().join("diverge.ini");
    std::fs::write(&bad_config, diverging).unwrap();
    let out = Command::new(bin())
        .args([
            "train",
            "--config",
            bad_config.to_str().unwrap(),
            "--out",
            f.dir.path().join("diverge2").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epoch"), "diagnostic names the epoch: {stderr}");
}

#[test]
fn commands_do_not_mutate_input_files() {
    let f = fixture();
    let before = std::fs::read(&f.config).unwrap();
    let ckpt_before = std::fs::read(f.run_dir.join("last.ckpt")).unwrap();
    let _ = eval_csv(&["--attack", "fgsm", "--eps", "0.1"], "mut_check.csv");
    assert_eq!(std::fs::read(&f.config).unwrap(), before);
    assert_eq!(
        std::fs::read(f.run_dir.join("last.ckpt")).unwrap(),
        ckpt_before
    );
}

#[test]
fn analyze_rejects_oversized_batch() {
    let f = fixture();
    let out = Command::new(bin())
        .args([
            "analyze",
            "--checkpoint",
            f.run_dir.join("last.ckpt").to_str().unwrap(),
            "--dataset",
            f.config.to_str().unwrap(),
            "--batch-size",
            "100000",
            "--out",
            f.dir.path().join("too_big").to_str().unwrap(),
            "--attack",
            "pgd",
            "--eps",
            "0.5",
            "--step",
            "0.2",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
