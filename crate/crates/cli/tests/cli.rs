use std::fs;
use std::process::{Command, Output};

fn irrcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irrcnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run = run.to_str().unwrap();
    let out = irrcnn(&[
        "train",
        "--dataset",
        "synthetic",
        "--preset",
        "miniature",
        "--epochs",
        "2",
        "--batch-size",
        "32",
        "--out",
        run,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with(['1', '2'])).collect();
    assert_eq!(rows.len(), 2);
    assert!(text.starts_with("epoch,train_loss"));
    for file in ["config.toml", "metrics.csv", "model.ckpt"] {
        assert!(
            dir.path().join("run").join(file).is_file(),
            "{file} missing"
        );
    }

    let ckpt = format!("{run}/model.ckpt");
    let eval = irrcnn(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--dataset",
        "synthetic",
        "--preset",
        "miniature",
    ]);
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let last_val_acc: f64 = rows[1].split(',').nth(4).unwrap().parse().unwrap();
    let top1: f64 = stdout(&eval)
        .lines()
        .find_map(|l| l.strip_prefix("top-1: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((top1 - last_val_acc).abs() < 1e-4);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "dataset = \"synthetic\"\npreset = \"miniature\"\nepochs = 5\nbatch_size = 16\n\n[synthetic]\ntrain = 32\ntest = 16\nclasses = 4\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = irrcnn(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--epochs",
        "1",
        "--arch",
        "eirn",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let saved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("epochs = 1"), "{saved}");
    assert!(saved.contains("variant = \"eirn\""), "{saved}");
    assert!(saved.contains("batch_size = 16"), "{saved}");
}

#[test]
fn invalid_input_exits_with_usage_error() {
    let missing = irrcnn(&["train", "--config", "/definitely/not/here.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));

    let dir = tempfile::tempdir().unwrap();
    let no_data = irrcnn(&[
        "train",
        "--dataset",
        "cifar10",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(no_data.status.code(), Some(2));
    assert!(stdout(&no_data).is_empty());

    assert!(!irrcnn(&["train", "--arch", "resnet"]).status.success());
    assert!(
        !irrcnn(&["train", "--batch-size", "0", "--dataset", "synthetic"])
            .status
            .success()
    );
}

#[test]
fn gradcheck_exit_status_tracks_result() {
    let good = irrcnn(&["gradcheck", "--arch", "ircnn"]);
    assert!(good.status.success());
    assert!(stdout(&good).trim_end().ends_with("PASS"));

    let bad = irrcnn(&["gradcheck", "--arch", "ircnn", "--inject-fault"]);
    assert!(!bad.status.success());
    assert!(stdout(&bad).trim_end().ends_with("FAIL"));
}

#[test]
fn summary_reports_parity() {
    let out = irrcnn(&["summary", "--preset", "small"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for name in ["IRRCNN", "IRCNN", "EIN", "EIRN"] {
        assert!(text.contains(name), "{name} missing");
    }
    assert!(text.contains("parity: all variants within 2%"));
}
