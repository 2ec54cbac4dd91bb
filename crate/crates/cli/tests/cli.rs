use std::path::Path;
use std::process::{Command, Output};

fn msgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msgc")).args(args).env("MSGC_THREADS", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = msgc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// The single stderr line of a failed run, split into category and detail.
fn err(args: &[&str]) -> String {
    let out = msgc(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let line = String::from_utf8(out.stderr).unwrap();
    let line = line.lines().last().unwrap().to_string();
    let rest = line.strip_prefix("msgc-error: ").expect("machine-parseable prefix");
    rest.split(':').next().unwrap().to_string()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}` in {stdout}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "dataset = {}\nval_dataset = {}\nout_dir = {}\ninput_size = 8\nstem_width = 8\nwidths = 8, 16\nstrides = 1, 2\nepochs = 2\nbatch_size = 16\n{extra}",
            dir.join("train.msgd").display(),
            dir.join("val.msgd").display(),
            dir.join("out").display()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--seed", "1", "--out", p(&d.join("train.msgd")), "--per-class", "6", "--size", "8"]);
    ok(&["synth", "--seed", "2", "--out", p(&d.join("val.msgd")), "--per-class", "3", "--size", "8", "--noisy"]);
    let cfg = write_config(d, "");
    ok(&["train", "--config", p(&cfg)]);
    let log = std::fs::read_to_string(d.join("out/log.csv")).unwrap();
    assert!(log.starts_with("epoch,task_loss,budget_loss,mac_ratio,val_accuracy"));
    assert_eq!(log.lines().count(), 3);

    let ckpt = d.join("out/model.msgc");
    let val = d.join("val.msgd");
    let first = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&val)]);
    assert_eq!(first, ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&val)]));
    let acc: f64 = value(&first, "accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let open = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&val), "--all-ones"]);
    assert_eq!(value(&open, "mac_ratio"), "1.000000");

    let before = std::fs::read(&ckpt).unwrap();
    for which in ["group", "layer", "sample", "attention"] {
        let out = d.join(format!("an_{which}"));
        let files = ok(&["analyze", "--ckpt", p(&ckpt), "--data", p(&val), "--which", which, "--out", p(&out)]);
        assert!(files.lines().any(|f| f.ends_with(".csv")));
        assert!(files.lines().any(|f| f.ends_with(".svg")));
    }
    assert_eq!(before, std::fs::read(&ckpt).unwrap(), "analysis must not touch the checkpoint");

    let table = ok(&["macs", "--ckpt", p(&ckpt)]);
    assert_eq!(table, ok(&["macs", "--config", p(&cfg)]));
}

#[test]
fn macs_table_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let table = ok(&["macs", "--config", p(&cfg)]);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("layer,macs"));
    let mut sum = 0u64;
    let mut total = 0u64;
    for l in lines {
        let (name, v) = l.split_once(',').unwrap();
        match name {
            "total" => total = v.parse().unwrap(),
            "mlp_overhead" | "mlp_overhead_ratio" => {}
            _ => sum += v.parse::<u64>().unwrap(),
        }
    }
    assert_eq!(sum, total);
}

#[test]
fn gradcheck_passes_for_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = ok(&["gradcheck", "--config", p(&cfg), "--seed", "3", "--seeds", "1"]);
    assert!(out.contains("gradcheck=pass"));
    assert!(out.lines().any(|l| l.starts_with("network.loss,")));
}

#[test]
fn failures_report_categories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let junk = d.join("junk.msgd");
    std::fs::write(&junk, b"NOPE....").unwrap();
    assert_eq!(err(&["eval", "--ckpt", p(&junk), "--data", p(&junk)]), "bad-magic");

    let data = d.join("train.msgd");
    ok(&["synth", "--seed", "1", "--out", p(&data), "--per-class", "2", "--size", "8"]);
    let bytes = std::fs::read(&data).unwrap();
    let cut = d.join("cut.msgd");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let cfg = write_config(d, "");
    std::fs::write(d.join("val.msgd"), &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(err(&["train", "--config", p(&cfg)]), "truncated");

    let bad = d.join("bad.cfg");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(err(&["macs", "--config", p(&bad)]), "unknown-key");

    let cfg = write_config(d, "attention = \n");
    std::fs::copy(&data, d.join("val.msgd")).unwrap();
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 1")).unwrap();
    ok(&["train", "--config", p(&cfg)]);
    let ckpt = d.join("out/model.msgc");
    let out = d.join("an");
    assert_eq!(err(&["analyze", "--ckpt", p(&ckpt), "--data", p(&data), "--which", "attention", "--out", p(&out)]), "analysis");
    assert_eq!(err(&["eval", "--ckpt", p(&ckpt), "--data", p(&cut)]), "truncated");
}
