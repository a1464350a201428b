use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualglow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualglow"))
        .current_dir(dir)
        .env_remove("DUALGLOW_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY_TRAIN: &[&str] = &["--levels", "2", "--depth", "1", "--hidden", "4", "--epochs", "1"];

fn gen(dir: &Path, kind: &str, out: &str) {
    let o = dualglow(
        dir,
        &["gen-data", "--kind", kind, "--count", "24", "--image", "1,8,8", "--levels", "2", "--seed", "5", "--out", out],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "data", "--out", out, "--seed", "2"];
    args.extend_from_slice(TINY_TRAIN);
    args.extend_from_slice(extra);
    dualglow(dir, &args)
}

#[test]
fn pipeline_composes_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "blur_pair", "data");
    for f in ["x_m.dgt", "x_p.dgt", "manifest.json"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }
    let o = train(dir, "run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("# seed = 2"));
    assert!(stdout(&o).contains("[model.flow]"));
    for f in ["config.toml", "steps.csv", "epochs.csv", "checkpoint/manifest.json"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    let steps = fs::read_to_string(dir.join("run/steps.csv")).unwrap();
    assert!(steps.starts_with("step,epoch,loss,bits_per_dim,grad_norm"));
    assert_eq!(steps.lines().count(), 1 + 2);

    let o = dualglow(dir, &["sample", "--checkpoint", "run/checkpoint", "--data", "data", "--out", "samples"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("temperature = 0"));
    let png = fs::read(dir.join("samples/montage.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    let o = dualglow(dir, &["evaluate", "--pred", "samples/samples.dgt", "--data", "data", "--out", "eval"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("psnr"));
    let metrics = fs::read_to_string(dir.join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("index,mae,psnr,ssim,corcoef"));
    assert_eq!(metrics.lines().count(), 1 + 24);
    assert!(fs::read_to_string(dir.join("eval/summary.csv")).unwrap().contains("ssim,"));
    assert!(dir.join("eval/montage.png").exists());
}

#[test]
fn same_seed_gives_identical_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "edge_pair", "data");
    for out in ["a", "b"] {
        let o = train(dir, out, &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |p: &str| fs::read(dir.join(p)).unwrap();
    assert_eq!(read("a/steps.csv"), read("b/steps.csv"));
    let names: Vec<_> = fs::read_dir(dir.join("a/checkpoint/params"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(!names.is_empty());
    for n in names {
        let n = n.to_string_lossy();
        assert_eq!(read(&format!("a/checkpoint/params/{n}")), read(&format!("b/checkpoint/params/{n}")), "{n}");
    }
    for out in ["s1", "s2"] {
        let o = dualglow(
            dir,
            &["sample", "--checkpoint", "a/checkpoint", "--data", "data", "--temperature", "0.7", "--seed", "9", "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(read("s1/samples.dgt"), read("s2/samples.dgt"));
}

#[test]
fn side_labels_flow_through() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "cmonotone_pair", "data");
    let o = train(dir, "run", &["--side", "continuous", "--w-cls", "0.05"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("w_cls = 0.05"));
    assert!(fs::read_to_string(dir.join("run/steps.csv")).unwrap().lines().next().unwrap().contains("disc0"));

    let o = dualglow(dir, &["sample", "--checkpoint", "run/checkpoint", "--input", "data/x_m.dgt", "--out", "s"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("side labels"));
    for (label, out) in [("0.0", "lo"), ("1.0", "hi")] {
        let o = dualglow(
            dir,
            &["sample", "--checkpoint", "run/checkpoint", "--input", "data/x_m.dgt", "--side-label", label, "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_ne!(fs::read(dir.join("lo/samples.dgt")).unwrap(), fs::read(dir.join("hi/samples.dgt")).unwrap());
    let o = dualglow(dir, &["sample", "--checkpoint", "run/checkpoint", "--input", "data/x_m.dgt", "--side-label", "x"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = dualglow(dir, &["verify", "--init", "zero", "--out", "v"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("log-det vs Jacobian"));
    assert!(stdout(&o).contains("# seed = 0"));
    let csv = fs::read_to_string(dir.join("v/verify.csv")).unwrap();
    assert!(csv.starts_with("name,observed,tolerance,passed"));
    assert!(!csv.contains("false"));

    let o = dualglow(dir, &["verify", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let o = dualglow(dir, &["verify", "--fault", "negate-shift"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("FAIL flow_p round trip"));
    assert!(stderr(&o).contains("failed: flow_p round trip"));
}

#[test]
fn complexity_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dualglow(tmp.path(), &["complexity", "--levels", "6", "--base", "2", "--out", "c"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(tmp.path().join("c/complexity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.contains("\n3,2,48,28,48,28,"));
    assert_eq!(code(&dualglow(tmp.path(), &["complexity", "--levels", "0"])), 1);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&dualglow(dir, &["train", "--bogus"])), 1);
    assert_eq!(code(&dualglow(dir, &["frobnicate"])), 1);
    assert_eq!(code(&dualglow(dir, &["complexity", "--lambda", "0.1"])), 1);
    assert_eq!(code(&dualglow(dir, &["gen-data", "--kind", "nope"])), 1);
    assert_eq!(code(&dualglow(dir, &["gen-data", "--image", "1,10,10"])), 1);
    assert_eq!(code(&dualglow(dir, &["train", "--data", "missing"])), 1);
    assert_eq!(code(&dualglow(dir, &["--help"])), 0);
    fs::write(dir.join("bad.toml"), "[model.flow]\ninput = [1, 8, 8]\nlevels = 2\ndepth = 1\nhidden = 4\nextra = 1\n").unwrap();
    let o = dualglow(dir, &["verify", "--config", "bad.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.toml"));
    let o = Command::new(env!("CARGO_BIN_EXE_dualglow"))
        .current_dir(dir)
        .env("DUALGLOW_THREADS", "0")
        .args(["complexity"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "blur_pair", "data");
    fs::write(
        dir.join("hot.toml"),
        "[model.flow]\ninput = [1, 8, 8]\nlevels = 2\ndepth = 1\nhidden = 4\n[train]\nepochs = 20\nlr = 1e6\ngrad_clip = 1e30\n",
    )
    .unwrap();
    let o = dualglow(dir, &["train", "--data", "data", "--config", "hot.toml", "--out", "run"]);
    assert_eq!(code(&o), 2, "{}\n{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("training stopped"));
    assert!(dir.join("run/steps.csv").exists());
}
