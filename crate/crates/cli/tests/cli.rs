use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nern(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nern"))
        .args(args)
        .env_remove("NERN_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nern(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("an error line");
    let v: serde_json::Value = serde_json::from_str(last).expect("error line is JSON");
    v["error"].as_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn size_report_prints_the_three_figures() {
    assert_eq!(ok(&["size-report", "--arch", "resnet20_cifar"]), "1.04 1.03 99.04\n");
    assert_eq!(ok(&["size-report", "--arch", "resnet18_imagenet"]), "44.59 42.60 95.54\n");
}

#[test]
fn perm_cost_prints_mb_and_percent() {
    assert_eq!(
        ok(&["perm-cost", "--arch", "resnet56_cifar", "--variant", "cross_filter"]),
        "0.128 MB 3.93%\n"
    );
}

#[test]
fn failures_emit_a_machine_readable_line() {
    assert_eq!(error_kind(&nern(&["size-report", "--arch", "vgg"])), "unknown_arch");
    assert_eq!(
        error_kind(&nern(&["perm-cost", "--arch", "resnet20_cifar", "--variant", "none"])),
        "invalid_argument"
    );
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        error_kind(&nern(&["eval", "--original", p(dir.path()), "--predictor", p(dir.path())])),
        "io"
    );
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "version = 7\n").unwrap();
    let out = nern(&["train-original", "--out", p(&dir.path().join("o")), "--config", p(&cfg)]);
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn embed_profile_csv() {
    let text = ok(&["embed-profile"]);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "index,similarity");
    assert_eq!(lines.len(), 65);
    assert_eq!(lines[32], "31,1.000000000");
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let orig = d.join("orig");
    let perm = d.join("cross.nrp");
    let out = ok(&["train-original", "--out", p(&orig), "--epochs", "2", "--seed", "1"]);
    assert!(out.starts_with("test_accuracy "));
    let orig_files = snapshot(&orig);
    ok(&["permute", "--original", p(&orig), "--variant", "cross_filter", "--out", p(&perm)]);

    let train = |name: &str, perm: Option<&Path>| {
        let dest = d.join(name);
        let mut args = vec![
            "train-nern", "--original", p(&orig), "--out", p(&dest), "--hidden", "8", "--iterations", "15",
            "--seed", "3",
        ];
        if let Some(pp) = perm {
            args.extend(["--permutation", p(pp)]);
        }
        ok(&args);
        dest
    };
    let a = train("a", Some(&perm));
    let b = train("b", Some(&perm));
    let plain = train("plain", None);
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&metrics).starts_with("iter,recon_loss,kd_loss,fmd_loss,lr,eval_acc\n"));

    let pair = ["--original", p(&orig), "--predictor", p(&a), "--permutation", p(&perm)];
    let eval = ok(&[&["eval"], &pair[..]].concat());
    assert!(eval.starts_with("original_accuracy "), "{eval}");

    // predictor trained with a permutation refuses to run without it and vice versa
    let out = nern(&["eval", "--original", p(&orig), "--predictor", p(&a)]);
    assert_eq!(error_kind(&out), "artifact_mismatch");
    let out = nern(&["eval", "--original", p(&orig), "--predictor", p(&plain), "--permutation", p(&perm)]);
    assert_eq!(error_kind(&out), "artifact_mismatch");
    ok(&["eval", "--original", p(&orig), "--predictor", p(&plain)]);

    let sweep = d.join("sweep.csv");
    ok(&[&["prune-sweep"], &pair[..], &["--factors", "0,0.5", "--out", p(&sweep)]].concat());
    let sweep = fs::read_to_string(sweep).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.starts_with("factor,accuracy\n0,"));

    let imp = ok(&[&["importance"], &pair[..], &["--layer", "1"]].concat());
    assert_eq!(imp.lines().count(), 1 + 16);

    let grid = d.join("grid.pgm");
    ok(&[&["export-kernels"], &pair[..], &["--layer", "0", "--rows", "2", "--cols", "4", "--out", p(&grid)]].concat());
    assert!(fs::read(&grid).unwrap().starts_with(b"P5\n"));
    let acts = d.join("acts");
    ok(&["export-activations", "--original", p(&orig), "--layer", "1", "--filters", "0,3", "--out", p(&acts)]);
    assert!(acts.join("filter3.pgm").exists());

    let rebuilt = d.join("rebuilt");
    ok(&[&["reconstruct"], &pair[..], &["--out", p(&rebuilt)]].concat());
    assert!(rebuilt.join("original.json").exists());

    let a_files = snapshot(&a);
    ok(&[&["eval"], &pair[..]].concat());
    assert_eq!(snapshot(&orig), orig_files);
    assert_eq!(snapshot(&a), a_files);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed_env: Option<&str>, flag: Option<&str>| {
        let dest = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_nern"));
        cmd.env_remove("NERN_SEED");
        if let Some(s) = seed_env {
            cmd.env("NERN_SEED", s);
        }
        cmd.args(["train-original", "--out", p(&dest), "--epochs", "1"]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(dest.join("conv0.weight.nrt")).unwrap()
    };
    let env5 = run("env5", Some("5"), None);
    assert_eq!(env5, run("flag5", None, Some("5")));
    assert_ne!(env5, run("default", None, None));
    assert_eq!(run("override", Some("9"), Some("5")), env5);
}

#[test]
fn matrix_from_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(
        &cfg,
        "version = 1\nname = \"tiny\"\nhidden = 8\n[original]\nepochs = 1\n[train]\niterations = 3\n[train.sampling]\nbatch_size = 32\n",
    )
    .unwrap();
    let out = dir.path().join("matrix.csv");
    ok(&["matrix", "--config", p(&cfg), "--seeds", "0,1", "--out", p(&out)]);
    let text = fs::read_to_string(out).unwrap();
    assert!(text.starts_with("config,config_hash,metric,n,mean,ci95,failures\n"));
    assert!(text.lines().any(|l| l.starts_with("tiny,") && l.contains(",reconstructed_accuracy,2,")));
}
