mod common;

use std::fs::{self, File};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use flate2::write::GzEncoder;
use flate2::Compression;
use sha2::{Digest, Sha256};
use vitrm::checkpoint::Checkpoint;
use vitrm::data::{Archive, CifarVariant};
use vitrm::metrics::{read_metrics, Split};
use vitrm_cli::fetch::{fetch_archive, verify_layout, FetchOutcome};
use vitrm_cli::run::{trend_warnings, Cell, RunSummary};

fn vitrm(args: &[&str], extra: &[String]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vitrm"))
        .args(args)
        .args(extra)
        .env_remove("VITRM_DATA")
        .output()
        .unwrap()
}

fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

/// Packs a zero-pixel CIFAR-10 tree into a .tar.gz and describes it.
fn synthetic_archive(dir: &Path) -> Archive {
    let src = dir.join("src");
    common::write_cifar(&src, CifarVariant::Cifar10, true);
    let path = dir.join("cifar-10-binary.tar.gz");
    let mut tar = tar::Builder::new(GzEncoder::new(File::create(&path).unwrap(), Compression::fast()));
    tar.append_dir_all("cifar-10-batches-bin", src.join("cifar-10-batches-bin")).unwrap();
    tar.into_inner().unwrap().finish().unwrap();
    let bytes = fs::read(&path).unwrap();
    Archive {
        url: "http://127.0.0.1:9/unused",
        file_name: "cifar-10-binary.tar.gz",
        size: bytes.len() as u64,
        sha256: leak(hex::encode(Sha256::digest(&bytes))),
    }
}

#[test]
fn fetch_verifies_extracts_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = synthetic_archive(tmp.path());
    let root = tmp.path().join("data");
    fs::create_dir(&root).unwrap();
    fs::copy(tmp.path().join(archive.file_name), root.join(archive.file_name)).unwrap();

    let first = fetch_archive(&root, CifarVariant::Cifar10, &archive, archive.url).unwrap();
    let dir = root.join("cifar-10-batches-bin");
    assert_eq!(first, FetchOutcome::Extracted(dir.clone()));
    let bins: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(bins.len(), 6);
    assert!(fs::metadata(dir.join("data_batch_3.bin")).unwrap().len() == 30_730_000);

    let again = fetch_archive(&root, CifarVariant::Cifar10, &archive, archive.url).unwrap();
    assert_eq!(again, FetchOutcome::AlreadyPresent(dir.clone()));

    // a truncated extracted file is detected and reported with both sizes
    let f = dir.join("test_batch.bin");
    let bytes = fs::read(&f).unwrap();
    fs::write(&f, &bytes[..1000]).unwrap();
    let err = format!("{:#}", verify_layout(&root, CifarVariant::Cifar10).unwrap_err());
    assert!(err.contains("30730000") && err.contains("1000"), "{err}");
    // fetch repairs it from the verified archive
    let repaired = fetch_archive(&root, CifarVariant::Cifar10, &archive, archive.url).unwrap();
    assert_eq!(repaired, FetchOutcome::Extracted(dir));
}

#[test]
fn fetch_refuses_truncated_or_tampered_archives() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = synthetic_archive(tmp.path());
    let bytes = fs::read(tmp.path().join(archive.file_name)).unwrap();

    let root = tmp.path().join("short");
    fs::create_dir(&root).unwrap();
    fs::write(root.join(archive.file_name), &bytes[..bytes.len() / 2]).unwrap();
    let err = format!("{:#}", fetch_archive(&root, CifarVariant::Cifar10, &archive, archive.url).unwrap_err());
    assert!(err.contains(&format!("expected {} bytes", bytes.len())), "{err}");
    assert!(err.contains(&format!("found {}", bytes.len() / 2)), "{err}");
    assert!(!root.join("cifar-10-batches-bin").exists());

    let root = tmp.path().join("tampered");
    fs::create_dir(&root).unwrap();
    let mut bad = bytes.clone();
    bad[100] ^= 1;
    fs::write(root.join(archive.file_name), &bad).unwrap();
    let err = format!("{:#}", fetch_archive(&root, CifarVariant::Cifar10, &archive, archive.url).unwrap_err());
    assert!(err.contains("sha256"), "{err}");
    assert!(!root.join("cifar-10-batches-bin").exists());
}

#[test]
fn inspect_prints_itemized_counts() {
    let out = vitrm(&["inspect"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("block.0.attn.q.weight"));
    assert!(text.lines().last().unwrap().contains("3560555"), "{text}");

    let out = vitrm(&["inspect", "--dataset", "cifar100"], &[]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().last().unwrap().contains(&(3_560_555 + 90 * 312 + 90).to_string()));
}

#[test]
fn bad_config_exits_nonzero_naming_the_field() {
    let out = vitrm(&["inspect", "--halt-threshold", "2"], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("halt_threshold"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# comment\nlatent_steps = 6\nsupervision_steps = zero\n").unwrap();
    let out = vitrm(&["inspect", "--config", cfg.to_str().unwrap()], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("supervision_steps"));

    let out = vitrm(&["train", "--data-dir", tmp.path().to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("data_batch_1.bin"));
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    common::write_cifar(&data, CifarVariant::Cifar10, false);
    let out = tmp.path().join("run");
    let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());
    let args = [
        "train", "--data-dir", d, "--out", o, "--subset", "256", "--val-subset", "200", "--epochs", "5",
        "--batch-size", "64", "--seed", "3",
    ];
    let res = vitrm(&args, &common::tiny_args());
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let records = read_metrics(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(records.iter().filter(|r| r.split == Split::Train).count(), 5);
    assert_eq!(records.iter().filter(|r| r.split == Split::Val).count(), 5);
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.epochs, 5);
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("subset = 256"));

    // eval of the best checkpoint reproduces its in-training validation accuracy
    let best = out.join("best.ckpt");
    let ev = vitrm(&["eval", best.to_str().unwrap(), "--data-dir", d, "--limit", "200"], &[]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let line = String::from_utf8(ev.stdout).unwrap();
    let acc: f64 = line.lines().next().unwrap().trim_start_matches("accuracy ").parse().unwrap();
    assert!((acc - summary.best_val_accuracy.unwrap()).abs() < 1e-6, "{acc} vs {summary:?}");

    // deeper inference runs and reports
    let ev = vitrm(&["eval", best.to_str().unwrap(), "--data-dir", d, "--limit", "50", "--recursions", "3", "--raw"], &[]);
    assert!(ev.status.success());

    // metrics from an identical second run match apart from wall time
    let out2 = tmp.path().join("run2");
    let mut args2 = args.to_vec();
    args2[4] = out2.to_str().unwrap();
    assert!(vitrm(&args2, &common::tiny_args()).status.success());
    let strip = |p: &Path| {
        read_metrics(p)
            .unwrap()
            .into_iter()
            .map(|mut r| {
                r.wall_seconds = 0.0;
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&out.join("metrics.jsonl")), strip(&out2.join("metrics.jsonl")));
    let (a, b) = (
        Checkpoint::<f32>::load(&out.join("last.ckpt")).unwrap(),
        Checkpoint::<f32>::load(&out2.join("last.ckpt")).unwrap(),
    );
    assert_eq!(a.params, b.params);
}

#[test]
fn killed_run_resumes_to_the_uninterrupted_result() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    common::write_cifar(&data, CifarVariant::Cifar10, false);
    let d = data.to_str().unwrap();
    let args = |out: &Path| -> Vec<String> {
        let mut a: Vec<String> = ["train", "--data-dir", d, "--subset", "128", "--val-subset", "64", "--batch-size", "32", "--epochs", "6", "--out"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        a.push(out.to_str().unwrap().into());
        a.extend(common::tiny_args());
        a
    };
    let full = tmp.path().join("full");
    let r = Command::new(env!("CARGO_BIN_EXE_vitrm")).args(args(&full)).output().unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    // kill a second run once its second epoch has been logged
    let part = tmp.path().join("part");
    let mut child = Command::new(env!("CARGO_BIN_EXE_vitrm"))
        .args(args(&part))
        .stderr(Stdio::null())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let log = part.join("metrics.jsonl");
    while fs::read_to_string(&log).map_or(0, |t| t.lines().count()) < 4 {
        if child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    let _ = child.kill();
    child.wait().unwrap();

    let mut resumed = args(&part);
    resumed.push("--resume".into());
    let r = Command::new(env!("CARGO_BIN_EXE_vitrm")).args(resumed).output().unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    eprintln!("{}", String::from_utf8_lossy(&r.stderr).lines().next().unwrap_or(""));

    let (a, b) = (
        Checkpoint::<f32>::load(&part.join("last.ckpt")).unwrap(),
        Checkpoint::<f32>::load(&full.join("last.ckpt")).unwrap(),
    );
    assert_eq!(a.progress.epochs_done, 6);
    assert_eq!(a.params, b.params);
    assert_eq!(a.ema, b.ema);
    assert_eq!(a.opt, b.opt);
    let acc = |p: &Path| {
        read_metrics(&p.join("metrics.jsonl"))
            .unwrap()
            .into_iter()
            .map(|r| (r.epoch, r.split, r.accuracy, r.loss_total))
            .collect::<Vec<_>>()
    };
    assert_eq!(acc(&part), acc(&full));
}

#[test]
fn ablation_grid_runs_every_cell_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    common::write_cifar(&data, CifarVariant::Cifar10, false);
    let out = tmp.path().join("abl");
    let args = [
        "ablate", "--data-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--subset", "64",
        "--val-subset", "32", "--epochs", "1", "--grid-n", "1,2", "--grid-m", "1,2",
    ];
    let r = vitrm(&args, &common::tiny_args());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table = String::from_utf8(r.stdout).unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 4);
    assert_eq!(report["batch_size"], 128);
    assert!(out.join("N2_M2").join("metrics.jsonl").exists());

    let again = vitrm(&args, &common::tiny_args());
    assert!(String::from_utf8_lossy(&again.stderr).matches("reusing finished run").count() == 4);
}

#[test]
fn trend_check_flags_deeper_supervision_winning() {
    let cell = |n, m, a| Cell {
        supervision_steps: n,
        latent_steps: m,
        accuracy: Some(a),
        best_epoch: Some(1),
        epochs: Some(1),
        error: None,
    };
    let cells = vec![cell(1, 1, 0.5), cell(16, 1, 0.4), cell(1, 3, 0.5), cell(16, 3, 0.6)];
    let w = trend_warnings(&cells);
    assert_eq!(w.len(), 1);
    assert!(w[0].starts_with("M=3"));
}
