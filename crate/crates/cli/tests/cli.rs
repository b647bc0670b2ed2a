use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_crisp");

fn crisp(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = crisp(args);
    assert!(
        out.status.success(),
        "crisp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny dataset and a briefly trained model shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&["gen-data", "--count", "40", "--test-count", "12", "--size", "16", "--classes", "2", "--seed", "3", "--out", p(&data)]);
        let run = root.join("run");
        ok(&[
            "train", "--data", p(&data), "--out", p(&run), "--max-epochs", "3", "--batch-size", "8", "--quiet",
            "--set", "d_x=8", "--set", "d_y=8", "--set", "d_h=4", "--set", "hidden=16",
        ]);
        Fixture {
            checkpoint: run.join("checkpoint.bin"),
            _dir: dir,
            root,
            data,
        }
    })
}

fn scratch(name: &str) -> PathBuf {
    let dir = fixture().root.join("scratch").join(name);
    std::fs::create_dir_all(dir.parent().unwrap()).unwrap();
    dir
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_three_files_and_a_manifest() {
    let f = fixture();
    for name in ["train.bin", "val.bin", "test.bin", "manifest.json", "config.txt"] {
        assert!(f.data.join(name).is_file(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.data.join("manifest.json")).unwrap()).unwrap();
    let counts: Vec<u64> = manifest["files"].as_array().unwrap().iter().map(|f| f["count"].as_u64().unwrap()).collect();
    assert_eq!(counts, vec![32, 8, 12]);
}

#[test]
fn invalid_class_count_is_a_usage_error() {
    let out = crisp(&["gen-data", "--classes", "5", "--out", p(&scratch("bad-classes"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!scratch("bad-classes").exists());
}

#[test]
fn zero_epochs_is_a_usage_error() {
    let out = crisp(&["train", "--data", p(&fixture().data), "--max-epochs", "0", "--out", p(&scratch("zero-epochs"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!scratch("zero-epochs").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let out = crisp(&["gen-data", "--set", "colour=blue", "--out", p(&scratch("unknown-key"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_fails_and_leaves_no_output() {
    let out_dir = scratch("missing-ckpt");
    let out = crisp(&["estimate", "--data", p(&fixture().data), "--checkpoint", "/nonexistent/model.bin", "--out", p(&out_dir)]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());
    let parent = out_dir.parent().unwrap();
    assert!(std::fs::read_dir(parent).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().contains("partial")));
}

#[test]
fn edge_needs_no_checkpoint() {
    let out_dir = scratch("edge");
    ok(&["estimate", "--data", p(&fixture().data), "--method", "edge", "--out", p(&out_dir)]);
    for i in 0..12 {
        for name in [format!("pred_{i:04}.pgm"), format!("unc_{i:04}.pgm"), format!("unc_{i:04}.raw")] {
            assert!(out_dir.join(&name).is_file(), "{name}");
        }
    }
}

#[test]
fn m_larger_than_bank_is_rejected() {
    let dir = scratch("tiny-bank");
    let data = dir.join("data");
    ok(&["gen-data", "--count", "4", "--val-fraction", "0.5", "--test-count", "2", "--size", "16", "--classes", "2", "--out", p(&data)]);
    let out = crisp(&[
        "estimate", "--data", p(&data), "--checkpoint", p(&fixture().checkpoint), "--method", "crisp", "--m", "5",
        "--out", p(&dir.join("est")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bank size 4"));
    assert!(!dir.join("est").exists());
}

#[test]
fn entropy_requires_model_predictions() {
    let out = crisp(&[
        "estimate", "--data", p(&fixture().data), "--checkpoint", p(&fixture().checkpoint), "--method", "entropy",
        "--out", p(&scratch("entropy-corrupt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    ok(&[
        "estimate", "--data", p(&fixture().data), "--checkpoint", p(&fixture().checkpoint), "--method", "entropy",
        "--pred-source", "model", "--out", p(&scratch("entropy-model")),
    ]);
}

#[test]
fn existing_output_directory_is_not_overwritten() {
    let out_dir = scratch("occupied");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join("keep.txt"), "x").unwrap();
    let out = crisp(&["estimate", "--data", p(&fixture().data), "--method", "edge", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(out_dir.join("keep.txt")).unwrap(), "x");
}

#[test]
fn methods_scored_on_shared_predictions_share_dice() {
    let f = fixture();
    let (ce, ee) = (scratch("shared-crisp"), scratch("shared-edge"));
    ok(&["estimate", "--data", p(&f.data), "--checkpoint", p(&f.checkpoint), "--m", "5", "--out", p(&ce)]);
    ok(&["estimate", "--data", p(&f.data), "--method", "edge", "--out", p(&ee)]);
    let (cr, er) = (scratch("shared-crisp-eval"), scratch("shared-edge-eval"));
    ok(&["evaluate", "--data", p(&f.data), "--maps", p(&ce), "--out", p(&cr)]);
    ok(&["evaluate", "--data", p(&f.data), "--maps", p(&ee), "--out", p(&er)]);
    let dice = |r: &serde_json::Value| -> Vec<f64> { r["per_sample"].as_array().unwrap().iter().map(|s| s["dice"].as_f64().unwrap()).collect() };
    assert_eq!(dice(&report(&cr)), dice(&report(&er)));
    for name in ["per_sample.csv", "pixel_confidence.csv", "config.txt"] {
        assert!(cr.join(name).is_file());
    }
    let pixels = std::fs::read_to_string(cr.join("pixel_confidence.csv")).unwrap();
    assert_eq!(pixels.lines().next(), Some("confidence,correct"));
    assert_eq!(pixels.lines().count(), 1 + 12 * 16 * 16);
}

#[test]
fn perfect_predictions_flag_degenerate_correlation() {
    let f = fixture();
    let est = scratch("perfect");
    ok(&["estimate", "--data", p(&f.data), "--method", "edge", "--severities", "0", "--out", p(&est)]);
    let ev = scratch("perfect-eval");
    ok(&["evaluate", "--data", p(&f.data), "--maps", p(&est), "--out", p(&ev)]);
    let r = report(&ev);
    assert_eq!(r["aggregate"]["all_perfect"], true);
    assert_eq!(r["aggregate"]["weighted_mi"], 0.0);
    assert_eq!(r["aggregate"]["correlation_degenerate"], true);
}

#[test]
fn misaligned_maps_are_rejected() {
    let f = fixture();
    let est = scratch("misaligned");
    ok(&["estimate", "--data", p(&f.data), "--method", "edge", "--out", p(&est)]);
    std::fs::remove_file(est.join("pred_0011.pgm")).unwrap();
    let ev = scratch("misaligned-eval");
    let out = crisp(&["evaluate", "--data", p(&f.data), "--maps", p(&est), "--out", p(&ev)]);
    assert!(!out.status.success());
    assert!(!ev.exists());
}

#[test]
fn external_predictions_round_trip() {
    let f = fixture();
    let first = scratch("external-src");
    ok(&["estimate", "--data", p(&f.data), "--method", "edge", "--out", p(&first)]);
    let second = scratch("external-dst");
    ok(&["estimate", "--data", p(&f.data), "--method", "edge", "--pred-source", "external", "--pred-dir", p(&first), "--out", p(&second)]);
    for i in 0..12 {
        let name = format!("unc_{i:04}.raw");
        assert_eq!(std::fs::read(first.join(&name)).unwrap(), std::fs::read(second.join(&name)).unwrap());
    }
}

#[test]
fn ablation_rows_are_finite_and_match_estimate_at_full_bank() {
    let f = fixture();
    let abl = scratch("ablate");
    ok(&["ablate-m", "--data", p(&f.data), "--checkpoint", p(&f.checkpoint), "--m-list", "5,10,25,40", "--out", p(&abl)]);
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(csv.lines().next(), Some("m,correlation,weighted_mi"));
    assert_eq!(rows.len(), 4);
    for r in &rows {
        for v in &r[1..] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{csv}");
        }
    }

    // the bank holds train + val = 40 masks
    let est = scratch("ablate-full");
    ok(&["estimate", "--data", p(&f.data), "--checkpoint", p(&f.checkpoint), "--m", "40", "--out", p(&est)]);
    let ev = scratch("ablate-full-eval");
    ok(&["evaluate", "--data", p(&f.data), "--maps", p(&est), "--out", p(&ev)]);
    let r = report(&ev);
    assert_eq!(rows[3][0], "40");
    assert_eq!(rows[3][1].parse::<f64>().unwrap(), r["aggregate"]["correlation"].as_f64().unwrap());
    assert_eq!(rows[3][2].parse::<f64>().unwrap(), r["aggregate"]["weighted_mi"].as_f64().unwrap());
}

#[test]
fn config_dump_reproduces_the_run() {
    let f = fixture();
    let first = scratch("repro-a");
    ok(&["estimate", "--data", p(&f.data), "--checkpoint", p(&f.checkpoint), "--m-ratio", "0.1", "--corrupt-seed", "9", "--out", p(&first)]);
    let second = scratch("repro-b");
    ok(&["estimate", "--config", p(&first.join("config.txt")), "--out", p(&second)]);
    let mut names: Vec<_> = std::fs::read_dir(&first).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names.iter().filter(|n| n.to_string_lossy() != "config.txt") {
        assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap(), "{name:?}");
    }
    // the dumps differ only in the output directory
    let a = std::fs::read_to_string(first.join("config.txt")).unwrap();
    let b = std::fs::read_to_string(second.join("config.txt")).unwrap();
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("out =")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&a), strip(&b));
}
