use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
data.source = synthetic
synth.blocks = 4
synth.eval_blocks = 2
synth.points = 32
model.stage1.width = 8
model.stage2.width = 8
model.stage1.ratio = 0.25
model.stage2.ratio = 0.5
train.epochs = 2
train.batch_size = 2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dtaformer"));
    c.env_remove("DTA_DATA_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dtaformer")
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data lines of a CSV artifact: no `#` preamble, no header.
fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn train_tiny(tmp: &TempDir, out: &str) -> (PathBuf, PathBuf) {
    let cfg = write_cfg(tmp.path(), "tiny.cfg", TINY);
    let out = tmp.path().join(out);
    let o = run(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (cfg, out)
}

#[test]
fn train_twice_gives_identical_checkpoints_and_log() {
    let tmp = TempDir::new().unwrap();
    let (_, a) = train_tiny(&tmp, "a");
    let (_, b) = train_tiny(&tmp, "b");
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("# seed = 7\n"));
    assert!(log.contains("# model.stage1.width = 8"));
    assert!(log.contains("epoch,lr,train_loss,eval_oa,eval_miou,eval_avg_f1"));
    assert_eq!(data_rows(&a.join("train_log.csv")).len(), 2);
    assert!(a.join("checkpoint_epoch0002.json").exists());
}

#[test]
fn bad_key_exits_2_naming_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "bad.cfg", "model.stage1.widht = 8\n");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.stage1.widht"));
}

#[test]
fn missing_data_dir_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "d.cfg", "data.source = dir\ndata.root = /nonexistent/dta\n");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn env_root_override_applies() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "d.cfg", "data.source = dir\ndata.root = /nonexistent/dta\n");
    let o = bin()
        .args(["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))])
        .env("DTA_DATA_ROOT", "/also/missing")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/also/missing"));
}

#[test]
fn eval_reproduces_last_logged_metrics() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = train_tiny(&tmp, "run");
    let ck = out.join("checkpoint.json");
    let e1 = tmp.path().join("e1");
    let e2 = tmp.path().join("e2");
    for e in [&e1, &e2] {
        let o = run(&["eval", "--config", s(&cfg), "--seed", "7", "--checkpoint", s(&ck), "--out", s(e)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let r1 = fs::read_to_string(e1.join("report.json")).unwrap();
    assert_eq!(r1, fs::read_to_string(e2.join("report.json")).unwrap());

    let report: serde_json::Value = serde_json::from_str(&r1).unwrap();
    for key in ["oa", "miou", "avg_f1", "per_class", "confusion", "latency_ms", "config_echo", "seed"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let last = data_rows(&out.join("train_log.csv")).pop().unwrap();
    let cols: Vec<f64> = last.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
    assert_eq!(report["oa"].as_f64().unwrap(), cols[0]);
    assert_eq!(report["miou"].as_f64().unwrap(), cols[1]);
    assert_eq!(report["avg_f1"].as_f64().unwrap(), cols[2]);
}

#[test]
fn eval_with_mismatched_config_exits_2() {
    let tmp = TempDir::new().unwrap();
    let (_, out) = train_tiny(&tmp, "run");
    let other = write_cfg(tmp.path(), "other.cfg", &TINY.replace("model.stage2.width = 8", "model.stage2.width = 12"));
    let o = run(&[
        "eval",
        "--config",
        s(&other),
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_rows_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "tiny.cfg", &TINY.replace("train.epochs = 2", "train.epochs = 1"));
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = run(&["ablate", "--config", s(&cfg), "--variants", "lts=fps,lts=random", "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let rows = data_rows(&out.join("ablation.csv"));
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("baseline,"));
        tables.push(rows);
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn ablate_all_covers_every_variant() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "tiny.cfg", &TINY.replace("train.epochs = 2", "train.epochs = 1"));
    let out = tmp.path().join("all");
    let o = run(&["ablate", "--config", s(&cfg), "--variants", "all", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(text.contains("variant,oa,miou,avg_f1,latency_ms\n"));
    let rows = data_rows(&out.join("ablation.csv"));
    assert_eq!(rows.len(), 12);
    for v in ["dta=vca", "gfe=no_psa", "itr=nearest", "arch=unet"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{v},"))), "{v}");
    }
}

#[test]
fn ablate_unknown_variant_lists_valid_names() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["ablate", "--variants", "lts=fps,dta=magic", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("dta=magic"));
    assert!(err.contains("lts=random") && err.contains("arch=unet"));
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["gradcheck", "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("gradcheck.json")).unwrap()).unwrap();
    let blocks = report["blocks"].as_array().unwrap();
    assert!(blocks.iter().all(|b| b.get("max_rel_err").is_some()));
    for name in ["lts", "dta", "gfe", "itr", "end_to_end"] {
        assert!(blocks.iter().any(|b| b["block"] == name), "{name}");
    }

    let o = run(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn viz_dumps_have_one_row_per_point() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = train_tiny(&tmp, "run");
    let ck = out.join("checkpoint.json");
    let v = tmp.path().join("viz");
    let o = run(&["viz", "--config", s(&cfg), "--checkpoint", s(&ck), "--query-index", "2", "--out", s(&v)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // N = 32, stage 1 keeps 8, stage 2 keeps 16
    for (file, h) in [("stage1_selection.csv", 8), ("stage2_selection.csv", 16)] {
        let rows = data_rows(&v.join(file));
        assert_eq!(rows.len(), 32);
        let selected = rows.iter().filter(|r| r.ends_with(",1")).count();
        assert_eq!(selected, h, "{file}");
        for r in &rows {
            let p: f64 = r.split(',').nth(4).unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }
    let map = data_rows(&v.join("stage1_map_row2.csv"));
    assert_eq!(map.len(), 32);
    let sum: f64 = map.iter().map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert_eq!(data_rows(&v.join("predictions.csv")).len(), 32);
    assert!(fs::read_to_string(v.join("predictions.csv")).unwrap().starts_with("# seed = "));

    let o = run(&["viz", "--config", s(&cfg), "--checkpoint", s(&ck), "--query-index", "8", "--out", s(&v)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_writes_loadable_blocks() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_cfg(tmp.path(), "tiny.cfg", TINY);
    let out = tmp.path().join("corpus");
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(out.join("train")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(out.join("eval")).unwrap().count(), 2);
    let (block, k) = dta_core::data::read_block(&out.join("train/synth_0000.blk")).unwrap();
    assert_eq!((block.len(), block.channels(), k), (32, 6, 6));
}
