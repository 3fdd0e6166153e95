use std::path::Path;
use std::process::{Command, Output};

use dslice_core::metadata::DsMetadata;
use serde_json::Value;

fn dslice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dslice")).args(args).output().expect("run dslice")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, count: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = dslice(&["gen", "--s", "2.5", "--n", "48", "--m", "0", "--count", count, "--seed", seed, "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_deterministic_with_valid_header() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.dks", "3000", "7");
    let b = gen(dir.path(), "b.dks", "3000", "7");
    let c = gen(dir.path(), "c.dks", "3000", "8");
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(&a[..4], b"DKS1");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn gen_rejects_invalid_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.dks");
    for bad in [["--m", "8", "--n", "48"], ["--m", "0", "--n", "44"]] {
        let mut args = vec!["gen", "--s", "2.5", "--count", "10", "--out", p(&out)];
        args.extend(bad);
        let o = dslice(&args);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("invalid value"));
    }
    assert!(!out.exists());
}

#[test]
fn bench_reports_identical_trees_and_consistent_columns() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d.dks", "20000", "3");
    let j = dir.path().join("b.json");
    let o = dslice(&["bench", p(&d), "--threads", "2,1", "--json-out", p(&j)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("cores"));
    let v = json(&j);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["identical"], true);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["threads"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 2]);
    let total = |r: &Value, m: &str| r[m]["total_secs"].as_f64().unwrap();
    for r in rows {
        assert_eq!(r["identical"], true);
        let (f, c) = (total(r, "full"), total(r, "compressed"));
        assert!((r["ratio"].as_f64().unwrap() - f / c).abs() < 1e-9);
        assert!((r["improvement_pct"].as_f64().unwrap() - 100.0 * (f - c) / f).abs() < 1e-9);
        assert!((r["speedup_full"].as_f64().unwrap() - total(&rows[0], "full") / f).abs() < 1e-9);
        assert!((r["speedup_comp"].as_f64().unwrap() - total(&rows[0], "compressed") / c).abs() < 1e-9);
    }
    assert_eq!(rows[0]["speedup_full"].as_f64(), Some(1.0));
}

#[test]
fn build_rebuild_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d.dks", "5000", "1");
    let m = dir.path().join("m.dsm");
    let m2 = dir.path().join("m2.dsm");
    let j = dir.path().join("r.json");
    assert!(dslice(&["build", p(&d), "--meta-out", p(&m)]).status.success());
    let o = dslice(&["rebuild", p(&d), "--meta", p(&m), "--threads", "3", "--meta-out", p(&m2), "--json-out", p(&j)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("structure check: PASS"));
    // an unchanged table gives back the same metadata
    assert_eq!(DsMetadata::load(&m).unwrap(), DsMetadata::load(&m2).unwrap());
    let v = json(&j);
    assert_eq!(v["report"]["method"], "compressed");
    assert_eq!(v["report"]["keys"], 5000);
    let o = dslice(&["meta", "inspect", p(&m)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("D-bitmap"));
}

#[test]
fn stats_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d.dks", "5000", "1");
    let j = dir.path().join("s.json");
    assert!(dslice(&["stats", p(&d), "--json-out", p(&j)]).status.success());
    let s = &json(&j)["stats"];
    assert_eq!(s["full_key_bits"], 384);
    assert_eq!(s["full_sort_key_bytes"], 56);
    let ratio = s["full_key_bits"].as_f64().unwrap() / s["distinction_bits"].as_f64().unwrap();
    assert!((s["compression_ratio"].as_f64().unwrap() - ratio).abs() < 1e-12);
    assert!(s["word_comparison_ratio"].as_f64().unwrap() >= 1.0);
}

/// Letters z..a: record IDs run against key order, so ties in a broken
/// compressed key put rows out of order.
fn letters(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let d = dir.join("letters.txt");
    let text: String = (b'a'..=b'z').rev().map(|c| format!("{}\n", c as char)).collect();
    std::fs::write(&d, text).unwrap();
    let m = dir.join("letters.dsm");
    assert!(dslice(&["build", p(&d), "--meta-out", p(&m)]).status.success());
    (d, m)
}

#[test]
fn verify_passes_on_fresh_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d.dks", "4000", "5");
    let j = dir.path().join("v.json");
    let o = dslice(&["verify", p(&d), "--json-out", p(&j)]);
    assert!(o.status.success(), "{}", stdout(&o));
    let v = json(&j);
    assert_eq!(v["pass"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 4);
    let (d, m) = letters(dir.path());
    assert!(dslice(&["verify", p(&d), "--meta", p(&m)]).status.success());
}

#[test]
fn verify_catches_a_cleared_distinction_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (d, m) = letters(dir.path());
    let meta = DsMetadata::load(&m).unwrap();
    let mut dbm = meta.dbitmap().clone();
    let last = dbm.iter_ones().last().unwrap();
    dbm.clear(last);
    let bad = DsMetadata::from_parts(dbm, meta.variant().clone(), meta.reference().clone(), meta.rid_mask()).unwrap();
    let bm = dir.path().join("bad.dsm");
    bad.save(&bm).unwrap();
    let o = dslice(&["verify", p(&d), "--meta", p(&bm)]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("FAIL compressed keys determine the sorted order"), "{out}");
    assert!(out.contains("FAIL distinction bit theorems on samples"), "{out}");
}

#[test]
fn verify_accepts_a_stale_superset() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d.dks", "3000", "2");
    let m = dir.path().join("m.dsm");
    assert!(dslice(&["build", p(&d), "--meta-out", p(&m)]).status.success());
    let meta = DsMetadata::load(&m).unwrap();
    let stale = DsMetadata::from_parts(meta.variant().clone(), meta.variant().clone(), meta.reference().clone(), meta.rid_mask())
        .unwrap();
    assert!(stale.dbitmap().count_ones() > meta.dbitmap().count_ones());
    let sm = dir.path().join("stale.dsm");
    stale.save(&sm).unwrap();
    let o = dslice(&["verify", p(&d), "--meta", p(&sm)]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn unreadable_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.dks");
    for cmd in ["stats", "bench", "verify", "build"] {
        let o = dslice(&[cmd, p(&missing)]);
        assert_eq!(o.status.code(), Some(1), "{cmd}");
    }
    let o = dslice(&["meta", "inspect", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
}
