//! The `dualgrid` binary end to end.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualgrid"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn short_copy(dir: &Path, name: &str, end_time: f64) -> PathBuf {
    let text = std::fs::read_to_string(scenario(name)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["run"]["end_time"] = end_time.into();
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn run_then_compare_across_rank_counts() {
    let dir = tempfile::tempdir().unwrap();
    let s = short_copy(dir.path(), "one_particle", 0.05);
    for (ranks, strategy) in [(1, "distributed"), (4, "gather-scatter")] {
        let out = dir.path().join(format!("r{ranks}"));
        let status = bin()
            .args(["run", s.to_str().unwrap(), "--ranks", &ranks.to_string(), "--strategy", strategy, "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        for f in ["manifest.json", "metrics.csv", "timing.csv", "traffic.csv", "particles_final.csv", "probes/particle.csv"] {
            assert!(out.join(f).exists(), "missing {f}");
        }
    }
    let cmp = bin().arg("compare").arg(dir.path().join("r1")).arg(dir.path().join("r4")).output().unwrap();
    let text = String::from_utf8_lossy(&cmp.stdout);
    assert!(cmp.status.success(), "{text}");
    assert!(text.contains("PASS at tolerance 0"), "{text}");
}

#[test]
fn compare_refuses_different_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let a = short_copy(dir.path(), "one_particle", 0.01);
    let b = dir.path().join("b.json");
    let text = std::fs::read_to_string(&a).unwrap().replace("\"end_time\": 0.01", "\"end_time\": 0.02");
    std::fs::write(&b, text).unwrap();
    for (s, out) in [(&a, "a"), (&b, "b")] {
        let st = bin().arg("run").arg(s).arg("--out").arg(dir.path().join(out)).output().unwrap();
        assert!(st.status.success());
    }
    let cmp = bin().arg("compare").arg(dir.path().join("a")).arg(dir.path().join("b")).output().unwrap();
    assert_eq!(cmp.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&cmp.stderr).contains("different scenarios"));
}

#[test]
fn invalid_scenario_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("one_particle")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["coupling"]["n_sub"] = 0.into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = bin().arg("run").arg(&path).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("coupling.n_sub"));
}
