use std::path::Path;
use std::process::{Command, Output};

fn pepgp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pepgp")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = pepgp(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Records with the timing field removed.
fn untimed_records(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn synth_gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth-gen", "--n", "50", "--dim", "2", "--seed", "3", "--out", "a.csv"], d);
    ok(&["synth-gen", "--n", "50", "--dim", "2", "--seed", "3", "--out", "b.csv"], d);
    ok(&["synth-gen", "--n", "50", "--dim", "2", "--seed", "4", "--out", "c.csv"], d);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    assert_eq!(String::from_utf8(read("a.csv")).unwrap().lines().count(), 51);
}

#[test]
fn run_matrix_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth-gen", "--n", "80", "--dim", "2", "--seed", "1", "--out", "d.csv"], d);
    let run = |out: &str, workers: &str| {
        ok(
            &[
                "run-matrix", "d.csv", "--alpha", "0,0.5,1", "--num-pseudo", "5,10", "--splits", "2", "--seed",
                "9", "--max-evals", "40", "--workers", workers, "--out", out,
            ],
            d,
        )
    };
    run("r1.jsonl", "1");
    run("r2.jsonl", "1");
    run("r3.jsonl", "3");
    let r1 = untimed_records(&d.join("r1.jsonl"));
    assert_eq!(r1.len(), 12);
    assert_eq!(r1, untimed_records(&d.join("r2.jsonl")));
    assert_eq!(r1, untimed_records(&d.join("r3.jsonl")));
}

#[test]
fn fit_predict_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth-gen", "--n", "120", "--dim", "2", "--seed", "2", "--out", "d.csv"], d);
    ok(&["fit-reg", "d.csv", "--alpha", "0.5", "--num-pseudo", "10", "--max-evals", "80", "--out", "m.json"], d);
    ok(&["predict", "--model", "m.json", "d.csv", "--target", "2", "--out", "p.csv"], d);
    let preds = std::fs::read_to_string(d.join("p.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("mean,var"));
    assert_eq!(preds.lines().count(), 121);

    let out = ok(&["eval", "--model", "m.json", "d.csv"], d);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics["smse"].as_f64().unwrap() < 1.0);

    // Inputs-only file gives the same predictions.
    let text = std::fs::read_to_string(d.join("d.csv")).unwrap();
    let inputs: String = text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n").collect();
    std::fs::write(d.join("x.csv"), inputs).unwrap();
    ok(&["predict", "--model", "m.json", "x.csv", "--out", "p2.csv"], d);
    assert_eq!(std::fs::read(d.join("p2.csv")).unwrap(), preds.into_bytes());
}

#[test]
fn classification_fit_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut text = String::from("a,b,label\n");
    for i in 0..60 {
        let a = (i as f64 * 0.37).sin() * 2.0;
        let b = (i as f64 * 0.91).cos() * 2.0;
        text += &format!("{a},{b},{}\n", u8::from(a + b > 0.0));
    }
    std::fs::write(d.join("c.csv"), text).unwrap();
    ok(&["fit-cls", "c.csv", "--alpha", "1", "--num-pseudo", "8", "--max-evals", "100", "--out", "m.json"], d);
    let out = ok(&["eval", "--model", "m.json", "c.csv"], d);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics["error"].as_f64().unwrap() < 0.2, "{metrics}");
}

#[test]
fn rank_reports_and_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth-gen", "--n", "60", "--dim", "2", "--seed", "5", "--out", "d.csv"], d);
    ok(
        &[
            "run-matrix", "d.csv", "--alpha", "vfe,1,gp", "--num-pseudo", "5", "--splits", "2", "--max-evals", "30",
            "--out", "r.jsonl", "--long-csv", "l.csv",
        ],
        d,
    );
    ok(&["rank", "r.jsonl", "--out", "s.json", "--csv", "s.csv"], d);
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(s["methods"], serde_json::json!(["PEP(1)", "VFE"]));
    assert_eq!(s["cells"], 2);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.csv"), "a,b\n1,2\n3,NaN\n").unwrap();
    let out = pepgp(&["fit-reg", "bad.csv", "--out", "m.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    assert!(!pepgp(&["fit-reg", "missing.csv", "--out", "m.json"], d).status.success());
    assert!(!pepgp(&["fit-reg", "bad.csv", "--alpha", "2", "--out", "m.json"], d).status.success());
}
