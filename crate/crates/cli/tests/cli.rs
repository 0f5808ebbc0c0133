use std::path::Path;
use std::process::{Command, Output};

fn lira(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lira"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lira(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = d.join("data");
    let (s1, s2) = (d.join("s1.ckpt"), d.join("s2.ckpt"));
    ok(&["gen-data", "--out", s(&data), "--train", "6", "--eval", "3", "--gcg-fraction", "0.5"]);
    ok(&["train", "--data-dir", s(&data), "--stage", "1", "--steps", "2", "--checkpoint", s(&s1)]);
    let log = d.join("s2.jsonl");
    ok(&[
        "train", "--data-dir", s(&data), "--stage", "2", "--steps", "3", "--batch-size", "2",
        "--init-checkpoint", s(&s1), "--checkpoint", s(&s2), "--log", s(&log),
    ]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["step"], 2);
    assert!(lines[0]["total"].as_f64().unwrap() > 0.0);

    let (report, csv) = (d.join("refseg.json"), d.join("iou.csv"));
    let common = ["--data-dir", s(&data), "--checkpoint", s(&s2), "--max-generation-steps", "8"];
    let mut args = vec!["eval", "--task", "refseg", "--out", s(&report), "--csv", s(&csv)];
    args.extend(common);
    let out = lira(&args);
    assert!(matches!(out.status.code(), Some(0 | 3)));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let n = r["metrics"]["count"].as_u64().unwrap();
    assert!(n >= 3);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count() as u64, n + 1);

    let probes = d.join("probes.json");
    ok(&["attr-build", "--split", s(&data.join("eval")), "--out", s(&probes)]);
    let attr = d.join("attr.json");
    let mut args = vec!["attr-score", "--probes", s(&probes), "--out", s(&attr)];
    args.extend(common);
    ok(&args);
    let a: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&attr).unwrap()).unwrap();
    assert!(a["acc1"].as_f64().unwrap() <= a["acc3"].as_f64().unwrap());

    let gen_dir = d.join("gen");
    let image = data.join("eval/images/scene_00000.ppm");
    let mut args = vec!["generate", "--image", s(&image), "--query", "the red one", "--out-dir", s(&gen_dir)];
    args.extend(common);
    let out = lira(&args);
    assert!(matches!(out.status.code(), Some(0 | 3)));
    let trace = std::fs::read_to_string(gen_dir.join("trace.jsonl")).unwrap();
    assert!(trace.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let conf = d.join("conf.json");
    ok(&["eval", "--task", "conformance", "--out", s(&conf)]);
    let gc = d.join("gc.json");
    ok(&["grad-check", "--configs", "1", "--max-coords", "1", "--out", s(&gc)]);
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lira(&["eval", "--task", "refseg", "--checkpoint", "/nonexistent.ckpt", "--out", s(&tmp.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
    let out = lira(&["train", "--stage", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let out = lira(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}
