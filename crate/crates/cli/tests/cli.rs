use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dfar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dfar")
}

fn ok(args: &[&str]) -> String {
    let out = dfar(args);
    assert!(
        out.status.success(),
        "dfar {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_infer_eval_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("spec.toml");
    fs::write(&spec, "num_sequences = 2\nnum_test_sequences = 1\nframes_per_sequence = 6\nimage_size = 64\nspeed = [0.5, 2.0]\n").unwrap();
    let data = root.join("data");
    ok(&["synth", "--spec", p(&spec), "--out", p(&data), "--seed", "3"]);
    assert!(data.join("train").is_dir() && data.join("test").is_dir());

    let run = root.join("run");
    let stdout = ok(&[
        "train", "--data", p(&data.join("train")), "--out", p(&run),
        "--input-size", "64", "--batch-size", "1", "--max-iterations", "3", "--lr", "1e-3",
    ]);
    assert!(stdout.contains("trained 3 iterations"), "{stdout}");
    let log = fs::read_to_string(run.join("loss.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["iter", "total", "reg", "cls", "obj", "mc"] {
            assert!(rec.get(key).is_some(), "{key} missing from {line}");
        }
    }
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("input_size = 64"), "{cfg}");
    let ckpt = run.join("iter_000003.ckpt");
    assert!(ckpt.is_file());

    let dets = root.join("dets.txt");
    ok(&["infer", "--checkpoint", p(&ckpt), "--data", p(&data.join("test")), "--out", p(&dets), "--conf", "0.0"]);
    let text = fs::read_to_string(&dets).unwrap();
    assert!(text.lines().all(|l| l.split_whitespace().count() == 7));

    let report = root.join("metrics.json");
    let curve = root.join("pr.csv");
    ok(&["eval", "--detections", p(&dets), "--data", p(&data.join("test")), "--report", p(&report), "--pr-curve", p(&curve)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["map50", "precision", "recall", "f1"] {
        let v = m[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(fs::read_to_string(&curve).unwrap().starts_with("score,recall,precision,envelope"));

    let vis = root.join("vis");
    ok(&["visualize", "--checkpoint", p(&ckpt), "--data", p(&data.join("test")), "--sequence", "test_000", "--frame", "2", "--out", p(&vis)]);
    let pngs = fs::read_dir(&vis).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 6);
}

#[test]
fn ground_truth_replay_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, "num_sequences = 1\nnum_test_sequences = 1\nframes_per_sequence = 4\nimage_size = 32\nspeed = [0.5, 1.0]\n").unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--spec", p(&spec), "--out", p(&data)]);
    let ann = fs::read_to_string(data.join("test/test_000/annotations.csv")).unwrap();
    let mut dets = String::new();
    for row in ann.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        dets.push_str(&format!("test_000 {} {} {} {} {} 0.9\n", f[0], f[1], f[2], f[3], f[4]));
    }
    let path = tmp.path().join("gt.txt");
    fs::write(&path, dets).unwrap();
    let curve = tmp.path().join("pr.csv");
    let out = ok(&["eval", "--detections", p(&path), "--data", p(&data.join("test")), "--pr-curve", p(&curve)]);
    let m: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(m["map50"].as_f64(), Some(1.0));
    assert_eq!(m["f1"].as_f64(), Some(1.0));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let out = dfar(&["--device", "cuda", "synth", "--out", "/nonexistent/x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cpu"));

    let tmp = tempfile::tempdir().unwrap();
    let out = dfar(&["eval", "--detections", p(&tmp.path().join("missing.txt")), "--data", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn help_lists_published_defaults() {
    let out = ok(&["train", "--help"]);
    for needle in ["544", "1e-4", "[published default: 5]", "--no-agdf"] {
        assert!(out.contains(needle), "{needle} missing from help");
    }
}
