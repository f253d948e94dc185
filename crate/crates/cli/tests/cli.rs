use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dunet")).args(args).env_remove("DUNET_THREADS").output().expect("spawn dunet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let out = dunet(args);
    assert_eq!(code(&out), 0, "{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn genshapes(dir: &Path, n: usize, seed: u64, split: bool) -> PathBuf {
    let out = dir.join(format!("shapes{n}_{seed}"));
    let (n, seed) = (n.to_string(), seed.to_string());
    let mut args = vec!["genshapes", "--n", &n, "--size", "64", "--seed", &seed, "--out", s(&out)];
    if split {
        args.push("--split");
    }
    ok(&args);
    out
}

fn write_config(dir: &Path, name: &str, dataset: &Path, train: &str) -> PathBuf {
    let path = dir.join(name);
    let body = format!(r#"{{ "dataset": {{ "root": "{}" }}, "train": {train} }}"#, s(dataset));
    fs::write(&path, body).unwrap();
    path
}

const SHORT_TRAIN: &str = r#"{ "batch_size": 4, "max_steps": 12, "checkpoint_every": 0, "seed": 3 }"#;

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&dunet(&["train", "--config", s(&missing)])), 2);
    assert_eq!(code(&dunet(&["genshapes", "--n", "0", "--out", s(&dir.path().join("g"))])), 2);
    assert_eq!(code(&dunet(&["streambench", "--bag", s(&dir.path().join("nobag")), "--oracle", "--latency-ms", "10"])), 2);
    assert_eq!(code(&dunet(&["frobnicate"])), 2);
    let bad_box = dunet(&["augment", "--synthetic-frames", "5", "--out", s(&dir.path().join("a"))]);
    assert_eq!(code(&bad_box), 0);
    let frames = dir.path().join("frames");
    fs::create_dir_all(&frames).unwrap();
    let mut ppm = b"P6\n40 30\n255\n".to_vec();
    ppm.resize(ppm.len() + 40 * 30 * 3, 0);
    fs::write(frames.join("000.ppm"), ppm).unwrap();
    let out = dunet(&["augment", "--source", s(&frames), "--box", "10,10,50,20", "--out", s(&dir.path().join("b"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside"));
    let out = Command::new(env!("CARGO_BIN_EXE_dunet"))
        .args(["genshapes", "--n", "1", "--out", s(&dir.path().join("g"))])
        .env("DUNET_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_round_trip_and_failure_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = genshapes(dir.path(), 24, 1, true);
    let cfg = write_config(dir.path(), "run.json", &data, SHORT_TRAIN);
    let (run_a, run_b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&run_a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&run_b)]);
    let ckpt = run_a.join("checkpoint.bin");
    assert!(ckpt.exists());
    let losses = fs::read_to_string(run_a.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 13);
    assert_eq!(losses, fs::read_to_string(run_b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(run_b.join("checkpoint.bin")).unwrap());
    assert!(run_a.join("config.json").exists());

    let (ev_all, ev_11) = (dir.path().join("eval_all"), dir.path().join("eval_11"));
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--split", "all", "--out", s(&ev_all)]);
    assert!(stdout.contains("mAP"));
    let csv = fs::read_to_string(ev_all.join("per_class.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "class,ap,tp,fp,fn");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("circle,") && rows[4].starts_with("mAP,"));
    ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--split", "all", "--ap-interp", "11point", "--out", s(&ev_11)]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev_all.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 24);

    // Damaged checkpoint.
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint at all").unwrap();
    assert_eq!(code(&dunet(&["eval", "--checkpoint", s(&bad), "--dataset", s(&data)])), 4);
    let mut truncated = fs::read(&ckpt).unwrap();
    truncated.truncate(truncated.len() / 2);
    fs::write(&bad, truncated).unwrap();
    assert_eq!(code(&dunet(&["eval", "--checkpoint", s(&bad), "--dataset", s(&data)])), 4);
    assert_eq!(code(&dunet(&["eval", "--checkpoint", s(&dir.path().join("absent.bin")), "--dataset", s(&data)])), 2);

    // A one-class dataset against the three-class checkpoint.
    let one = dir.path().join("one");
    ok(&["augment", "--synthetic-frames", "40", "--out", s(&one)]);
    assert_eq!(code(&dunet(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&one), "--split", "all"])), 4);

    let wild = write_config(dir.path(), "wild.json", &data, r#"{ "batch_size": 4, "max_steps": 50, "schedule": [[0, 1e6]], "checkpoint_every": 0 }"#);
    let diverged = dir.path().join("diverged");
    let out = dunet(&["train", "--config", s(&wild), "--out", s(&diverged)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!diverged.join("checkpoint.bin").exists());
}

#[test]
fn streambench_oracle_at_double_period() {
    let dir = tempfile::tempdir().unwrap();
    let data = genshapes(dir.path(), 150, 4, false);
    let bag = dir.path().join("bag");
    ok(&["makebag", "--dataset", s(&data), "--category", "square", "--out", s(&bag), "--period-ms", "40"]);
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(bag.join("stream.json")).unwrap()).unwrap();
    let n = spec["frames"].as_array().unwrap().len();
    assert!(n >= 10);
    let out = dir.path().join("bench");
    let stdout = ok(&["streambench", "--bag", s(&bag), "--oracle", "--latency-ms", "80", "--out", s(&out)]);
    assert!(stdout.contains(&format!("processed {}/{n}", n.div_ceil(2))), "{stdout}");
    assert!(stdout.contains("normalized-time 2.000"));
    let csv = fs::read_to_string(out.join("runs.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3], n.div_ceil(2).to_string());
    assert_eq!(row[9], "2.000000");
    for svg in ["scatter.svg", "bars.svg"] {
        roxmltree::Document::parse(&fs::read_to_string(out.join(svg)).unwrap()).unwrap();
    }
    let stdout = ok(&["streambench", "--bag", s(&bag), "--oracle", "--latency-ms", "0", "--out", s(&out)]);
    assert!(stdout.contains(&format!("processed {n}/{n} tp {n} fn 0 fp 0")), "{stdout}");
}

#[test]
fn augment_and_genshapes_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let stdout = ok(&["augment", "--synthetic-frames", "200", "--seed", "9", "--out", s(out)]);
        assert!(stdout.contains("samples written"));
    }
    let ann = fs::read_to_string(a.join("annotations.jsonl")).unwrap();
    assert!(ann.lines().count() >= 10);
    assert_eq!(ann, fs::read_to_string(b.join("annotations.jsonl")).unwrap());

    let x = genshapes(&dir.path().join("x"), 30, 5, true);
    let y = genshapes(&dir.path().join("y"), 30, 5, true);
    for f in ["annotations.jsonl", "splits.json", "frames/000029.ppm"] {
        assert_eq!(fs::read(x.join(f)).unwrap(), fs::read(y.join(f)).unwrap(), "{f}");
    }
}
