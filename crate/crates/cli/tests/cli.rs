use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmchange(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmchange"))
        .args(args)
        .env_remove("MMCHANGE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmchange(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mmchange(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 8] = [
    "--set",
    "widths=4,4,8,8",
    "--set",
    "batch_size=2",
    "--set",
    "text_dim=4",
    "--set",
    "vocab=64",
];

fn gen(dir: &Path, seed: &str, count: &str) {
    ok(&["gen-data", "--seed", seed, "--count", count, "--size", "32", "--out", s(dir)]);
}

fn train_tiny(data: &Path, out: &Path, steps: &str, extra: &[&str]) -> String {
    let stop = format!("stop_at={steps}");
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--set", &stop];
    args.extend(TINY);
    args.extend(extra);
    ok(&args)
}

#[test]
fn gen_data_is_deterministic_and_honours_the_seed_variable() {
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    gen(&a, "4", "2");
    gen(&b, "4", "2");
    for f in ["A/00000.png", "label/00001.png", "captions.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 2);
    assert_eq!(manifest["size"], 32);
    assert_eq!(manifest["seed"], 4);

    let out = Command::new(env!("CARGO_BIN_EXE_mmchange"))
        .args(["gen-data", "--count", "1", "--size", "32", "--out", s(&c)])
        .env("MMCHANGE_SEED", "4")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(a.join("A/00000.png")).unwrap(), fs::read(c.join("A/00000.png")).unwrap());

    let empty = root.path().join("empty");
    gen(&empty, "1", "0");
    assert!(empty.join("manifest.json").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["gen-data", "--out", "x"]), 2);
    assert_eq!(
        code(&["train", "--data", "d", "--out", "o", "--image-only", "--no-ifr"]),
        2,
        "conflicting ablation flags"
    );
    assert_eq!(code(&["gradcheck", "--module", "decoder"]), 2);
    assert_eq!(code(&["gradcheck", "--dims", "4x4"]), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = mmchange(&["train", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(code(&["gen-data", "--count", "1", "--size", "33", "--out", s(dir.path())]), 1);
    assert_eq!(code(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--set", "nope=1"]), 1);
}

#[test]
fn gradcheck_passes_for_tde_and_fails_above_threshold() {
    let out = ok(&["gradcheck", "--module", "tde"]);
    assert!(out.starts_with("PASS tde"), "{out}");
    assert_eq!(code(&["gradcheck", "--module", "softmax", "--threshold", "0"]), 1);
}

#[test]
fn train_resume_eval_predict_heatmap() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    gen(&data, "2", "3");

    train_tiny(&data, &run, "3", &[]);
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        assert_eq!(line.split('\t').count(), 3, "{line}");
    }
    let out = train_tiny(&data, &run, "5", &["--resume"]);
    assert!(out.contains("resuming at step 3"), "{out}");
    let steps: Vec<u64> = fs::read_to_string(run.join("train.log"))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5]);

    let ckpt = run.join("checkpoint.bin");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let text = fs::read_to_string(run.join("eval.txt")).unwrap();
    let f1_line = text.lines().find(|l| l.starts_with("F1")).unwrap();
    let f1_pct: f64 = f1_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((json["f1"].as_f64().unwrap() * 100.0 - f1_pct).abs() < 0.006);
    let c = &json["counts"];
    let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 3 * 32 * 32);

    let noisy = root.path().join("noisy");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--noise", "0.05", "--brightness", "0.2", "--contrast", "1.2", "--out", s(&noisy)]);
    assert!(noisy.join("eval.json").exists());

    let (a, b, label) = (data.join("A/00001.png"), data.join("B/00001.png"), data.join("label/00001.png"));
    let captions = data.join("captions.jsonl");
    let pred = root.path().join("pred");
    assert_eq!(
        code(&["predict", "--ckpt", s(&ckpt), "--a", s(&a), "--b", s(&b), "--out", s(&pred)]),
        1,
        "text checkpoint without captions"
    );
    ok(&["predict", "--ckpt", s(&ckpt), "--a", s(&a), "--b", s(&b), "--captions", s(&captions), "--label", s(&label), "--out", s(&pred)]);
    let mask = image::open(pred.join("00001_mask.png")).unwrap().to_luma8();
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
    let overlay = image::open(pred.join("00001_overlay.png")).unwrap().to_rgb8();
    let allowed = [[255, 255, 255], [0, 0, 0], [0, 0, 255], [255, 0, 0]];
    assert!(overlay.pixels().all(|p| allowed.contains(&p.0)));
    assert_eq!(overlay.dimensions(), (32, 32));

    let heat = root.path().join("heat");
    ok(&["heatmap", "--ckpt", s(&ckpt), "--a", s(&a), "--b", s(&b), "--caption-a", "a road", "--caption-b", "two buildings", "--out", s(&heat)]);
    let img = image::open(heat.join("00001_heatmap.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}

#[test]
fn image_only_training_needs_no_captions_and_has_no_heatmap() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    gen(&data, "3", "2");
    fs::remove_file(data.join("captions.jsonl")).unwrap();
    assert_eq!(
        code(&["train", "--data", s(&data), "--out", s(&run), "--set", "stop_at=1", "--set", "widths=4,4,8,8"]),
        1,
        "text model without captions"
    );
    train_tiny(&data, &run, "2", &["--image-only"]);
    let (a, b) = (data.join("A/00000.png"), data.join("B/00000.png"));
    let ckpt = run.join("checkpoint.bin");
    ok(&["predict", "--ckpt", s(&ckpt), "--a", s(&a), "--b", s(&b), "--out", s(&run)]);
    assert_eq!(code(&["heatmap", "--ckpt", s(&ckpt), "--a", s(&a), "--b", s(&b), "--out", s(&run)]), 1);
}

#[test]
fn ablate_writes_a_row_per_variant_and_seed() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let out = root.path().join("abl");
    gen(&data, "5", "3");
    let mut args = vec![
        "ablate", "--data", s(&data), "--out", s(&out), "--variants", "full,no-tde,image-only", "--seeds", "0,1",
        "--set", "stop_at=2", "--robustness",
    ];
    args.extend(TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("full >= no-tde on IoU in"), "{stdout}");
    let tsv = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[0].starts_with("variant\tseed\tiou"));
    for l in &lines[1..] {
        assert!(l.ends_with("\tok"), "{l}");
        assert_eq!(l.split('\t').count(), 10);
    }
    assert!(out.join("full-seed0").join("checkpoint.bin").exists());

    // Same seeds, same rows.
    let again = root.path().join("abl2");
    let mut args2 = args.clone();
    args2[4] = s(&again);
    ok(&args2);
    let first_full: Vec<&str> = lines.iter().filter(|l| l.starts_with("full\t")).copied().collect();
    let tsv2 = fs::read_to_string(again.join("ablation.tsv")).unwrap();
    let second_full: Vec<&str> = tsv2.lines().filter(|l| l.starts_with("full\t")).collect();
    assert_eq!(first_full, second_full);
}

#[test]
fn caption_reports_an_unreachable_endpoint() {
    let root = tempfile::tempdir().unwrap();
    gen(root.path(), "1", "1");
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}");
    let out = mmchange(&["caption", "--data", s(root.path()), "--endpoint", &endpoint, "--attempts", "1", "--out", s(&root.path().join("c.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("captioner"));
}
