use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn san(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_san"))
        .args(args)
        .env("SAN_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, size: usize) {
    ok(&san(&["gen-data", "--out", p(dir), "--seed", "3", "--n", &n.to_string(), "--image-size", &size.to_string()]));
}

const TINY: &str = r#"{
  "model": {"image_size": 16, "backbone_channels": [2, 3, 4], "fusion_width": 3, "rrb_hidden": 2,
            "encoder_channels": [2, 3], "feature_dim": 4, "joint_dim": 5, "embed_dim": 3, "max_len": 16},
  "stage1": {"iterations": 3, "batch": 2},
  "stage2": {"epochs": 2, "batch": 4}
}"#;

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), 5, 16);
    gen(b.path(), 5, 16);
    for f in ["manifest.jsonl", "images/000003.ppm", "masks/000004.pgm"] {
        let (x, y) = (fs::read(a.path().join(f)), fs::read(b.path().join(f)));
        assert_eq!(x.unwrap(), y.unwrap(), "{f}");
    }
}

#[test]
fn missing_out_is_a_usage_error() {
    assert_eq!(san(&["gen-data"]).status.code(), Some(1));
    assert_eq!(san(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(san(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 16);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "learning_rate": 0.5}"#).unwrap();
    let out = san(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = san(&["train", "--data", p(&dir.path().join("none")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_retrieve_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 10, 16);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let common = ["--config", p(&cfg), "--data", p(&data), "--out", p(&run)];

    ok(&san(&[&["train", "--stage", "1"][..], &common].concat()));
    assert!(run.join("stage1.ckpt").exists());
    assert!(!run.join("stage2.ckpt").exists());
    let losses = fs::read_to_string(run.join("stage1_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 4);

    let stdout = ok(&san(&[&["train", "--stage", "2"][..], &common].concat()));
    assert!(stdout.contains("train R@1"));
    let log = fs::read_to_string(run.join("stage2_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,loss,val_sR@1,val_iR@1"));
    assert_eq!(log.lines().count(), 3);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["model"]["joint_dim"], 5);

    let ckpt = run.join("stage2.ckpt");
    let eval_dir = dir.path().join("eval");
    let eval = |out: &Path| {
        ok(&san(&[
            "eval", "--config", p(&cfg), "--data", p(&data), "--out", p(out), "--checkpoint", p(&ckpt), "--split", "all",
        ]));
        fs::read_to_string(out.join("report.csv")).unwrap()
    };
    let report = eval(&eval_dir);
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("variant,sR@1,sR@5,sR@10,iR@1,iR@5,iR@10,mR"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "FV+FT(G-S)");
    let vals: Vec<f64> = row[1..].iter().map(|v| v.parse().unwrap()).collect();
    assert!((vals[..6].iter().sum::<f64>() / 6.0 - vals[6]).abs() < 1e-6);
    assert_eq!(eval(&dir.path().join("eval2")), report);

    let hits = ok(&san(&[
        "retrieve", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&ckpt), "--query", "a red circle", "--top", "3",
    ]));
    assert_eq!(hits.lines().count(), 3);
    assert!(hits.lines().all(|l| l.split('\t').count() == 3));

    let att = dir.path().join("att");
    ok(&san(&[
        "export-attention", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&att), "--sample", "000002",
    ]));
    let av: Vec<f64> = fs::read_to_string(att.join("000002_av.csv"))
        .unwrap()
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect();
    assert_eq!(av.len(), 4);
    assert!((av.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(manifest.lines().nth(2).unwrap()).unwrap();
    let caption = rec["captions"][0].as_str().unwrap();
    let at = fs::read_to_string(att.join("000002_at.csv")).unwrap();
    assert_eq!(at.lines().count(), caption.split_whitespace().count());
    let at_sum: f64 = at.lines().map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((at_sum - 1.0).abs() < 1e-12);
    let pgm = fs::read(att.join("000002_saliency.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"), "{:?}", &pgm[..16]);
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);

    let bad = san(&[
        "eval", "--data", p(&data), "--out", p(&eval_dir), "--checkpoint", p(&ckpt), "--split", "all",
    ]);
    assert_eq!(bad.status.code(), Some(2), "default-sized model must not load a tiny checkpoint");
}

#[test]
fn untrained_model_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&san(&["gen-data", "--out", p(&data), "--seed", "8", "--n", "50", "--image-size", "16"]));
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY.replace("\"iterations\": 3", "\"iterations\": 0")).unwrap();
    let run = dir.path().join("run");
    ok(&san(&["train", "--stage", "1", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]));
    ok(&san(&[
        "eval", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--checkpoint", p(&run.join("stage1.ckpt")), "--split", "all",
    ]));
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    let vals: Vec<f64> = report.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    // Chance R@1 is 2/50 for sentences and 1/50 for images.
    assert!(vals[0] < 0.25 && vals[3] < 0.2, "{report}");
}

#[test]
fn gradcheck_command() {
    let out = san(&["gradcheck"]);
    let text = ok(&out);
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 7);

    let sta = ok(&san(&["gradcheck", "--module", "sta", "--coords", "0"]));
    assert!(sta.starts_with("sta "));
    assert_eq!(sta.lines().count(), 2);

    let broken = san(&["gradcheck", "--module", "text_path", "--inject-fault"]);
    assert_eq!(broken.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&broken.stdout).contains("FAIL"));

    assert_eq!(san(&["gradcheck", "--module", "nope"]).status.code(), Some(1));
}
