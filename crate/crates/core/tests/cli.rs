use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vrdone::data::io::load_annotations;
use vrdone::metrics::files::{oracle_predictions, PredictionFile};
use vrdone::metrics::EvalReport;

fn vrdone(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrdone"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, toml: &str) -> PathBuf {
    let cfg = dir.join(format!("{name}.toml"));
    fs::write(&cfg, toml).unwrap();
    let out = dir.join(name);
    ok(&vrdone(&["synth", "--config", s(&cfg), "--out", s(&out)]));
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_and_prints_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a", "seed = 3\nnum_videos = 20\n");
    let b = synth(tmp.path(), "b", "seed = 3\nnum_videos = 20\n");
    let manifests = fs::read_dir(a.join("videos"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(manifests, 20);
    assert_eq!(files(&a), files(&b));

    let cfg = tmp.path().join("a.toml");
    let out = vrdone(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("c"))]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("left_of") && text.contains("short-lived"), "{text}");
}

#[test]
fn synth_into_unwritable_location_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = vrdone(&["synth", "--out", s(&blocker.join("sub"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn synth_rejects_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "num_videoz = 3\n").unwrap();
    let out = vrdone(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
}

fn eval_report(pred: &Path, gt: &Path, report: &Path) -> Output {
    vrdone(&["eval", "--pred", s(pred), "--gt", s(gt), "--report", s(report)])
}

#[test]
fn eval_perfect_empty_and_mismatched() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = synth(tmp.path(), "gt", "seed = 4\nnum_videos = 3\n");
    let videos = load_annotations(&gt).unwrap();
    let report = tmp.path().join("report.json");

    let perfect = tmp.path().join("perfect.json");
    PredictionFile::new(videos.iter().map(oracle_predictions).collect())
        .save(&perfect)
        .unwrap();
    let out = eval_report(&perfect, &gt, &report);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("R@50"));
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.reldet_map, 1.0);
    assert_eq!(r.reldet_r50, 1.0);
    assert_eq!(r.reldet_r100, 1.0);
    assert_eq!(r.reltag_p1, 1.0);

    let empty = tmp.path().join("empty.json");
    fs::write(&empty, "{\"version\": 1, \"videos\": []}").unwrap();
    ok(&eval_report(&empty, &gt, &report));
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.values(), [0.0; 6]);

    let partial = tmp.path().join("partial.json");
    PredictionFile::new(videos[1..].iter().map(oracle_predictions).collect())
        .save(&partial)
        .unwrap();
    let out = eval_report(&partial, &gt, &report);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&videos[0].video_id));

    let garbage = tmp.path().join("garbage.json");
    fs::write(&garbage, "{\"version\": 1, \"videos\": [{\"video_id\": 3}]}").unwrap();
    let out = eval_report(&garbage, &gt, &report);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("videos[0]"));
}

const TINY: &str = r#"
seed = 5
[model]
in_dim = 32
dim = 16
heads = 2
decoder_layers = 1
num_classes = 8
[optim]
lr = 1e-3
min_lr = 1e-4
warmup_steps = 2
[data]
train = "train"
max_len = 32
batch_size = 4
epochs = 2
max_steps = 6
[output]
dir = "run"
checkpoint_every = 1
log_every = 2
"#;

#[test]
fn train_infer_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "train", "seed = 6\nnum_videos = 4\n");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    ok(&vrdone(&["train", "--config", s(&cfg)]));

    let run = tmp.path().join("run");
    let ckpt = run.join("final");
    assert!(ckpt.join("weights.safetensors").is_file());
    assert!(ckpt.join("checkpoint.json").is_file());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        for key in ["loss", "cls", "focal", "dice", "lr"] {
            assert!(l[key].as_f64().unwrap().is_finite());
        }
    }
    assert_eq!(lines[0]["lr"].as_f64().unwrap(), 0.0);

    let data = tmp.path().join("train");
    let pred = tmp.path().join("pred.json");
    let pred2 = tmp.path().join("pred2.json");
    ok(&vrdone(&["infer", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&pred)]));
    ok(&vrdone(&["infer", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&pred2)]));
    assert_eq!(fs::read(&pred).unwrap(), fs::read(&pred2).unwrap());

    let file = PredictionFile::load(&pred).unwrap();
    assert_eq!(file.videos.len(), 4);
    for v in &file.videos {
        assert!(v.relations.len() <= 200);
        for r in &v.relations {
            assert_eq!(r.begin % v.sample_stride, 0);
            assert!(r.begin <= r.end);
            assert!(v.tracklets.iter().any(|t| t.entity_id == r.subject_id));
        }
    }

    let capped = tmp.path().join("capped.json");
    ok(&vrdone(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&capped),
        "--topk-predicates",
        "2",
        "--topk-video",
        "5",
    ]));
    let capped = PredictionFile::load(&capped).unwrap();
    assert!(capped.videos.iter().all(|v| v.relations.len() <= 5));

    let report = tmp.path().join("report.json");
    ok(&eval_report(&pred, &data, &report));
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.values().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(r.reldet_r100 >= r.reldet_r50);

    let bad = vrdone(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("never.json")),
        "--topk-predicates",
        "99",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn train_rejects_invalid_config_before_doing_anything() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "train", "seed = 7\nnum_videos = 2\n");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TINY.replace("lr = 1e-3", "lr = -1.0")).unwrap();
    let out = vrdone(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
    assert!(!tmp.path().join("run").exists());

    fs::write(&cfg, TINY.replace("heads = 2", "heads = 3")).unwrap();
    assert!(!vrdone(&["train", "--config", s(&cfg)]).status.success());
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn train_rejects_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir_all(tmp.path().join("train/videos")).unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = vrdone(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vrdone(&[
        "infer",
        "--ckpt",
        s(&tmp.path().join("nope")),
        "--data",
        s(tmp.path()),
        "--out",
        s(&tmp.path().join("p.json")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn resume_from_periodic_checkpoint_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "train", "seed = 8\nnum_videos = 4\n");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TINY.replace("max_steps = 6", "max_steps = 9")).unwrap();
    ok(&vrdone(&["train", "--config", s(&cfg)]));
    let run = tmp.path().join("run");
    let full = fs::read(run.join("final/weights.safetensors")).unwrap();
    let mid = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("ckpt-"))
        .min()
        .expect("a periodic checkpoint");
    fs::remove_dir_all(run.join("final")).unwrap();
    ok(&vrdone(&["train", "--config", s(&cfg), "--resume", s(&mid)]));
    assert_eq!(fs::read(run.join("final/weights.safetensors")).unwrap(), full);
}
