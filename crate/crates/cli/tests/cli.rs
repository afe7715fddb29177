use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nightseg::checkpoint;
use nightseg::image::{Image, LabelMap};
use nightseg::io::{read_rgb_png, write_label_png, write_rgb_png};
use nightseg::segnet::Params;
use nightseg::trainer::{TrainConfig, TrainState};
use serde_json::{json, Value};
use tempfile::TempDir;

fn nightseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nightseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nightseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A config small enough for a few seconds per command.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "max_iters": 4,
        "eval_every": 2,
        "pretrain_iters": 2,
        "seeds": [0, 1, 2],
        "world": { "height": 16, "width": 16, "train_size": 4, "eval_size": 3 }
    });
    let path = dir.join("tiny.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn count_pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

fn assert_manifest_lists_outputs(out: &Path) {
    let m = read_json(&out.join("run_manifest.json"));
    assert!(m["finished_unix"].is_u64());
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        assert!(out.join(o.as_str().unwrap()).exists(), "listed output {o} missing");
    }
}

#[test]
fn generate_writes_four_domains_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["generate", "--config", p(&cfg), "--out", p(out), "--seed", "7"]);
    }
    for (tag, n, labels) in [("S_d", 4, true), ("T_d", 4, false), ("T_n", 4, false), ("eval", 3, true)] {
        assert_eq!(count_pngs(&a.join(tag).join("images")), n, "{tag}");
        assert_eq!(a.join(tag).join("labels").is_dir(), labels, "{tag}");
    }
    let (ma, mb) = (fs::read(a.join("dataset.json")).unwrap(), fs::read(b.join("dataset.json")).unwrap());
    assert_eq!(ma, mb);
    assert_eq!(read_json(&a.join("dataset.json"))["world"]["data_seed"], 7);
    assert_eq!(
        fs::read(a.join("T_n/images/0002.png")).unwrap(),
        fs::read(b.join("T_n/images/0002.png")).unwrap()
    );
    assert_manifest_lists_outputs(&a);

    let c = tmp.path().join("c");
    ok(&["generate", "--config", p(&cfg), "--out", p(&c), "--seed", "8"]);
    assert_ne!(ma, fs::read(c.join("dataset.json")).unwrap());
}

#[test]
fn translate_onto_own_statistics_is_near_identity() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", p(&cfg), "--out", p(&data)]);
    let src = data.join("S_d/images");
    let out = tmp.path().join("same");
    ok(&["translate", p(&src), p(&src), "--out", p(&out)]);
    for i in 0..4 {
        let name = format!("{i:04}.png");
        let a = read_rgb_png(src.join(&name)).unwrap();
        let b = read_rgb_png(out.join(&name)).unwrap();
        let worst = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // Per-image statistics differ from the pooled ones, so only
        // approximately the identity; one PNG step is 1/255.
        assert!(worst < 0.25, "{name}: {worst}");
    }
    let stats = read_json(&out.join("stats.json"));
    assert_eq!(stats["count"], 4);
    let cf = stats["clamp_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cf));
    for c in 0..3 {
        let m = stats["matched_pre_clamp"]["mean"][c].as_f64().unwrap();
        let t = stats["target"]["mean"][c].as_f64().unwrap();
        assert!((m - t).abs() < 1e-6);
    }
    assert_manifest_lists_outputs(&out);

    // Day source onto night target lowers lightness. Street lights would
    // flood a 16x16 frame, so this world has none.
    let cfg = tmp.path().join("dark.json");
    let dark = json!({ "world": { "height": 16, "width": 16, "train_size": 4, "eval_size": 3, "night": { "random_lights": 0 } } });
    fs::write(&cfg, dark.to_string()).unwrap();
    let data = tmp.path().join("dark");
    ok(&["generate", "--config", p(&cfg), "--out", p(&data)]);
    let night = tmp.path().join("night");
    ok(&["translate", p(&data.join("S_d")), p(&data.join("T_n")), "--out", p(&night)]);
    let stats = read_json(&night.join("stats.json"));
    assert!(stats["output"]["mean"][0].as_f64().unwrap() < stats["source"]["mean"][0].as_f64().unwrap());
}

/// Night network that predicts class 1 on bright pixels and class 0 on
/// dark ones, through the centre tap of channel 0 of every layer.
fn brightness_oracle(cfg: &TrainConfig) -> TrainState {
    let mut state = TrainState::new(cfg, 0);
    let net = &mut state.models.m_n;
    for (_, t) in net.tensors_mut() {
        t.fill(0.0);
    }
    for conv in [&mut net.enc1, &mut net.enc2, &mut net.enc3, &mut net.dec1, &mut net.dec2] {
        let s = conv.shape;
        let centre = (s.kernel / 2) * s.kernel + s.kernel / 2;
        let inputs = if s.in_channels == 3 { 3 } else { 1 };
        for i in 0..inputs {
            conv.weight[i * s.kernel * s.kernel + centre] = 1.0;
        }
    }
    let in_ch = net.cls.shape.in_channels;
    net.cls.weight[in_ch] = 1.0; // class 1 reads channel 0
    net.cls.bias[0] = 0.5;
    state
}

#[test]
fn eval_of_perfect_oracle_is_one() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", p(&cfg_path), "--out", p(&data)]);
    let cfg: TrainConfig = serde_json::from_slice(&fs::read(&cfg_path).unwrap()).unwrap();
    let (h, w) = (cfg.world.height, cfg.world.width);
    for i in 0..3 {
        let name = format!("{i:04}.png");
        let class = (i % 2) as u8;
        let img = Image::filled(h, w, [class as f64; 3]).unwrap();
        write_rgb_png(&img, data.join("eval/images").join(&name)).unwrap();
        let lab = LabelMap::filled(h, w, cfg.world.num_classes, class).unwrap();
        write_label_png(&lab, data.join("eval/labels").join(&name)).unwrap();
    }
    let ckpt = tmp.path().join("oracle");
    checkpoint::save(&ckpt, &brightness_oracle(&cfg)).unwrap();
    let out = tmp.path().join("eval_out");
    let stdout = ok(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--out", p(&out)]);
    assert!(stdout.contains("mIoU 100.00%"), "{stdout}");
    assert_eq!(read_json(&out.join("eval.json"))["miou"], 1.0);
    assert_manifest_lists_outputs(&out);
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let full = tmp.path().join("full");
    ok(&["train", "--config", p(&cfg), "--out", p(&full), "--seed", "1", "--checkpoint-every", "2"]);
    assert!(full.join("checkpoints/iter_000002").is_dir());
    assert_manifest_lists_outputs(&full);

    let part = tmp.path().join("part");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&part),
        "--checkpoint",
        p(&full.join("checkpoints/iter_000002")),
    ]);
    let a = checkpoint::load(&full.join("final")).unwrap();
    let b = checkpoint::load(&part.join("final")).unwrap();
    assert_eq!(a.models, b.models);
    assert_eq!(a.iter, 4);
    assert_eq!(read_json(&full.join("summary.json"))["score"], read_json(&part.join("summary.json"))["score"]);
}

#[test]
fn gradcheck_passes_on_default_config() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gc");
    let stdout = ok(&["gradcheck", "--out", p(&out)]);
    assert!(stdout.contains("total"), "{stdout}");
    assert_eq!(read_json(&out.join("gradcheck.json"))["passed"], true);
}

#[test]
fn ablate_runs_every_variant_for_every_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("ablate");
    ok(&["ablate", "--config", p(&cfg), "--out", p(&out)]);
    let m = read_json(&out.join("run_manifest.json"));
    assert_eq!(m["runs"].as_array().unwrap().len(), 30);
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 30);
    for plot in ["plots/loss_components.png", "plots/miou.png"] {
        let bytes = fs::read(out.join(plot)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG", "{plot}");
    }
    assert_eq!(read_json(&out.join("report.json"))["rows"].as_array().unwrap().len(), 10);
    assert_manifest_lists_outputs(&out);
}

#[test]
fn ablate_subset_via_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("ablate");
    ok(&["ablate", "--config", p(&cfg), "--out", p(&out), "--seeds", "4", "--variant", "ours,baseline"]);
    let m = read_json(&out.join("run_manifest.json"));
    assert_eq!(m["seeds"], json!([4]));
    assert_eq!(m["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(nightseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nightseg(&["train"]).status.code(), Some(2));

    let missing = tmp.path().join("nope");
    let data = tmp.path().join("data");
    assert_eq!(
        nightseg(&["eval", "--checkpoint", p(&missing), "--dataset", p(&data)]).status.code(),
        Some(2)
    );

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"lamda1": 2.0}"#).unwrap();
    assert_eq!(nightseg(&["gradcheck", "--config", p(&bad)]).status.code(), Some(2));
    fs::write(&bad, r#"{"tau": 1.5}"#).unwrap();
    assert_eq!(nightseg(&["gradcheck", "--config", p(&bad)]).status.code(), Some(2));

    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("x");
    let r = nightseg(&["train", "--config", p(&cfg), "--out", p(&out), "--variant", "no_such_variant"]);
    assert_eq!(r.status.code(), Some(2));
}
