use std::path::Path;
use std::process::Command;

use mtif::checkpoint;
use mtif::config_file::RunConfig;
use mtif::dataset::LoadedPair;
use mtif::descriptions::save_description_cache;
use mtif::infer::fuse_pair;
use mtif::io::{load_image, save_image};
use mtif::trainer::{new_state, train, TrainOptions, LAST_CHECKPOINT, LOG_FILE};
use mtif::HarnessError;
use mtif_core::text::{encode_text, GrainedDescriptions, TextEncoderProvider, TextFeatureSet};
use mtif_core::{ColorSpace, Config, Image, ImagePair, Task};

fn small_cfg() -> RunConfig {
    let mut cfg = Config::desk(Task::Mff);
    cfg.channel_widths = vec![4, 8, 8];
    cfg.embed_dim = 8;
    cfg.text_native_dim = 8;
    cfg.epochs = 1;
    RunConfig::new(cfg)
}

fn img(h: usize, w: usize, phase: f64) -> Image {
    Image::from_fn(h, w, ColorSpace::Rgb, |y, x, c| 0.5 + 0.3 * ((y as f64) * 0.3 + (x as f64) * 0.2 + phase + c as f64).sin()).unwrap()
}

fn desc() -> GrainedDescriptions {
    GrainedDescriptions::new("sharp leaves", "a flower before a wall", "a garden").unwrap()
}

fn texts(d: &GrainedDescriptions, seed: u64) -> TextFeatureSet {
    encode_text(d, &TextEncoderProvider::Stub { dim: 8, seed }).unwrap()
}

fn loaded(id: &str, h: usize, w: usize) -> LoadedPair {
    let d = desc();
    LoadedPair {
        id: id.into(),
        pair: ImagePair::new(img(h, w, 0.0), img(h, w, 1.3)).unwrap(),
        texts: texts(&d, 0),
        descriptions: d,
        saliency: None,
    }
}

#[test]
fn fuse_pair_keeps_size_and_is_deterministic() {
    let state = new_state(small_cfg()).unwrap();
    let p = ImagePair::new(img(65, 67, 0.0), img(65, 67, 2.0)).unwrap();
    let t = texts(&desc(), 0);
    let f1 = fuse_pair(&state.model, &p, &t).unwrap();
    let f2 = fuse_pair(&state.model, &p, &t).unwrap();
    assert_eq!((f1.height(), f1.width()), (65, 67));
    assert_eq!(f1, f2);
    // Untrained modulation strengths are zero, so the text cannot matter.
    let other = GrainedDescriptions::new("blur", "nothing at all", "fog").unwrap();
    assert_eq!(f1, fuse_pair(&state.model, &p, &texts(&other, 4)).unwrap());

    let gray = ImagePair::new(img(32, 32, 0.0).to_grayscale(), img(32, 32, 1.0).to_grayscale()).unwrap();
    assert_eq!(fuse_pair(&state.model, &gray, &t).unwrap().color(), ColorSpace::Gray);
}

#[test]
fn training_logs_each_step_and_checkpoints_each_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg();
    cfg.model.epochs = 2;
    cfg.model.ablation.use_ve = false;
    let pairs = [loaded("p0", 40, 40), loaded("p1", 40, 40), loaded("p2", 40, 40)];
    let state = train(new_state(cfg).unwrap(), &pairs, &pairs[..1], &TrainOptions::new(dir.path())).unwrap();
    assert_eq!(state.progress.step, 4);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["total"].is_number() && l["feat_total"].is_number()));
    for e in 1..=2 {
        assert!(dir.path().join(format!("epoch{e:04}.mtif")).is_file());
    }
    let back = checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(back.progress, state.progress);
    assert_eq!(back.model.params.tensors(), state.model.params.tensors());
    assert!(!dir.path().join(mtif::trainer::VAL_FILE).exists(), "validation runs every 5 epochs by default");
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = new_state(small_cfg()).unwrap();
    state.model.params.get_mut("head.out.w").unwrap().data_mut()[0] = f32::NAN;
    let mut opts = TrainOptions::new(dir.path());
    opts.epoch_checkpoints = false;
    match train(state, &[loaded("bad", 64, 64)], &[], &opts) {
        Err(HarnessError::Core(mtif_core::Error::NonFinite(_))) => {}
        other => panic!("{:?}", other.map(|s| s.progress.step)),
    }
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("nonfinite_step0.json")).unwrap()).unwrap();
    assert_eq!(dump["pairs"][0], "bad");
    // The snapshot holds the offending parameters, so loading it names them.
    let err = checkpoint::load(&dir.path().join("nonfinite_step0.mtif")).unwrap_err();
    assert!(err.to_string().contains("head.out.w"), "{err}");
}

fn write_pair(root: &Path, id: &str) {
    let dir = root.join(id);
    save_image(&dir.join("a.png"), &img(64, 64, 0.0)).unwrap();
    save_image(&dir.join("b.png"), &img(64, 64, 1.1)).unwrap();
    save_description_cache(&dir.join(format!("{id}.text.json")), &desc()).unwrap();
}

fn mtif(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mtif")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    write_pair(&data.join("train"), "t0");
    write_pair(&data.join("test"), "v0");

    let out = mtif(&["enrich", "--input-dir", &s(&data.join("train")), "--out-dir", &s(&root.join("crops")), "--crop-size", "32"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("crops/t0/v4_a.png").is_file());
    assert!(root.join("crops/manifest.json").is_file());

    let out = mtif(&["describe", "--pairs-dir", &s(&data.join("train")), "--check"]);
    assert!(out.status.success());
    std::fs::write(data.join("train/t0/t0.text.json"), r#"{"detail":"x"}"#).unwrap();
    assert!(!mtif(&["describe", "--pairs-dir", &s(&data.join("train")), "--check"]).status.success());
    save_description_cache(&data.join("train/t0/t0.text.json"), &desc()).unwrap();

    let config = root.join("run.toml");
    std::fs::write(&config, "task = \"MFF\"\npreset = \"desk\"\nepochs = 1\nchannel_widths = [4, 8, 8]\nembed_dim = 8\ntext_native_dim = 8\n").unwrap();
    let out = mtif(&["train", "--config", &s(&config), "--data", &s(&data), "--out", &s(&root.join("run"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = root.join("run").join(LAST_CHECKPOINT);
    assert!(ckpt.is_file());

    let v0 = data.join("test/v0");
    let fused = root.join("fused/v0.png");
    let out = mtif(&[
        "fuse", "--ckpt", &s(&ckpt), "--a", &s(&v0.join("a.png")), "--b", &s(&v0.join("b.png")),
        "--text", &s(&v0.join("v0.text.json")), "--out", &s(&fused), "--config", &s(&config),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(load_image(&fused).unwrap().height(), 64);

    let wide = root.join("wide.toml");
    std::fs::write(&wide, "task = \"MFF\"\npreset = \"desk\"\n").unwrap();
    let out = mtif(&[
        "fuse", "--ckpt", &s(&ckpt), "--a", &s(&v0.join("a.png")), "--b", &s(&v0.join("b.png")),
        "--text", &s(&v0.join("v0.text.json")), "--out", &s(&fused), "--config", &s(&wide),
    ]);
    assert!(!out.status.success(), "architecture mismatch must fail to load");

    let report = root.join("report.csv");
    let out = mtif(&["eval", "--fused", &s(&root.join("fused")), "--data", &s(&data), "--report", &s(&report), "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(root.join("report.json").is_file());
}
