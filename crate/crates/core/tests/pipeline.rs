mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use tileforge::config::{read_slides_csv, write_slides_csv, PipelineConfig};
use tileforge::nn::{save_checkpoint, ModelState};
use tileforge::pipeline::{cmd_synth, synthetic_config, InferTarget, Outcome, Pipeline, PipelineError, Run, RunOptions};
use tileforge::synth::SynthConfig;
use tileforge::ClassLabel;

fn small_corpus(dir: &Path, per_class: usize) -> PathBuf {
    let synth = SynthConfig {
        slides_per_class: per_class,
        width: 512,
        height: 512,
        levels: 2,
        tiff_tile: 128,
        ..SynthConfig::default()
    };
    cmd_synth(dir, &synth, &common::quiet()).unwrap().done().unwrap().config_path
}

fn pipeline(config: &Path) -> Pipeline {
    Pipeline::from_file(config, common::quiet()).unwrap()
}

fn with_config(config: &Path, edit: impl FnOnce(&mut PipelineConfig), opts: RunOptions) -> Pipeline {
    let mut cfg = PipelineConfig::load(config).unwrap();
    edit(&mut cfg);
    Pipeline::new(cfg, opts).unwrap()
}

fn read_store(dir: &Path) -> Vec<Vec<u8>> {
    ["slide.json", "tiles.jsonl", "tiles.bin"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn two_slides_give_two_stores() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(&small_corpus(dir.path(), 1));
    let out = p.tile().unwrap().done().unwrap();
    assert_eq!(out.slides.len(), 2);
    assert!(out.total_kept() > 0);
    assert!(out.summary().contains(&format!("{} tiles kept", out.total_kept())));
    assert_eq!(out.exit_code(), 0);
    for s in &out.slides {
        assert!(p.store_dir(&s.slide_id).join("tiles.bin").exists());
    }
}

#[test]
fn corrupt_slide_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_corpus(dir.path(), 1);
    let slides = read_slides_csv(dir.path().join("slides.csv")).unwrap();
    std::fs::write(&slides[1].slide_path, b"II*\0 definitely not a slide").unwrap();
    let p = pipeline(&config);
    let out = p.tile().unwrap().done().unwrap();
    assert_eq!(out.exit_code(), 2);
    assert_eq!(out.slides.len(), 1);
    assert_eq!(out.failed.len(), 1);
    assert_eq!(out.failed[0].0, slides[1].slide_id);
    assert!(p.store_dir(&slides[0].slide_id).exists());
    assert!(!p.store_dir(&slides[1].slide_id).exists());
}

#[test]
fn retiling_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(&small_corpus(dir.path(), 1));
    p.tile().unwrap();
    let id = "SYN-P000";
    let first = read_store(&p.store_dir(id));
    p.tile().unwrap();
    assert_eq!(read_store(&p.store_dir(id)), first);
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_corpus(dir.path(), 1);
    let p = Pipeline::from_file(
        &config,
        RunOptions {
            dry_run: true,
            ..common::quiet()
        },
    )
    .unwrap();
    let plan = p.tile().unwrap();
    assert!(matches!(&plan, Run::Planned(steps) if steps.len() == 3));
    assert!(plan.summary().starts_with("dry run"));
    assert!(!p.cfg.paths.tile_store.exists());
    assert!(!p.run_dir().exists());
}

#[test]
fn curation_holds_out_slides_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_corpus(dir.path(), 3);
    let opts = common::quiet;
    let p = with_config(&config, |c| c.dataset.heldout_per_class = 1, opts());
    p.tile().unwrap();
    let out = p.curate().unwrap().done().unwrap();
    let m = &out.manifest;
    assert_eq!(m.provenance.heldout_slides.len(), 2);
    assert!(out.manifest_path.exists());
    let heldout = m.slides_in(tileforge::dataset::Split::HeldoutWsi);
    for e in &m.entries {
        let is_heldout = heldout.contains(&e.slide_id);
        assert_eq!(is_heldout, e.split == tileforge::dataset::Split::HeldoutWsi);
    }
    // a different seed still gives a valid, but different, manifest
    let q = with_config(&config, |c| c.dataset.heldout_per_class = 1, RunOptions { seed: Some(99), ..opts() });
    let other = q.curate().unwrap().done().unwrap();
    assert_ne!(other.manifest.entries, m.entries);
    assert_eq!(other.manifest.provenance.heldout_slides.len(), 2);
    assert_ne!(q.run_dir(), p.run_dir());
}

#[test]
fn single_class_corpus_fails_curation() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_corpus(dir.path(), 2);
    let listing = dir.path().join("slides.csv");
    let only_p: Vec<_> = read_slides_csv(&listing)
        .unwrap()
        .into_iter()
        .filter(|s| s.label == ClassLabel::Progressor)
        .collect();
    write_slides_csv(&listing, &only_p).unwrap();
    let p = with_config(
        &config,
        |c| {
            c.dataset.heldout_per_class = 1;
            c.paths.patients = None;
        },
        common::quiet(),
    );
    p.tile().unwrap();
    let err = p.curate().unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn eval_without_checkpoint_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(&small_corpus(dir.path(), 1));
    let err = p.eval().unwrap_err();
    assert_eq!(err.exit_code(), 5);
    assert!(matches!(&err, PipelineError::Missing { what: "checkpoint", .. }));
    assert!(err.to_string().contains("checkpoint.tfck"), "{err}");
}

fn untrained_checkpoint(p: &Pipeline, dir: &Path) -> PathBuf {
    let path = dir.join("untrained.tfck");
    save_checkpoint(&ModelState::<f32>::new(p.cfg.model.clone(), 1).unwrap(), &path).unwrap();
    path
}

#[test]
fn gradcam_on_one_tile_writes_png_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_corpus(dir.path(), 1);
    let p = pipeline(&config);
    p.tile().unwrap();
    let ckpt = untrained_checkpoint(&p, dir.path());
    let p = with_config(&config, |_| {}, RunOptions { checkpoint: Some(ckpt), ..common::quiet() });
    let store = tileforge::tiler::TileStore::open(p.store_dir("SYN-N000")).unwrap();
    let first = store.kept().next().unwrap();
    let out = p
        .gradcam("SYN-N000", &[(first.grid_x, first.grid_y)])
        .unwrap()
        .done()
        .unwrap();
    assert_eq!(out.files.len(), 1);
    let (png, json) = &out.files[0];
    let img = tileforge::report::read_png(png).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    assert_eq!(sidecar["map"]["width"], 2);
    let files = std::fs::read_dir(png.parent().unwrap()).unwrap().count();
    assert_eq!(files, 2);
    // a tile that was never kept is an error with its own exit code
    let err = p.gradcam("SYN-N000", &[(99, 99)]).unwrap_err();
    assert_eq!(err.exit_code(), 7);
}

#[test]
fn infer_scores_an_unlisted_slide_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_corpus(dir.path(), 1);
    let p = pipeline(&config);
    let ckpt = untrained_checkpoint(&p, dir.path());
    let p = with_config(&config, |_| {}, RunOptions { checkpoint: Some(ckpt), ..common::quiet() });
    let listing = read_slides_csv(dir.path().join("slides.csv")).unwrap();
    let target = InferTarget::File {
        slide: listing[0].slide_path.clone(),
        annotations: listing[0].annotation_path.clone(),
    };
    let out = p.infer(&target).unwrap().done().unwrap();
    assert_eq!(out.report.slide_id, "SYN-P000");
    assert!((0.0..=1.0).contains(&out.report.mean_prob));
    let slide_dir = out.dir.join("slides").join("SYN-P000");
    for f in ["report.json", "histogram.csv", "heatmap.png"] {
        assert!(slide_dir.join(f).exists(), "{f}");
    }
    let err = p.infer(&InferTarget::Listed("nope".into())).unwrap_err();
    assert_eq!(err.exit_code(), 6);
}

#[test]
fn synthetic_config_is_valid() {
    assert!(synthetic_config(3).validate().is_ok());
}

#[test]
fn binary_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_tileforge");
    let out = Command::new(exe)
        .args(["synth", "--out"])
        .arg(dir.path())
        .args(["--slides-per-class", "1", "--size", "256", "--dry-run"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("dry run"));
    assert!(!dir.path().join("slides.csv").exists());

    let out = Command::new(exe)
        .args(["synth", "--quiet", "--slides-per-class", "1", "--size", "512", "--out"])
        .arg(dir.path())
        .env("TILEFORGE_JOBS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = dir.path().join("config.json");
    let out = Command::new(exe).arg("eval").arg("--config").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    let out = Command::new(exe).args(["tile", "--config"]).arg(&config).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("tiles kept"));
    // JSON log lines on stderr
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().next().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["stage"], "tile");

    let out = Command::new(exe).args(["curate", "--config", "missing.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
