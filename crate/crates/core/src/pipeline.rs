//! Subcommand orchestration: one declarative config drives tiling,
//! curation, training, evaluation, inference and Grad-CAM rendering.
//!
//! Artifacts live under two roots. Tile stores go to
//! `paths.tile_store/<slide_id>/`; everything that depends on the full
//! experiment goes to the run directory (`paths.run_dir/<digest prefix>/`):
//! `config.json`, `manifest.jsonl`, `checkpoint.tfck`, `history.csv`,
//! `eval/`, `infer/` and `gradcam/`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::config::{read_slides_csv, ConfigError, PipelineConfig, SlideEntry};
use crate::dataset::{
    balance_undersample, filter_with_model, holdout_slides, read_manifest, read_patients_csv, stratified_split_with,
    write_manifest, DatasetManifest, Split,
};
use crate::gradcam::{gradcam, overlay};
use crate::inference::{heatmap_grid, infer_slide, SlideReport};
use crate::metrics::{confusion, roc_auc, scores, RocCurve};
use crate::nn::{
    load_checkpoint, predict, read_checkpoint_spec, save_checkpoint, train_until, ModelState, TileSet,
};
use crate::report::{
    commit_files, encode_png, slide_files, write_atomic, write_eval_report, EvalReport, SlideOutcome, TileLevel,
    Timestamps,
};
use crate::slide_io::{load_annotations, open_slide, AnnotationSet, SlideImage};
use crate::synth::{synth_corpus, SynthConfig};
use crate::tiler::{
    extract_all, grid_dims, resize_bilinear, write_store, ClassLabel, Raster, SlideInfo, SlideLabel, TileRecord,
    TileStore,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.tfck";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Tile,
    Curate,
    Train,
    Eval,
    Infer,
    GradCam,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Tile => "tile",
            Stage::Curate => "curate",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Infer => "infer",
            Stage::GradCam => "gradcam",
        }
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Synth => 1,
            Stage::Tile => 2,
            Stage::Curate => 3,
            Stage::Train => 4,
            Stage::Eval => 5,
            Stage::Infer => 6,
            Stage::GradCam => 7,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: {what} not found: {path}")]
    Missing {
        stage: Stage,
        what: &'static str,
        path: PathBuf,
    },
    #[error("{stage}: {source}")]
    Failed {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Missing { stage, .. } | PipelineError::Failed { stage, .. } => stage.exit_code(),
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn fail<E: Into<Box<dyn std::error::Error + Send + Sync>>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Failed {
        stage,
        source: e.into(),
    }
}

fn require(stage: Stage, what: &'static str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing {
            stage,
            what,
            path: path.to_path_buf(),
        })
    }
}

/// Run-scoped overrides; everything else comes from the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for every parallel stage; `None` uses all cores.
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    /// Checkpoint for eval, infer and gradcam instead of the run's own.
    pub checkpoint: Option<PathBuf>,
    pub dry_run: bool,
    /// Suppresses the JSON log lines on stderr.
    pub quiet: bool,
}

/// Either the plan a dry run would execute, or the finished result.
#[derive(Debug, Clone, PartialEq)]
pub enum Run<T> {
    Planned(Vec<String>),
    Done(T),
}

impl<T> Run<T> {
    pub fn done(self) -> Option<T> {
        match self {
            Run::Done(t) => Some(t),
            Run::Planned(_) => None,
        }
    }
}

/// Human summary and exit status of a finished command.
pub trait Outcome {
    fn summary(&self) -> String;
    fn exit_code(&self) -> i32 {
        0
    }
}

impl<T: Outcome> Outcome for Run<T> {
    fn summary(&self) -> String {
        match self {
            Run::Planned(steps) => {
                let mut s = String::from("dry run, nothing written:\n");
                for step in steps {
                    s.push_str("  - ");
                    s.push_str(step);
                    s.push('\n');
                }
                s
            }
            Run::Done(t) => t.summary(),
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            Run::Planned(_) => 0,
            Run::Done(t) => t.exit_code(),
        }
    }
}

/// Structured log lines on stderr.
#[derive(Debug, Clone, Copy)]
struct Log {
    enabled: bool,
}

impl Log {
    fn event(&self, stage: Stage, event: &str, fields: serde_json::Value) {
        if !self.enabled {
            return;
        }
        let mut line = json!({ "ts": Timestamps::now(), "stage": stage.name(), "event": event });
        if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
            obj.extend(extra);
        }
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{line}");
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthOutcome {
    pub dir: PathBuf,
    pub slides: usize,
    pub config_path: PathBuf,
}

impl Outcome for SynthOutcome {
    fn summary(&self) -> String {
        format!(
            "synthesized {} slides in {}\nconfig: {}\n",
            self.slides,
            self.dir.display(),
            self.config_path.display()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlideTiling {
    pub slide_id: String,
    pub kept: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileOutcome {
    pub slides: Vec<SlideTiling>,
    /// `(slide_id, error message)` for every slide that could not be tiled.
    pub failed: Vec<(String, String)>,
}

impl TileOutcome {
    pub fn total_kept(&self) -> usize {
        self.slides.iter().map(|s| s.kept).sum()
    }
}

impl Outcome for TileOutcome {
    fn summary(&self) -> String {
        let mut s = format!(
            "tiled {} slides, {} tiles kept, {} failed\n",
            self.slides.len(),
            self.total_kept(),
            self.failed.len()
        );
        for (id, msg) in &self.failed {
            s.push_str(&format!("  failed {id}: {msg}\n"));
        }
        s
    }

    fn exit_code(&self) -> i32 {
        if self.failed.is_empty() {
            0
        } else {
            Stage::Tile.exit_code()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurateOutcome {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    /// Listed slides without a tile store; they are left out of the manifest.
    pub missing_stores: Vec<String>,
}

impl Outcome for CurateOutcome {
    fn summary(&self) -> String {
        let p = &self.manifest.provenance;
        let mut s = format!("manifest: {}\n", self.manifest_path.display());
        s.push_str(&format!(
            "curated tiles: {} progressor / {} non-progressor\n",
            p.curated.progressor, p.curated.non_progressor
        ));
        s.push_str(&format!(
            "held-out slides: {} ({} tiles)\n",
            p.heldout_slides.len(),
            p.heldout_tiles.total()
        ));
        s.push_str(&format!(
            "balanced {} / {} -> {} / {}\n",
            p.pre_balance.progressor, p.pre_balance.non_progressor, p.post_balance.progressor, p.post_balance.non_progressor
        ));
        if p.roi_model_discarded > 0 {
            s.push_str(&format!("discarded by ROI model: {}\n", p.roi_model_discarded));
        }
        for split in [Split::Train, Split::Val, Split::Test, Split::Discarded] {
            s.push_str(&format!("{split:?}: {}\n", self.manifest.split_count(split)));
        }
        for id in &self.missing_stores {
            s.push_str(&format!("  no tile store for {id}, skipped\n"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub checkpoint: PathBuf,
    pub epochs_run: u32,
    pub best_epoch: Option<u32>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub final_val_accuracy: Option<f64>,
}

impl Outcome for TrainRun {
    fn summary(&self) -> String {
        let mut s = format!("checkpoint: {}\n", self.checkpoint.display());
        s.push_str(&format!("epochs: {}", self.epochs_run));
        if self.stopped_early {
            s.push_str(" (stopped early)");
        }
        s.push('\n');
        if let (Some(e), Some(l)) = (self.best_epoch, self.best_val_loss) {
            s.push_str(&format!("best epoch {e}: val loss {l:.5}\n"));
        }
        if let Some(a) = self.final_val_accuracy {
            s.push_str(&format!("val accuracy of saved weights: {a:.4}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub roc: Option<RocCurve>,
}

impl Outcome for EvalOutcome {
    fn summary(&self) -> String {
        format!("{}\nwritten to {}\n", crate::report::summary_text(&self.report), self.dir.display())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutcome {
    pub dir: PathBuf,
    pub report: SlideReport,
}

impl Outcome for InferOutcome {
    fn summary(&self) -> String {
        let r = &self.report;
        format!(
            "{}: {} tiles, mean p = {:.4}, decision {:?} (threshold {})\nwritten to {}\n",
            r.slide_id,
            r.tiles.len(),
            r.mean_prob,
            r.decision,
            r.threshold,
            self.dir.display()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCamOutcome {
    /// `(png, json sidecar)` per tile.
    pub files: Vec<(PathBuf, PathBuf)>,
}

impl Outcome for GradCamOutcome {
    fn summary(&self) -> String {
        let mut s = format!("{} Grad-CAM overlays\n", self.files.len());
        for (png, _) in &self.files {
            s.push_str(&format!("  {}\n", png.display()));
        }
        s
    }
}

/// What `infer` should score.
#[derive(Debug, Clone, PartialEq)]
pub enum InferTarget {
    /// A slide from the listing; its tile store is reused when present.
    Listed(String),
    /// Any slide container, tiled on the fly.
    File {
        slide: PathBuf,
        annotations: Option<PathBuf>,
    },
}

/// Generates the synthetic corpus plus a ready-to-run `config.json` at the
/// reduced 64-pixel input size.
pub fn cmd_synth(dir: &Path, synth: &SynthConfig, opts: &RunOptions) -> Result<Run<SynthOutcome>> {
    let n = synth.slides_per_class * 2;
    if opts.dry_run {
        return Ok(Run::Planned(vec![format!(
            "write {n} slides of {}x{} with annotations, slides.csv, patients.csv and config.json to {}",
            synth.width,
            synth.height,
            dir.display()
        )]));
    }
    let log = Log { enabled: !opts.quiet };
    let synth = SynthConfig {
        seed: opts.seed.unwrap_or(synth.seed),
        ..synth.clone()
    };
    let corpus = with_pool(opts.jobs, || synth_corpus(dir, &synth)).map_err(fail(Stage::Synth))?;
    log.event(Stage::Synth, "corpus", json!({ "dir": dir, "slides": corpus.slides.len() }));
    let cfg = synthetic_config(synth.seed);
    let config_path = dir.join("config.json");
    write_atomic(&config_path, cfg.to_json().as_bytes()).map_err(fail(Stage::Synth))?;
    Ok(Run::Done(SynthOutcome {
        dir: dir.to_path_buf(),
        slides: corpus.slides.len(),
        config_path,
    }))
}

/// Pipeline settings matched to the synthetic corpus: 128-pixel raw tiles
/// reduced to 64-pixel inputs for a small network.
pub fn synthetic_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.paths.patients = Some("patients.csv".into());
    cfg.tiler.tile_size = 128;
    cfg.tiler.out_size = 64;
    cfg.model = crate::nn::ModelSpec::square(64, 8, 4);
    cfg.report.heatmap_cell_px = 8;
    cfg
}

fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

/// A validated config with run-scoped overrides applied.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub opts: RunOptions,
    log: Log,
}

impl Pipeline {
    pub fn new(mut cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        if let Some(seed) = opts.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        let log = Log { enabled: !opts.quiet };
        Ok(Pipeline { cfg, opts, log })
    }

    pub fn from_file(path: impl AsRef<Path>, opts: RunOptions) -> Result<Self> {
        Pipeline::new(PipelineConfig::load(path)?, opts)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.cfg.run_path()
    }

    pub fn store_dir(&self, slide_id: &str) -> PathBuf {
        self.cfg.paths.tile_store.join(slide_id)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir().join(MANIFEST_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.opts
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.run_dir().join(CHECKPOINT_FILE))
    }

    fn listing(&self, stage: Stage) -> Result<Vec<SlideEntry>> {
        require(stage, "slide listing", &self.cfg.paths.slides)?;
        Ok(read_slides_csv(&self.cfg.paths.slides)?)
    }

    fn write_run_config(&self, stage: Stage) -> Result<()> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir).map_err(fail(stage))?;
        write_atomic(&dir.join("config.json"), self.cfg.to_json().as_bytes()).map_err(fail(stage))
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        with_pool(self.opts.jobs, f)
    }

    /// Tiles every listed slide into its own store.
    pub fn tile(&self) -> Result<Run<TileOutcome>> {
        let slides = self.listing(Stage::Tile)?;
        if self.opts.dry_run {
            let mut plan = vec![format!(
                "tile {} slides at {} px -> {} px (roi_min {}, exclude_max {})",
                slides.len(),
                self.cfg.tiler.tile_size,
                self.cfg.tiler.out_size,
                self.cfg.tiler.roi_min,
                self.cfg.tiler.exclude_max
            )];
            plan.extend(slides.iter().map(|s| format!("{} -> {}", s.slide_path.display(), self.store_dir(&s.slide_id).display())));
            return Ok(Run::Planned(plan));
        }
        let mut out = TileOutcome {
            slides: Vec::new(),
            failed: Vec::new(),
        };
        for entry in &slides {
            match self.tile_one(entry, &self.store_dir(&entry.slide_id)) {
                Ok(t) => {
                    self.log.event(Stage::Tile, "slide", json!({ "slide_id": t.slide_id, "kept": t.kept, "rejected": t.rejected }));
                    out.slides.push(t);
                }
                Err(e) => {
                    self.log.event(Stage::Tile, "slide_failed", json!({ "slide_id": entry.slide_id, "error": e }));
                    out.failed.push((entry.slide_id.clone(), e));
                }
            }
        }
        if out.slides.is_empty() && !out.failed.is_empty() {
            return Err(PipelineError::Failed {
                stage: Stage::Tile,
                source: format!("no slide could be tiled; first error: {}", out.failed[0].1).into(),
            });
        }
        Ok(Run::Done(out))
    }

    fn tile_one(&self, entry: &SlideEntry, dir: &Path) -> Result<SlideTiling, String> {
        let slide = open_slide(&entry.slide_path).map_err(|e| e.to_string())?;
        let ann = match &entry.annotation_path {
            Some(p) => load_annotations(p).map_err(|e| e.to_string())?,
            None => AnnotationSet::default(),
        };
        let meta = SlideLabel {
            patient_id: entry.patient_id.clone(),
            label: entry.label,
        };
        let mut records = self
            .install(|| extract_all(&slide, &ann, &meta, &self.cfg.tiler))
            .map_err(|e| e.to_string())?;
        let (width, height) = slide.dimensions();
        let (tiles_x, tiles_y) = grid_dims(width, height, self.cfg.tiler.tile_size);
        let info = SlideInfo {
            slide_id: entry.slide_id.clone(),
            patient_id: entry.patient_id.clone(),
            label: entry.label,
            width,
            height,
            tile_size: self.cfg.tiler.tile_size,
            out_size: self.cfg.tiler.out_size,
            tiles_x,
            tiles_y,
        };
        write_store(dir, &info, &mut records).map_err(|e| e.to_string())?;
        let kept = records.iter().filter(|r| r.kept()).count();
        Ok(SlideTiling {
            slide_id: entry.slide_id.clone(),
            kept,
            rejected: records.len() - kept,
        })
    }

    fn open_stores(&self, slides: &[SlideEntry]) -> Result<(Vec<TileStore>, Vec<String>)> {
        let mut stores = Vec::new();
        let mut missing = Vec::new();
        for s in slides {
            let dir = self.store_dir(&s.slide_id);
            if !dir.exists() {
                self.log.event(Stage::Curate, "missing_store", json!({ "slide_id": s.slide_id }));
                missing.push(s.slide_id.clone());
                continue;
            }
            stores.push(TileStore::open(&dir).map_err(fail(Stage::Curate))?);
        }
        Ok((stores, missing))
    }

    /// Holdout, optional ROI-model filter, balancing and splitting, in that order.
    pub fn curate(&self) -> Result<Run<CurateOutcome>> {
        let slides = self.listing(Stage::Curate)?;
        require(Stage::Curate, "tile store", &self.cfg.paths.tile_store)?;
        if let Some(p) = &self.cfg.paths.patients {
            require(Stage::Curate, "patient table", p)?;
        }
        if let Some(p) = &self.cfg.dataset.roi_filter {
            require(Stage::Curate, "ROI filter checkpoint", p)?;
        }
        let d = &self.cfg.dataset;
        if self.opts.dry_run {
            let mut plan = vec![
                format!("read {} tile stores from {}", slides.len(), self.cfg.paths.tile_store.display()),
                format!("hold out {} slides per class (seed {})", d.heldout_per_class, self.cfg.seed),
            ];
            if let Some(p) = &d.roi_filter {
                plan.push(format!("discard tiles rejected by {}", p.display()));
            }
            plan.push("undersample the majority class".into());
            plan.push(format!("split {:?} ({:?} mode)", d.fractions, d.split_mode));
            plan.push(format!("write {}", self.manifest_path().display()));
            return Ok(Run::Planned(plan));
        }
        let (stores, missing_stores) = self.open_stores(&slides)?;
        let seed = self.cfg.seed;
        let m = DatasetManifest::from_stores(&stores, seed);
        if let Some(p) = &self.cfg.paths.patients {
            let patients = read_patients_csv(p).map_err(fail(Stage::Curate))?;
            m.check_cohorts(&patients).map_err(fail(Stage::Curate))?;
        }
        let mut m = holdout_slides(m, d.heldout_per_class, seed).map_err(fail(Stage::Curate))?;
        if let Some(p) = &d.roi_filter {
            let keep = self.roi_predictions(p, &stores, &m)?;
            m = filter_with_model(m, |e| keep.get(&e.uid()).copied().unwrap_or(true));
        }
        let m = balance_undersample(m, seed).map_err(fail(Stage::Curate))?;
        let m = stratified_split_with(m, d.fractions, seed, d.split_mode).map_err(fail(Stage::Curate))?;
        self.write_run_config(Stage::Curate)?;
        let path = self.manifest_path();
        write_manifest(&path, &m).map_err(fail(Stage::Curate))?;
        self.log.event(
            Stage::Curate,
            "manifest",
            json!({ "path": path, "counts": m.counts(), "heldout": m.provenance.heldout_slides }),
        );
        Ok(Run::Done(CurateOutcome {
            manifest_path: path,
            manifest: m,
            missing_stores,
        }))
    }

    /// Keep/discard decision per pool tile uid from a binary tile classifier.
    fn roi_predictions(&self, ckpt: &Path, stores: &[TileStore], m: &DatasetManifest) -> Result<HashMap<u64, bool>> {
        let spec = read_checkpoint_spec(ckpt).map_err(fail(Stage::Curate))?;
        let model = load_checkpoint(ckpt, &spec).map_err(fail(Stage::Curate))?;
        let (uids, tiles) = load_entry_pixels(stores, m, Split::Pool).map_err(fail(Stage::Curate))?;
        let probs = self.install(|| predict(&model, &tiles)).map_err(fail(Stage::Curate))?;
        Ok(uids.into_iter().zip(probs).map(|(u, p)| (u, p >= 0.5)).collect())
    }

    fn load_manifest(&self, stage: Stage) -> Result<(DatasetManifest, Vec<TileStore>)> {
        let path = self.manifest_path();
        require(stage, "manifest", &path)?;
        let m = read_manifest(&path).map_err(fail(stage))?;
        let ids: Vec<String> = {
            let mut v: Vec<String> = m.entries.iter().map(|e| e.slide_id.clone()).collect();
            v.dedup();
            v.sort();
            v.dedup();
            v
        };
        let stores = ids
            .iter()
            .map(|id| {
                let dir = self.store_dir(id);
                require(stage, "tile store", &dir)?;
                TileStore::open(&dir).map_err(fail(stage))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((m, stores))
    }

    /// Trains on TRAIN, early-stops on VAL, checkpointing after every epoch.
    pub fn train(&self) -> Result<Run<TrainRun>> {
        let manifest = self.manifest_path();
        require(Stage::Train, "manifest", &manifest)?;
        if let Some(r) = &self.opts.resume {
            require(Stage::Train, "checkpoint", r)?;
        }
        let ckpt = self.run_dir().join(CHECKPOINT_FILE);
        let s = &self.cfg.schedule;
        if self.opts.dry_run {
            let mut plan = vec![format!("read {}", manifest.display())];
            if let Some(r) = &self.opts.resume {
                plan.push(format!("resume from {}", r.display()));
            }
            plan.push(format!(
                "train {} epochs head-only at lr {}, then up to {} epochs at lr {} x {}^k, batch {}",
                s.phase1.epochs, s.phase1.lr, s.phase2.epochs, s.phase2.lr0, s.phase2.gamma, s.batch_size
            ));
            plan.push(format!("write {} after every epoch", ckpt.display()));
            return Ok(Run::Planned(plan));
        }
        let (m, stores) = self.load_manifest(Stage::Train)?;
        let train_set = tile_set(&stores, &m, Split::Train).map_err(fail(Stage::Train))?;
        let val_set = tile_set(&stores, &m, Split::Val).map_err(fail(Stage::Train))?;
        let mut model = match &self.opts.resume {
            Some(p) => load_checkpoint(p, &self.cfg.model).map_err(fail(Stage::Train))?,
            None => ModelState::<f32>::new(self.cfg.model.clone(), self.cfg.seed).map_err(fail(Stage::Train))?,
        };
        let aug = self.cfg.effective_augment();
        self.write_run_config(Stage::Train)?;
        self.log.event(
            Stage::Train,
            "start",
            json!({ "train": train_set.len(), "val": val_set.len(), "params": model.param_count(), "epoch": model.epoch }),
        );
        let total = s.total_epochs();
        let finished = self.install(|| -> Result<bool> {
            loop {
                let next = model.epoch + 1;
                let done = train_until(&mut model, &train_set, &val_set, &aug, s, next).map_err(fail(Stage::Train))?;
                if let Some(rec) = model.progress.history.last().filter(|r| r.epoch + 1 == model.epoch) {
                    self.log.event(Stage::Train, "epoch", json!(rec));
                }
                save_checkpoint(&model, &ckpt).map_err(fail(Stage::Train))?;
                if done || model.epoch >= total {
                    return Ok(done);
                }
            }
        })?;
        debug_assert!(finished);
        write_atomic(&self.run_dir().join(HISTORY_FILE), history_csv(&model).as_bytes()).map_err(fail(Stage::Train))?;
        let (_, acc) = self.install(|| crate::nn::evaluate(&model, &val_set)).map_err(fail(Stage::Train))?;
        let p = &model.progress;
        Ok(Run::Done(TrainRun {
            checkpoint: ckpt,
            epochs_run: model.epoch,
            best_epoch: p.best_epoch,
            best_val_loss: p.best_val_loss,
            stopped_early: p.stopped_early,
            final_val_accuracy: Some(acc),
        }))
    }

    fn model(&self, stage: Stage) -> Result<ModelState<f32>> {
        let p = self.checkpoint_path();
        require(stage, "checkpoint", &p)?;
        load_checkpoint(&p, &self.cfg.model).map_err(fail(stage))
    }

    /// Tile-level metrics on TEST and slide-level decisions on HELDOUT_WSI.
    pub fn eval(&self) -> Result<Run<EvalOutcome>> {
        require(Stage::Eval, "checkpoint", &self.checkpoint_path())?;
        require(Stage::Eval, "manifest", &self.manifest_path())?;
        let dir = self.run_dir().join("eval");
        if self.opts.dry_run {
            return Ok(Run::Planned(vec![
                format!("load {}", self.checkpoint_path().display()),
                "score TEST tiles: confusion, precision, recall, F1, ROC".into(),
                "aggregate every HELDOUT_WSI slide and render its heatmap".into(),
                format!("write {}", dir.display()),
            ]));
        }
        let started = Timestamps::now();
        let model = self.model(Stage::Eval)?;
        let (m, stores) = self.load_manifest(Stage::Eval)?;
        let (test_uids, test_tiles) = load_entry_pixels(&stores, &m, Split::Test).map_err(fail(Stage::Eval))?;
        let truth: HashMap<u64, bool> = m.in_split(Split::Test).map(|e| (e.uid(), e.label == ClassLabel::Progressor)).collect();
        let labels: Vec<bool> = test_uids.iter().map(|u| truth[u]).collect();
        let probs = self.install(|| predict(&model, &test_tiles)).map_err(fail(Stage::Eval))?;
        let cm = confusion(&labels, &probs, self.cfg.threshold).map_err(fail(Stage::Eval))?;
        let roc = roc_auc(&labels, &probs).ok();
        let tile_level = TileLevel {
            n_tiles: cm.total(),
            confusion: cm,
            scores: scores(&cm),
            auc: roc.as_ref().map(|r| r.auc),
        };
        let listing: BTreeMap<String, SlideEntry> = match self.listing(Stage::Eval) {
            Ok(l) => l.into_iter().map(|e| (e.slide_id.clone(), e)).collect(),
            Err(_) => BTreeMap::new(),
        };
        let by_id: BTreeMap<&str, &TileStore> = stores.iter().map(|s| (s.info.slide_id.as_str(), s)).collect();
        let mut outcomes = Vec::new();
        let mut slide_reports = Vec::new();
        for id in m.slides_in(Split::HeldoutWsi) {
            let store = by_id[id.as_str()];
            let report = self
                .install(|| infer_slide(&model, store, self.cfg.threshold, self.cfg.report.aggregation))
                .map_err(fail(Stage::Eval))?;
            let heat = listing.get(&id).and_then(|e| self.heatmap(e, store, &report));
            outcomes.push(SlideOutcome {
                slide_id: id.clone(),
                n_tiles: report.tiles.len(),
                mean_prob: report.mean_prob,
                decision: report.decision,
                truth: store.info.label,
            });
            self.log.event(
                Stage::Eval,
                "slide",
                json!({ "slide_id": id, "mean_prob": report.mean_prob, "decision": report.decision, "truth": store.info.label }),
            );
            slide_reports.push((report, heat));
        }
        let mut report = EvalReport::new(self.cfg.digest(), self.cfg.threshold, tile_level, outcomes);
        report.timestamps = Timestamps {
            started_unix: started,
            finished_unix: Timestamps::now(),
        };
        write_eval_report(&report, roc.as_ref(), &slide_reports, &dir).map_err(fail(Stage::Eval))?;
        Ok(Run::Done(EvalOutcome { dir, report, roc }))
    }

    /// Thumbnail of the tiled area with the probability heatmap laid over it.
    fn heatmap(&self, entry: &SlideEntry, store: &TileStore, report: &SlideReport) -> Option<Raster> {
        let info = &store.info;
        let cell = self.cfg.report.heatmap_cell_px;
        let slide = open_slide(&entry.slide_path).ok()?;
        let thumb = thumbnail(&slide, info, cell)?;
        let grid = heatmap_grid(report, (info.tiles_x, info.tiles_y)).ok()?;
        crate::report::render_slide_heatmap(&thumb, &grid).ok()
    }

    /// Scores one slide and writes its report, histogram and heatmap.
    pub fn infer(&self, target: &InferTarget) -> Result<Run<InferOutcome>> {
        require(Stage::Infer, "checkpoint", &self.checkpoint_path())?;
        let entry = match target {
            InferTarget::Listed(id) => self
                .listing(Stage::Infer)?
                .into_iter()
                .find(|e| &e.slide_id == id)
                .ok_or_else(|| fail(Stage::Infer)(format!("slide {id} is not in {}", self.cfg.paths.slides.display())))?,
            InferTarget::File { slide, annotations } => {
                require(Stage::Infer, "slide", slide)?;
                if let Some(a) = annotations {
                    require(Stage::Infer, "annotations", a)?;
                }
                let id = open_slide(slide).map_err(fail(Stage::Infer))?.slide_id().to_string();
                SlideEntry {
                    slide_id: id,
                    patient_id: String::new(),
                    label: ClassLabel::NonProgressor,
                    slide_path: slide.clone(),
                    annotation_path: annotations.clone(),
                }
            }
        };
        let dir = self.run_dir().join("infer");
        let listed_store = self.store_dir(&entry.slide_id);
        let reuse = matches!(target, InferTarget::Listed(_)) && listed_store.join(crate::tiler::store::INFO_FILE).exists();
        let store_dir = if reuse {
            listed_store
        } else {
            dir.join("tiles").join(&entry.slide_id)
        };
        if self.opts.dry_run {
            let mut plan = Vec::new();
            if !reuse {
                plan.push(format!("tile {} into {}", entry.slide_path.display(), store_dir.display()));
            }
            plan.push(format!("score tiles of {} with {}", entry.slide_id, self.checkpoint_path().display()));
            plan.push(format!("write {}", dir.join("slides").join(&entry.slide_id).display()));
            return Ok(Run::Planned(plan));
        }
        let model = self.model(Stage::Infer)?;
        if !reuse {
            self.tile_one(&entry, &store_dir).map_err(fail(Stage::Infer))?;
        }
        let store = TileStore::open(&store_dir).map_err(fail(Stage::Infer))?;
        let report = self
            .install(|| infer_slide(&model, &store, self.cfg.threshold, self.cfg.report.aggregation))
            .map_err(fail(Stage::Infer))?;
        let heat = self.heatmap(&entry, &store, &report);
        let files = slide_files(&report, heat.as_ref()).map_err(fail(Stage::Infer))?;
        commit_files(&dir, &files).map_err(fail(Stage::Infer))?;
        self.log.event(
            Stage::Infer,
            "slide",
            json!({ "slide_id": report.slide_id, "mean_prob": report.mean_prob, "decision": report.decision }),
        );
        Ok(Run::Done(InferOutcome { dir, report }))
    }

    /// Grad-CAM overlays for kept tiles of a stored slide; an empty `tiles`
    /// list means every kept tile.
    pub fn gradcam(&self, slide_id: &str, tiles: &[(u32, u32)]) -> Result<Run<GradCamOutcome>> {
        require(Stage::GradCam, "checkpoint", &self.checkpoint_path())?;
        let store_dir = self.store_dir(slide_id);
        require(Stage::GradCam, "tile store", &store_dir)?;
        let out_dir = self.run_dir().join("gradcam").join(slide_id);
        if self.opts.dry_run {
            let which = if tiles.is_empty() {
                "every kept tile".to_string()
            } else {
                format!("{} tiles", tiles.len())
            };
            return Ok(Run::Planned(vec![format!("Grad-CAM for {which} of {slide_id} into {}", out_dir.display())]));
        }
        let model = self.model(Stage::GradCam)?;
        let store = TileStore::open(&store_dir).map_err(fail(Stage::GradCam))?;
        let kept = store.load_kept().map_err(fail(Stage::GradCam))?;
        let selected: Vec<&TileRecord> = if tiles.is_empty() {
            kept.iter().collect()
        } else {
            tiles
                .iter()
                .map(|&(gx, gy)| {
                    kept.iter().find(|r| (r.grid_x, r.grid_y) == (gx, gy)).ok_or_else(|| {
                        fail(Stage::GradCam)(format!("tile ({gx}, {gy}) of {slide_id} was not kept or does not exist"))
                    })
                })
                .collect::<Result<_>>()?
        };
        let alpha = self.cfg.report.gradcam_alpha;
        let rendered = self.install(|| {
            use rayon::prelude::*;
            selected
                .par_iter()
                .map(|r| {
                    let px = r.pixels.as_ref().expect("loaded");
                    let map = gradcam(&model, px)?;
                    let img = overlay(px, &map, alpha)?;
                    Ok((r.grid_x, r.grid_y, map, img))
                })
                .collect::<Result<Vec<_>, crate::gradcam::GradCamError>>()
        });
        let rendered = rendered.map_err(fail(Stage::GradCam))?;
        let mut files = Vec::new();
        let mut out = Vec::new();
        for (gx, gy, map, img) in rendered {
            let stem = format!("{gx}_{gy}");
            let sidecar = json!({
                "slide_id": slide_id,
                "grid_x": gx,
                "grid_y": gy,
                "prob": crate::nn::sigmoid(map.logit),
                "alpha": alpha,
                "map": map,
            });
            files.push((PathBuf::from(format!("{stem}.png")), encode_png(&img).map_err(fail(Stage::GradCam))?));
            files.push((
                PathBuf::from(format!("{stem}.json")),
                serde_json::to_vec_pretty(&sidecar).map_err(fail(Stage::GradCam))?,
            ));
            out.push((out_dir.join(format!("{stem}.png")), out_dir.join(format!("{stem}.json"))));
        }
        commit_files(&out_dir, &files).map_err(fail(Stage::GradCam))?;
        self.log.event(Stage::GradCam, "done", json!({ "slide_id": slide_id, "tiles": out.len() }));
        Ok(Run::Done(GradCamOutcome { files: out }))
    }
}

/// Pixels of every manifest entry in `split`, in manifest order, with uids.
fn load_entry_pixels(
    stores: &[TileStore],
    m: &DatasetManifest,
    split: Split,
) -> Result<(Vec<u64>, Vec<Raster>), crate::tiler::TilerError> {
    let mut by_slide: BTreeMap<&str, HashMap<u64, Raster>> = BTreeMap::new();
    let wanted: std::collections::HashSet<&str> = m.in_split(split).map(|e| e.slide_id.as_str()).collect();
    for s in stores.iter().filter(|s| wanted.contains(s.info.slide_id.as_str())) {
        let blocks = s
            .load_kept()?
            .into_iter()
            .filter_map(|r| Some((r.block?, r.pixels?)))
            .collect();
        by_slide.insert(s.info.slide_id.as_str(), blocks);
    }
    let mut uids = Vec::new();
    let mut tiles = Vec::new();
    for e in m.in_split(split) {
        let px = by_slide
            .get(e.slide_id.as_str())
            .and_then(|b| b.get(&e.block))
            .ok_or_else(|| crate::tiler::TilerError::Store {
                path: PathBuf::from(&e.slide_id),
                message: format!("block {} missing for tile ({}, {})", e.block, e.grid_x, e.grid_y),
            })?;
        uids.push(e.uid());
        tiles.push(px.clone());
    }
    Ok((uids, tiles))
}

fn tile_set(stores: &[TileStore], m: &DatasetManifest, split: Split) -> Result<TileSet, crate::tiler::TilerError> {
    let (uids, tiles) = load_entry_pixels(stores, m, split)?;
    let labels: HashMap<u64, ClassLabel> = m.in_split(split).map(|e| (e.uid(), e.label)).collect();
    let mut set = TileSet::default();
    for (uid, tile) in uids.into_iter().zip(tiles) {
        set.push(tile, labels[&uid], uid);
    }
    Ok(set)
}

fn history_csv(model: &ModelState<f32>) -> String {
    let mut s = String::from("epoch,phase,lr,train_loss,val_loss,val_accuracy\n");
    for r in &model.progress.history {
        s.push_str(&format!(
            "{},{:?},{:e},{:.6},{:.6},{:.6}\n",
            r.epoch, r.phase, r.lr, r.train_loss, r.val_loss, r.val_accuracy
        ));
    }
    s
}

/// The tiled area of a slide resized to `cell` pixels per tile, read from
/// the coarsest pyramid level that still has at least that resolution.
pub fn thumbnail(slide: &SlideImage, info: &SlideInfo, cell: u32) -> Option<Raster> {
    let (tw, th) = (info.tiles_x * cell, info.tiles_y * cell);
    let (area_w, area_h) = (info.tiles_x * info.tile_size, info.tiles_y * info.tile_size);
    if tw == 0 || th == 0 {
        return None;
    }
    let (level, l) = slide
        .levels()
        .iter()
        .enumerate()
        .rev()
        .find(|(_, l)| (area_w as f64 / l.downsample) >= tw as f64)
        .unwrap_or((0, &slide.levels()[0]));
    let w = ((area_w as f64 / l.downsample).round() as u32).clamp(1, l.width);
    let h = ((area_h as f64 / l.downsample).round() as u32).clamp(1, l.height);
    let px = slide.read_region(level, 0, 0, w, h).ok()?;
    Some(resize_bilinear(&Raster::new(w, h, px), tw, th))
}
