//! Declarative pipeline configuration and the slide listing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::dataset::{SplitMode, DEFAULT_FRACTIONS};
use crate::inference::Aggregation;
use crate::nn::{ModelSpec, TrainSchedule};
use crate::tiler::{ClassLabel, TilerParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    Missing { what: &'static str, path: PathBuf },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// CSV listing `slide_id,patient_id,label,slide_path,annotation_path`.
    pub slides: PathBuf,
    /// Optional `patients.csv` checked against slide labels during curation.
    pub patients: Option<PathBuf>,
    pub tile_store: PathBuf,
    /// Parent of per-config run directories.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            slides: "slides.csv".into(),
            patients: None,
            tile_store: "tiles".into(),
            run_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Train, validation, test.
    pub fractions: [f64; 3],
    pub heldout_per_class: usize,
    pub split_mode: SplitMode,
    /// Checkpoint of a keep/discard tile classifier applied before balancing.
    pub roi_filter: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            fractions: DEFAULT_FRACTIONS,
            heldout_per_class: 10,
            split_mode: SplitMode::Tile,
            roi_filter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Heatmap cell size in pixels.
    pub heatmap_cell_px: u32,
    pub gradcam_alpha: f64,
    pub aggregation: Aggregation,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            heatmap_cell_px: 16,
            gradcam_alpha: crate::gradcam::DEFAULT_ALPHA,
            aggregation: Aggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed for every stochastic stage.
    pub seed: u64,
    pub paths: Paths,
    pub tiler: TilerParams,
    pub augment: AugmentConfig,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub schedule: TrainSchedule,
    pub threshold: f64,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            tiler: TilerParams::default(),
            augment: AugmentConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelSpec::default(),
            schedule: TrainSchedule::default(),
            threshold: 0.5,
            report: ReportConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let read_err = |m: String| ConfigError::Read {
            path: path.to_path_buf(),
            message: m,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?;
        let abs = std::path::absolute(path).map_err(|e| read_err(e.to_string()))?;
        cfg.resolve_paths(abs.parent().unwrap_or(Path::new("/")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.paths.slides);
        resolve(base, &mut self.paths.tile_store);
        resolve(base, &mut self.paths.run_dir);
        if let Some(p) = self.paths.patients.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = self.dataset.roi_filter.as_mut() {
            resolve(base, p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks value ranges (paths are checked per command).
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let f = self.dataset.fractions;
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("dataset.fractions {f:?} must be in [0, 1] and sum to 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        let t = &self.tiler;
        if t.tile_size == 0 || t.out_size == 0 {
            return bad("tiler.tile_size and tiler.out_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.roi_min) || !(0.0..=1.0).contains(&t.exclude_max) {
            return bad("tiler.roi_min and tiler.exclude_max must be in [0, 1]".into());
        }
        if (self.model.input_height, self.model.input_width) != (t.out_size as usize, t.out_size as usize) {
            return bad(format!(
                "model input {}x{} does not match tiler.out_size {}",
                self.model.input_width, self.model.input_height, t.out_size
            ));
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.report.gradcam_alpha) || self.report.heatmap_cell_px == 0 {
            return bad("report.gradcam_alpha must be in [0, 1] and heatmap_cell_px positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with `paths` cleared, so the same
    /// experiment gets the same digest wherever its files live.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// `run_dir/<first 16 hex digits of the digest>`.
    pub fn run_path(&self) -> PathBuf {
        self.paths.run_dir.join(&self.digest()[..16])
    }

    /// Augmentation settings keyed to the master seed.
    pub fn effective_augment(&self) -> AugmentConfig {
        AugmentConfig {
            master_seed: self.seed,
            ..self.augment.clone()
        }
    }
}

/// One row of the slide listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub label: ClassLabel,
    pub slide_path: PathBuf,
    pub annotation_path: Option<PathBuf>,
}

/// Reads a slide listing; relative paths resolve against the CSV's directory.
pub fn read_slides_csv(path: impl AsRef<Path>) -> Result<Vec<SlideEntry>> {
    let path = path.as_ref();
    let err = |m: String| ConfigError::Read {
        path: path.to_path_buf(),
        message: m,
    };
    if !path.exists() {
        return Err(ConfigError::Missing {
            what: "slide listing",
            path: path.to_path_buf(),
        });
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let mut e: SlideEntry = row.map_err(|e| err(e.to_string()))?;
        resolve(base, &mut e.slide_path);
        if let Some(a) = e.annotation_path.as_mut().filter(|a| !a.as_os_str().is_empty()) {
            resolve(base, a);
        } else {
            e.annotation_path = None;
        }
        out.push(e);
    }
    Ok(out)
}

/// Writes a slide listing with paths as given.
pub fn write_slides_csv(path: impl AsRef<Path>, entries: &[SlideEntry]) -> Result<()> {
    let path = path.as_ref();
    let err = |m: String| ConfigError::Read {
        path: path.to_path_buf(),
        message: m,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    for e in entries {
        w.serialize(e).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}
