//! Dataset curation: slide-level holdout, majority-class undersampling and
//! class-stratified train/validation/test splits, all seeded and recorded in
//! a [`DatasetManifest`].
//!
//! Every sampling step orders its candidates by `(slide_id, grid_y, grid_x)`
//! before the seeded shuffle, so manifests depend only on their inputs and
//! seeds.

mod cohort;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, stream_rng};
use crate::tiler::{ClassLabel, TileStore};

pub use cohort::{cohort_summary, read_patients_csv, summarize_cohort, write_patients_csv, CohortStats, PatientRecord};
pub use manifest::{read_manifest, write_manifest};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("class {class:?} has {available} eligible slides from distinct patients, {needed} required")]
    InsufficientSlides {
        class: ClassLabel,
        available: usize,
        needed: usize,
    },
    #[error("class {0:?} has no tiles to balance")]
    EmptyClass(ClassLabel),
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    InvalidFractions([f64; 3]),
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("patient {patient_id}: {message}")]
    Patient { patient_id: String, message: String },
    #[error("manifest {path}: {message}")]
    Format { path: std::path::PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    /// Eligible, not yet assigned.
    Pool,
    Train,
    Val,
    Test,
    HeldoutWsi,
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiscardReason {
    Undersampled,
    RoiModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    /// Block index in the slide's tile store.
    pub block: u64,
    pub label: ClassLabel,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DiscardReason>,
}

impl ManifestEntry {
    fn sort_key(&self) -> (&str, u32, u32) {
        (&self.slide_id, self.grid_y, self.grid_x)
    }

    pub fn uid(&self) -> u64 {
        crate::tiler::tile_uid(&self.slide_id, self.grid_x, self.grid_y)
    }
}

/// Per-class tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub progressor: usize,
    pub non_progressor: usize,
}

impl ClassCounts {
    pub fn get(&self, class: ClassLabel) -> usize {
        match class {
            ClassLabel::Progressor => self.progressor,
            ClassLabel::NonProgressor => self.non_progressor,
        }
    }

    fn bump(&mut self, class: ClassLabel) {
        match class {
            ClassLabel::Progressor => self.progressor += 1,
            ClassLabel::NonProgressor => self.non_progressor += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.progressor + self.non_progressor
    }
}

/// Counts recorded as curation proceeds, so either reading of "curated
/// total" (with or without held-out slides) can be audited.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Kept tiles entering curation.
    pub curated: ClassCounts,
    pub heldout_slides: Vec<String>,
    pub heldout_tiles: ClassCounts,
    pub pre_balance: ClassCounts,
    pub post_balance: ClassCounts,
    pub roi_model_discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub provenance: Provenance,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

impl DatasetManifest {
    /// Wraps entries as an all-`Pool` manifest sorted by `(slide_id, grid_y, grid_x)`.
    pub fn from_entries(mut entries: Vec<ManifestEntry>, seed: u64) -> Self {
        entries.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut curated = ClassCounts::default();
        for e in &entries {
            curated.bump(e.label);
        }
        DatasetManifest {
            entries,
            seed,
            fractions: DEFAULT_FRACTIONS,
            provenance: Provenance {
                curated,
                ..Provenance::default()
            },
        }
    }

    /// One pool entry per kept tile of each store.
    pub fn from_stores(stores: &[TileStore], seed: u64) -> Self {
        let entries = stores
            .iter()
            .flat_map(|s| s.kept())
            .map(|r| ManifestEntry {
                slide_id: r.slide_id.clone(),
                patient_id: r.patient_id.clone(),
                grid_x: r.grid_x,
                grid_y: r.grid_y,
                block: r.block.expect("kept tiles carry a block"),
                label: r.label,
                split: Split::Pool,
                reason: None,
            })
            .collect();
        Self::from_entries(entries, seed)
    }

    /// Tallies per split and class.
    pub fn counts(&self) -> BTreeMap<Split, ClassCounts> {
        let mut out: BTreeMap<Split, ClassCounts> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.split).or_default().bump(e.label);
        }
        out
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Slide ids of the given split, sorted.
    pub fn slides_in(&self, split: Split) -> Vec<String> {
        let set: BTreeSet<&str> = self.in_split(split).map(|e| e.slide_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    fn pool_indices(&self, class: ClassLabel) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].split == Split::Pool && self.entries[i].label == class)
            .collect();
        idx.sort_by(|&a, &b| self.entries[a].sort_key().cmp(&self.entries[b].sort_key()));
        idx
    }
}

const CLASSES: [ClassLabel; 2] = [ClassLabel::NonProgressor, ClassLabel::Progressor];

/// Withholds every tile of `n_per_class` slides per class, each from a
/// distinct patient, for slide-level evaluation.
pub fn holdout_slides(mut m: DatasetManifest, n_per_class: usize, seed: u64) -> Result<DatasetManifest> {
    let mut chosen_all = BTreeSet::new();
    for class in CLASSES {
        let slides: BTreeMap<&str, &str> = m
            .entries
            .iter()
            .filter(|e| e.split == Split::Pool && e.label == class)
            .map(|e| (e.slide_id.as_str(), e.patient_id.as_str()))
            .collect();
        let patients: BTreeSet<&str> = slides.values().copied().collect();
        if patients.len() < n_per_class {
            return Err(DatasetError::InsufficientSlides {
                class,
                available: patients.len(),
                needed: n_per_class,
            });
        }
        let mut order: Vec<(&str, &str)> = slides.into_iter().collect();
        order.shuffle(&mut stream_rng(&[domain::HOLDOUT, seed, class as u64]));
        let mut used = BTreeSet::new();
        for (slide, patient) in order {
            if used.len() == n_per_class {
                break;
            }
            if used.insert(patient) {
                chosen_all.insert(slide.to_string());
            }
        }
    }
    let mut heldout_tiles = ClassCounts::default();
    for e in m.entries.iter_mut() {
        if e.split == Split::Pool && chosen_all.contains(&e.slide_id) {
            e.split = Split::HeldoutWsi;
            heldout_tiles.bump(e.label);
        }
    }
    m.provenance.heldout_slides = chosen_all.into_iter().collect();
    m.provenance.heldout_tiles = heldout_tiles;
    m.seed = seed;
    Ok(m)
}

/// Undersamples the majority class of the pool down to the minority count.
pub fn balance_undersample(mut m: DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let pools: Vec<Vec<usize>> = CLASSES.iter().map(|&c| m.pool_indices(c)).collect();
    for (class, pool) in CLASSES.iter().zip(&pools) {
        if pool.is_empty() {
            return Err(DatasetError::EmptyClass(*class));
        }
    }
    let pre = ClassCounts {
        non_progressor: pools[0].len(),
        progressor: pools[1].len(),
    };
    let target = pre.progressor.min(pre.non_progressor);
    for (class, pool) in CLASSES.iter().zip(pools) {
        if pool.len() == target {
            continue;
        }
        let mut order = pool;
        order.shuffle(&mut stream_rng(&[domain::BALANCE, seed, *class as u64]));
        for &i in &order[target..] {
            m.entries[i].split = Split::Discarded;
            m.entries[i].reason = Some(DiscardReason::Undersampled);
        }
    }
    m.provenance.pre_balance = pre;
    m.provenance.post_balance = ClassCounts {
        progressor: target,
        non_progressor: target,
    };
    m.seed = seed;
    Ok(m)
}

/// How the pool is divided between splits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Tiles are assigned independently within each class.
    #[default]
    Tile,
    /// Whole slides are assigned, so no slide crosses splits.
    Slide,
}

/// Per-class split sizes: validation and test take the floor of their
/// fraction, training takes the remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> (usize, usize, usize) {
    let n_val = (fractions[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (fractions[2] * n as f64 + 1e-9).floor() as usize;
    (n - n_val - n_test, n_val, n_test)
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    let ok = fractions.iter().all(|f| f.is_finite() && *f >= 0.0) && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9;
    if ok {
        Ok(())
    } else {
        Err(DatasetError::InvalidFractions(fractions))
    }
}

/// Class-stratified split of the pool into train / validation / test.
pub fn stratified_split(m: DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    stratified_split_with(m, fractions, seed, SplitMode::Tile)
}

pub fn stratified_split_with(
    mut m: DatasetManifest,
    fractions: [f64; 3],
    seed: u64,
    mode: SplitMode,
) -> Result<DatasetManifest> {
    check_fractions(fractions)?;
    for class in CLASSES {
        let pool = m.pool_indices(class);
        let (_, n_val, n_test) = split_sizes(pool.len(), fractions);
        let mut rng = stream_rng(&[domain::SPLIT, seed, class as u64]);
        match mode {
            SplitMode::Tile => {
                let mut order = pool;
                order.shuffle(&mut rng);
                for (rank, &i) in order.iter().enumerate() {
                    m.entries[i].split = if rank < n_val {
                        Split::Val
                    } else if rank < n_val + n_test {
                        Split::Test
                    } else {
                        Split::Train
                    };
                }
            }
            SplitMode::Slide => {
                let mut by_slide: BTreeMap<String, Vec<usize>> = BTreeMap::new();
                for &i in &pool {
                    by_slide.entry(m.entries[i].slide_id.clone()).or_default().push(i);
                }
                let mut slides: Vec<Vec<usize>> = by_slide.into_values().collect();
                slides.shuffle(&mut rng);
                let (mut val, mut test) = (0usize, 0usize);
                for tiles in slides {
                    let split = if val < n_val {
                        val += tiles.len();
                        Split::Val
                    } else if test < n_test {
                        test += tiles.len();
                        Split::Test
                    } else {
                        Split::Train
                    };
                    for i in tiles {
                        m.entries[i].split = split;
                    }
                }
            }
        }
    }
    m.fractions = fractions;
    m.seed = seed;
    Ok(m)
}

/// Discards every non-discarded tile the predicate rejects.
pub fn filter_with_model(mut m: DatasetManifest, mut keep: impl FnMut(&ManifestEntry) -> bool) -> DatasetManifest {
    let mut dropped = 0;
    for e in m.entries.iter_mut() {
        if e.split != Split::Discarded && !keep(e) {
            e.split = Split::Discarded;
            e.reason = Some(DiscardReason::RoiModel);
            dropped += 1;
        }
    }
    m.provenance.roi_model_discarded += dropped;
    m
}

/// Synthetic entries: `count` tiles per slide for the given class.
pub fn synthetic_entries(class: ClassLabel, slides: usize, tiles_per_slide: usize, prefix: &str) -> Vec<ManifestEntry> {
    let mut out = Vec::with_capacity(slides * tiles_per_slide);
    for s in 0..slides {
        for t in 0..tiles_per_slide {
            out.push(ManifestEntry {
                slide_id: format!("{prefix}{s:05}"),
                patient_id: format!("{prefix}P{s:05}"),
                grid_x: (t % 1000) as u32,
                grid_y: (t / 1000) as u32,
                block: t as u64,
                label: class,
                split: Split::Pool,
                reason: None,
            });
        }
    }
    out
}
