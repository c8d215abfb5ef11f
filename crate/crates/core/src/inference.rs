//! Slide-level inference: per-tile probabilities on the slide grid, their
//! mean, the thresholded decision and a probability histogram.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{predict, ModelState, NnError, Scalar};
use crate::tiler::{ClassLabel, Raster, TileStore, TilerError};

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("slide {0} has no kept tiles")]
    NoTiles(String),
    #[error("tile ({grid_x}, {grid_y}) lies outside the {tiles_x}x{tiles_y} grid")]
    GridMismatch {
        grid_x: u32,
        grid_y: u32,
        tiles_x: u32,
        tiles_y: u32,
    },
    #[error("{0} weights for {1} tiles")]
    WeightMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Store(#[from] TilerError),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileProb {
    pub grid_x: u32,
    pub grid_y: u32,
    pub prob: f64,
}

/// Equal-width bins over `[0, 1]`; each bin is `[lo, hi)` except the last,
/// which also holds 1.0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(probs: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        assert!(bins > 0, "at least one bin");
        let mut counts = vec![0u64; bins];
        for p in probs {
            let i = ((p.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        Histogram { counts }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let n = self.bins() as f64;
        (i as f64 / n, (i + 1) as f64 / n)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Mean weighted by each tile's tissue fraction.
    TissueWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideReport {
    pub slide_id: String,
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Sorted by `(grid_y, grid_x)`.
    pub tiles: Vec<TileProb>,
    pub mean_prob: f64,
    pub threshold: f64,
    pub decision: ClassLabel,
    pub histogram: Histogram,
}

/// Aggregates tile probabilities. Sums run in `(grid_y, grid_x)` order so
/// the result does not depend on the order tiles arrive in.
pub fn aggregate(
    slide_id: &str,
    (tiles_x, tiles_y): (u32, u32),
    mut tiles: Vec<TileProb>,
    weights: Option<Vec<f64>>,
    threshold: f64,
) -> Result<SlideReport> {
    if tiles.is_empty() {
        return Err(InferenceError::NoTiles(slide_id.to_string()));
    }
    if let Some(t) = tiles.iter().find(|t| t.grid_x >= tiles_x || t.grid_y >= tiles_y) {
        return Err(InferenceError::GridMismatch {
            grid_x: t.grid_x,
            grid_y: t.grid_y,
            tiles_x,
            tiles_y,
        });
    }
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by_key(|&i| (tiles[i].grid_y, tiles[i].grid_x));
    let weights = match weights {
        Some(w) if w.len() != tiles.len() => return Err(InferenceError::WeightMismatch(w.len(), tiles.len())),
        Some(w) => Some(order.iter().map(|&i| w[i]).collect::<Vec<_>>()),
        None => None,
    };
    tiles = order.iter().map(|&i| tiles[i]).collect();
    let mean_prob = match &weights {
        None => tiles.iter().map(|t| t.prob).sum::<f64>() / tiles.len() as f64,
        Some(w) => {
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                tiles.iter().zip(w).map(|(t, w)| t.prob * w).sum::<f64>() / total
            } else {
                tiles.iter().map(|t| t.prob).sum::<f64>() / tiles.len() as f64
            }
        }
    };
    Ok(SlideReport {
        slide_id: slide_id.to_string(),
        tiles_x,
        tiles_y,
        histogram: Histogram::new(tiles.iter().map(|t| t.prob), DEFAULT_BINS),
        tiles,
        mean_prob,
        threshold,
        decision: ClassLabel::from_prob(mean_prob, threshold),
    })
}

/// Predicts every kept tile of a stored slide and aggregates.
pub fn infer_slide<T: Scalar>(
    model: &ModelState<T>,
    store: &TileStore,
    threshold: f64,
    aggregation: Aggregation,
) -> Result<SlideReport> {
    let kept = store.load_kept()?;
    if kept.is_empty() {
        return Err(InferenceError::NoTiles(store.info.slide_id.clone()));
    }
    let tiles: Vec<Raster> = kept.iter().map(|r| r.pixels.clone().expect("loaded")).collect();
    let probs = predict(model, &tiles)?;
    let weights = (aggregation == Aggregation::TissueWeighted).then(|| kept.iter().map(|r| r.qc.tissue_fraction).collect());
    let tp = kept
        .iter()
        .zip(probs)
        .map(|(r, prob)| TileProb {
            grid_x: r.grid_x,
            grid_y: r.grid_y,
            prob,
        })
        .collect();
    aggregate(&store.info.slide_id, (store.info.tiles_x, store.info.tiles_y), tp, weights, threshold)
}

/// `tiles_y x tiles_x` matrix of probabilities; `None` where no tile was kept.
pub fn heatmap_grid(report: &SlideReport, (tiles_x, tiles_y): (u32, u32)) -> Result<Vec<Vec<Option<f64>>>> {
    let mut grid = vec![vec![None; tiles_x as usize]; tiles_y as usize];
    for t in &report.tiles {
        if t.grid_x >= tiles_x || t.grid_y >= tiles_y {
            return Err(InferenceError::GridMismatch {
                grid_x: t.grid_x,
                grid_y: t.grid_y,
                tiles_x,
                tiles_y,
            });
        }
        grid[t.grid_y as usize][t.grid_x as usize] = Some(t.prob);
    }
    Ok(grid)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<SlideReport> {
    let path = path.as_ref();
    let fmt = |m: String| InferenceError::Format {
        path: path.display().to_string(),
        message: m,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fmt(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| fmt(e.to_string()))
}
