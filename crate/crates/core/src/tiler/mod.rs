//! Tile planning, extraction and preprocessing.
//!
//! Tiles are cut from level 0 on a non-overlapping grid; partial edge tiles
//! are dropped. Each tile then runs a fixed pipeline:
//!
//! 1. read the raw square region,
//! 2. annotation gate (EXCLUDE coverage, then ROI coverage),
//! 3. background / low-variance QC at native resolution,
//! 4. bilinear resize to the output size,
//! 5. per-channel colour normalization,
//! 6. unsharp mask.
//!
//! A rejected tile records why and skips the remaining stages.

mod image_ops;
pub mod store;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slide_io::{coverage_fraction, AnnotationSet, Label, SlideError, SlideImage};

pub use image_ops::{
    normalize_color, qc_tile, resize_bilinear, resize_plane, sharpen, QcResult, QcThresholds, QcVerdict, Raster,
    ReferenceColorStats,
};
pub use store::{read_store, write_store, SlideInfo, TileStore};

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("slide is {width}x{height}, smaller than one {tile}px tile")]
    SlideTooSmall { width: u32, height: u32, tile: u32 },
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("tile store {path}: {message}")]
    Store { path: std::path::PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, TilerError>;

/// Binary class of a slide and all its tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClassLabel {
    NonProgressor = 0,
    Progressor = 1,
}

impl ClassLabel {
    pub fn as_f32(self) -> f32 {
        self as u8 as f32
    }

    pub fn from_bit(bit: u8) -> ClassLabel {
        if bit == 0 {
            ClassLabel::NonProgressor
        } else {
            ClassLabel::Progressor
        }
    }

    pub fn from_prob(p: f64, threshold: f64) -> ClassLabel {
        if p >= threshold {
            ClassLabel::Progressor
        } else {
            ClassLabel::NonProgressor
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    Excluded,
    NotRoi,
    Background,
    LowVariance,
}

/// Position of one tile on the level-0 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub grid_x: u32,
    pub grid_y: u32,
    pub origin_x: u32,
    pub origin_y: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileQc {
    pub tissue_fraction: f64,
    pub roi_coverage: f64,
    pub exclude_coverage: f64,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

/// One planned tile with its QC outcome and, when kept, its processed pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub raw_size_px: u32,
    pub out_size_px: u32,
    pub label: ClassLabel,
    pub qc: TileQc,
    /// Block index into `tiles.bin`; present exactly when the tile is kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<u64>,
    #[serde(skip)]
    pub pixels: Option<Raster>,
}

impl TileRecord {
    pub fn kept(&self) -> bool {
        self.qc.kept
    }

    /// Stable 64-bit identity used for augmentation streams.
    pub fn uid(&self) -> u64 {
        tile_uid(&self.slide_id, self.grid_x, self.grid_y)
    }
}

pub fn tile_uid(slide_id: &str, grid_x: u32, grid_y: u32) -> u64 {
    crate::rng::mix(&[crate::rng::hash_bytes(slide_id.as_bytes()), grid_x as u64, grid_y as u64])
}

/// Gate, QC and preprocessing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilerParams {
    pub tile_size: u32,
    pub out_size: u32,
    /// Minimum ROI coverage; only applied when the slide has ROI polygons.
    pub roi_min: f64,
    pub exclude_max: f64,
    pub qc: QcThresholds,
    pub sharpen_amount: f64,
    pub reference: ReferenceColorStats,
}

impl Default for TilerParams {
    fn default() -> Self {
        TilerParams {
            tile_size: 1024,
            out_size: 224,
            roi_min: 0.5,
            exclude_max: 0.1,
            qc: QcThresholds::default(),
            sharpen_amount: 0.5,
            reference: ReferenceColorStats::default(),
        }
    }
}

/// Slide-level metadata stamped on every tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideLabel {
    pub patient_id: String,
    pub label: ClassLabel,
}

/// Grid dimensions `(tiles_x, tiles_y)` for a level-0 size.
pub fn grid_dims(width: u32, height: u32, tile_size: u32) -> (u32, u32) {
    (width / tile_size, height / tile_size)
}

/// All full `tile_size` squares on level 0, in row-major order.
pub fn plan_grid(slide: &SlideImage, tile_size: u32) -> Result<Vec<GridPos>> {
    let (width, height) = slide.dimensions();
    if tile_size == 0 || width < tile_size || height < tile_size {
        return Err(TilerError::SlideTooSmall {
            width,
            height,
            tile: tile_size,
        });
    }
    let (nx, ny) = grid_dims(width, height, tile_size);
    Ok((0..ny)
        .flat_map(|gy| {
            (0..nx).map(move |gx| GridPos {
                grid_x: gx,
                grid_y: gy,
                origin_x: gx * tile_size,
                origin_y: gy * tile_size,
            })
        })
        .collect())
}

/// Runs the full tile pipeline for one grid position.
pub fn extract_tile(
    slide: &SlideImage,
    pos: GridPos,
    ann: &AnnotationSet,
    meta: &SlideLabel,
    params: &TilerParams,
) -> Result<TileRecord> {
    let ts = params.tile_size;
    let raw = Raster::new(ts, ts, slide.read_region(0, pos.origin_x, pos.origin_y, ts, ts)?);

    let rect = (pos.origin_x as f64, pos.origin_y as f64, ts as f64, ts as f64);
    let roi_coverage = coverage_fraction(ann, Label::Roi, rect);
    let exclude_coverage = coverage_fraction(ann, Label::Exclude, rect);
    let qc = qc_tile(&raw, &params.qc);

    let reject_reason = if exclude_coverage > params.exclude_max {
        Some(RejectReason::Excluded)
    } else if ann.has_label(Label::Roi) && roi_coverage < params.roi_min {
        Some(RejectReason::NotRoi)
    } else {
        match qc.verdict {
            QcVerdict::Background => Some(RejectReason::Background),
            QcVerdict::LowVariance => Some(RejectReason::LowVariance),
            QcVerdict::Pass => None,
        }
    };

    let pixels = reject_reason.is_none().then(|| {
        let small = resize_bilinear(&raw, params.out_size, params.out_size);
        let normalized = normalize_color(&small, &params.reference);
        sharpen(&normalized, params.sharpen_amount)
    });

    Ok(TileRecord {
        slide_id: slide.slide_id().to_string(),
        patient_id: meta.patient_id.clone(),
        grid_x: pos.grid_x,
        grid_y: pos.grid_y,
        origin_x: pos.origin_x,
        origin_y: pos.origin_y,
        raw_size_px: ts,
        out_size_px: params.out_size,
        label: meta.label,
        qc: TileQc {
            tissue_fraction: qc.tissue_fraction,
            roi_coverage,
            exclude_coverage,
            kept: reject_reason.is_none(),
            reject_reason,
        },
        block: None,
        pixels,
    })
}

/// Extracts every planned tile of a slide on the current rayon pool.
/// Output order is the plan order regardless of completion order.
pub fn extract_all(
    slide: &SlideImage,
    ann: &AnnotationSet,
    meta: &SlideLabel,
    params: &TilerParams,
) -> Result<Vec<TileRecord>> {
    let plan = plan_grid(slide, params.tile_size)?;
    plan.par_iter()
        .map(|&pos| extract_tile(slide, pos, ann, meta, params))
        .collect()
}
