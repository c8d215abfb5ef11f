//! Whole-slide raster access.
//!
//! A [`SlideImage`] is an immutable handle on a pyramidal RGB raster. Two
//! on-disk containers are understood:
//!
//! - a tiled (or stripped) baseline TIFF with 8-bit RGB samples, stored
//!   uncompressed or deflate-compressed, in either byte order;
//! - a raw-slide directory: `meta.json` plus one row-major `level_<i>.rgb`
//!   plane per pyramid level.
//!
//! Region reads are always expressed in the pixel grid of the requested
//! level and return exactly `w * h * 3` bytes. No pixel data is cached, so a
//! slide can be shared across threads and read concurrently.

mod annotation;
mod raw;
pub mod tiff;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotation::{coverage_fraction, load_annotations, parse_annotations, AnnotationSet, Label, Region};
pub use raw::write_raw_slide;

#[derive(Debug, Error)]
pub enum SlideError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("region ({x},{y}) {w}x{h} is outside level {level} ({level_w}x{level_h})")]
    OutOfBounds {
        level: usize,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        level_w: u32,
        level_h: u32,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("annotation parse error: {0}")]
    Parse(String),
    #[error("unknown annotation label {0:?}")]
    UnknownLabel(String),
}

impl SlideError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SlideError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SlideError>;

/// Geometry of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    #[serde(rename = "w")]
    pub width: u32,
    #[serde(rename = "h")]
    pub height: u32,
    pub downsample: f64,
}

#[derive(Debug, Clone)]
enum Source {
    Raw(raw::RawSource),
    Tiff(tiff::TiffSource),
    Memory(Arc<Vec<Vec<u8>>>),
}

/// An opened whole-slide image.
#[derive(Debug, Clone)]
pub struct SlideImage {
    slide_id: String,
    levels: Vec<Level>,
    mpp: Option<f64>,
    source: Source,
}

impl SlideImage {
    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, index: usize) -> Option<&Level> {
        self.levels.get(index)
    }

    /// Level-0 `(width, height)`.
    pub fn dimensions(&self) -> (u32, u32) {
        (self.levels[0].width, self.levels[0].height)
    }

    /// Microns per pixel at level 0, when the container records it.
    pub fn mpp(&self) -> Option<f64> {
        self.mpp
    }

    /// Builds a slide from in-memory level planes (row-major RGB8).
    ///
    /// Downsamples are derived from the level widths.
    pub fn from_planes(slide_id: impl Into<String>, planes: Vec<(u32, u32, Vec<u8>)>) -> Result<Self> {
        if planes.is_empty() {
            return Err(SlideError::CorruptHeader("no levels".into()));
        }
        let w0 = planes[0].0 as f64;
        let mut levels = Vec::with_capacity(planes.len());
        let mut data = Vec::with_capacity(planes.len());
        for (w, h, px) in planes {
            if px.len() != w as usize * h as usize * 3 {
                return Err(SlideError::CorruptHeader(format!(
                    "plane {}x{} has {} bytes",
                    w,
                    h,
                    px.len()
                )));
            }
            levels.push(Level {
                width: w,
                height: h,
                downsample: w0 / w as f64,
            });
            data.push(px);
        }
        validate_levels(&levels)?;
        Ok(SlideImage {
            slide_id: slide_id.into(),
            levels,
            mpp: None,
            source: Source::Memory(Arc::new(data)),
        })
    }

    /// Reads a `w x h` rectangle at `(x, y)` of `level` as row-major RGB8.
    pub fn read_region(&self, level: usize, x: u32, y: u32, w: u32, h: u32) -> Result<Vec<u8>> {
        let lv = self.levels.get(level).ok_or(SlideError::OutOfBounds {
            level,
            x,
            y,
            w,
            h,
            level_w: 0,
            level_h: 0,
        })?;
        let inside = w > 0
            && h > 0
            && (x as u64 + w as u64) <= lv.width as u64
            && (y as u64 + h as u64) <= lv.height as u64;
        if !inside {
            return Err(SlideError::OutOfBounds {
                level,
                x,
                y,
                w,
                h,
                level_w: lv.width,
                level_h: lv.height,
            });
        }
        match &self.source {
            Source::Raw(src) => src.read(level, lv, x, y, w, h),
            Source::Tiff(src) => src.read(level, x, y, w, h),
            Source::Memory(planes) => {
                let plane = &planes[level];
                let stride = lv.width as usize * 3;
                let mut out = Vec::with_capacity(w as usize * h as usize * 3);
                for row in y..y + h {
                    let start = row as usize * stride + x as usize * 3;
                    out.extend_from_slice(&plane[start..start + w as usize * 3]);
                }
                Ok(out)
            }
        }
    }

    /// Reads a whole level.
    pub fn read_level(&self, level: usize) -> Result<Vec<u8>> {
        let lv = *self.levels.get(level).ok_or(SlideError::OutOfBounds {
            level,
            x: 0,
            y: 0,
            w: 0,
            h: 0,
            level_w: 0,
            level_h: 0,
        })?;
        self.read_region(level, 0, 0, lv.width, lv.height)
    }

    /// Index of the smallest level whose longer side is still at least `min_side`
    /// pixels (level 0 if none is that large).
    pub fn best_level_for(&self, min_side: u32) -> usize {
        self.levels
            .iter()
            .enumerate()
            .rev()
            .find(|(_, l)| l.width.max(l.height) >= min_side)
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Opens a slide container: a raw-slide directory or a TIFF file.
pub fn open_slide(path: impl AsRef<Path>) -> Result<SlideImage> {
    let path = path.as_ref();
    let meta = std::fs::metadata(path).map_err(|e| SlideError::io(path, e))?;
    let slide = if meta.is_dir() {
        let (slide_id, levels, mpp, src) = raw::open(path)?;
        SlideImage {
            slide_id,
            levels,
            mpp,
            source: Source::Raw(src),
        }
    } else {
        let opened = tiff::open(path)?;
        let slide_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        SlideImage {
            slide_id: opened.slide_id.unwrap_or(slide_id),
            levels: opened.levels,
            mpp: opened.mpp,
            source: Source::Tiff(opened.source),
        }
    };
    validate_levels(&slide.levels)?;
    Ok(slide)
}

/// Checks the level table: level 0 at downsample 1, strictly increasing
/// downsamples, and dimensions within one pixel of `level0 / downsample`.
pub fn validate_levels(levels: &[Level]) -> Result<()> {
    let Some(first) = levels.first() else {
        return Err(SlideError::CorruptHeader("no levels".into()));
    };
    if first.width == 0 || first.height == 0 {
        return Err(SlideError::CorruptHeader("empty level 0".into()));
    }
    if (first.downsample - 1.0).abs() > 1e-9 {
        return Err(SlideError::CorruptHeader(format!(
            "level 0 downsample is {}",
            first.downsample
        )));
    }
    for (i, pair) in levels.windows(2).enumerate() {
        let (prev, cur) = (pair[0], pair[1]);
        if !(cur.downsample.is_finite() && cur.downsample > prev.downsample) {
            return Err(SlideError::CorruptHeader(format!(
                "downsample of level {} ({}) does not exceed level {} ({})",
                i + 1,
                cur.downsample,
                i,
                prev.downsample
            )));
        }
    }
    for (i, lv) in levels.iter().enumerate() {
        let ew = first.width as f64 / lv.downsample;
        let eh = first.height as f64 / lv.downsample;
        if (lv.width as f64 - ew).abs() > 1.0 || (lv.height as f64 - eh).abs() > 1.0 {
            return Err(SlideError::CorruptHeader(format!(
                "level {} is {}x{}, expected about {:.1}x{:.1}",
                i, lv.width, lv.height, ew, eh
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_plane(w: u32, h: u32) -> Vec<u8> {
        let mut px = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        px
    }

    #[test]
    fn memory_slide_reads_regions() {
        let slide = SlideImage::from_planes("m", vec![(16, 8, gradient_plane(16, 8))]).unwrap();
        let px = slide.read_region(0, 3, 2, 2, 1).unwrap();
        assert_eq!(px, vec![3, 2, 5, 4, 2, 6]);
        assert!(matches!(
            slide.read_region(0, 15, 0, 2, 1),
            Err(SlideError::OutOfBounds { .. })
        ));
        assert!(matches!(
            slide.read_region(1, 0, 0, 1, 1),
            Err(SlideError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn level_table_validation() {
        let ok = [
            Level { width: 8192, height: 8192, downsample: 1.0 },
            Level { width: 2048, height: 2048, downsample: 4.0 },
        ];
        assert!(validate_levels(&ok).is_ok());
        let not_increasing = [
            Level { width: 100, height: 100, downsample: 1.0 },
            Level { width: 100, height: 100, downsample: 1.0 },
        ];
        assert!(matches!(validate_levels(&not_increasing), Err(SlideError::CorruptHeader(_))));
        let off_by_two = [
            Level { width: 100, height: 100, downsample: 1.0 },
            Level { width: 52, height: 50, downsample: 2.0 },
        ];
        assert!(matches!(validate_levels(&off_by_two), Err(SlideError::CorruptHeader(_))));
        let odd = [
            Level { width: 101, height: 99, downsample: 1.0 },
            Level { width: 50, height: 49, downsample: 2.0 },
        ];
        assert!(validate_levels(&odd).is_ok());
    }
}
