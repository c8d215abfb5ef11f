//! Raw-slide directory: `meta.json` + `level_<i>.rgb` planes.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Level, Result, SlideError};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    slide_id: String,
    levels: Vec<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mpp: Option<f64>,
}

#[derive(Debug, Clone)]
pub(super) struct RawSource {
    planes: Vec<PathBuf>,
}

pub(super) fn open(dir: &Path) -> Result<(String, Vec<Level>, Option<f64>, RawSource)> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(SlideError::UnsupportedFormat(format!(
            "{} is a directory without meta.json",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&meta_path).map_err(|e| SlideError::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text)
        .map_err(|e| SlideError::CorruptHeader(format!("{}: {e}", meta_path.display())))?;
    if let Some(mpp) = meta.mpp {
        if !(mpp.is_finite() && mpp > 0.0) {
            return Err(SlideError::CorruptHeader(format!("mpp must be positive, got {mpp}")));
        }
    }
    let mut planes = Vec::with_capacity(meta.levels.len());
    for (i, lv) in meta.levels.iter().enumerate() {
        let p = dir.join(format!("level_{i}.rgb"));
        let len = std::fs::metadata(&p).map_err(|e| SlideError::io(&p, e))?.len();
        let expected = lv.width as u64 * lv.height as u64 * 3;
        if len != expected {
            return Err(SlideError::CorruptHeader(format!(
                "{} holds {len} bytes, level table expects {expected}",
                p.display()
            )));
        }
        planes.push(p);
    }
    Ok((meta.slide_id, meta.levels, meta.mpp, RawSource { planes }))
}

impl RawSource {
    pub(super) fn read(&self, level: usize, lv: &Level, x: u32, y: u32, w: u32, h: u32) -> Result<Vec<u8>> {
        let path = &self.planes[level];
        let mut f = File::open(path).map_err(|e| SlideError::io(path, e))?;
        let stride = lv.width as u64 * 3;
        let row_bytes = w as usize * 3;
        let mut out = vec![0u8; row_bytes * h as usize];
        if x == 0 && w == lv.width {
            f.seek(SeekFrom::Start(y as u64 * stride))
                .and_then(|_| f.read_exact(&mut out))
                .map_err(|e| SlideError::io(path, e))?;
            return Ok(out);
        }
        for (r, chunk) in out.chunks_exact_mut(row_bytes).enumerate() {
            let off = (y as u64 + r as u64) * stride + x as u64 * 3;
            f.seek(SeekFrom::Start(off))
                .and_then(|_| f.read_exact(chunk))
                .map_err(|e| SlideError::io(path, e))?;
        }
        Ok(out)
    }
}

/// Writes a raw-slide directory. Downsamples are derived from level widths.
pub fn write_raw_slide(
    dir: impl AsRef<Path>,
    slide_id: &str,
    mpp: Option<f64>,
    planes: &[(u32, u32, &[u8])],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| SlideError::io(dir, e))?;
    let Some(&(w0, _, _)) = planes.first() else {
        return Err(SlideError::CorruptHeader("no levels".into()));
    };
    let mut levels = Vec::with_capacity(planes.len());
    for (i, &(w, h, px)) in planes.iter().enumerate() {
        if px.len() != w as usize * h as usize * 3 {
            return Err(SlideError::CorruptHeader(format!("level {i} buffer has wrong size")));
        }
        levels.push(Level {
            width: w,
            height: h,
            downsample: w0 as f64 / w as f64,
        });
        let p = dir.join(format!("level_{i}.rgb"));
        let mut f = File::create(&p).map_err(|e| SlideError::io(&p, e))?;
        f.write_all(px).map_err(|e| SlideError::io(&p, e))?;
    }
    super::validate_levels(&levels)?;
    let meta = Meta {
        slide_id: slide_id.to_string(),
        levels,
        mpp,
    };
    let p = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&p, text).map_err(|e| SlideError::io(&p, e))?;
    Ok(())
}
