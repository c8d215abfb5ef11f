//! Per-slide tile store: `tiles.jsonl` (one [`TileRecord`] per line, all
//! planned tiles), `tiles.bin` (RGB8 blocks of the kept tiles, in jsonl
//! order) and `slide.json` (slide geometry and label).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassLabel, Raster, Result, TileRecord, TilerError};

pub const RECORDS_FILE: &str = "tiles.jsonl";
pub const PIXELS_FILE: &str = "tiles.bin";
pub const INFO_FILE: &str = "slide.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideInfo {
    pub slide_id: String,
    pub patient_id: String,
    pub label: ClassLabel,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub out_size: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
}

#[derive(Debug, Clone)]
pub struct TileStore {
    pub dir: PathBuf,
    pub info: SlideInfo,
    pub records: Vec<TileRecord>,
}

fn store_err(path: &Path, message: impl ToString) -> TilerError {
    TilerError::Store {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let res = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        write(&mut w)?;
        w.flush()
    });
    res.and_then(|_| std::fs::rename(&tmp, path)).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        store_err(path, e)
    })
}

/// Writes a store, assigning block indices to kept tiles in record order.
pub fn write_store(dir: impl AsRef<Path>, info: &SlideInfo, records: &mut [TileRecord]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;
    let block_len = info.out_size as usize * info.out_size as usize * 3;
    let mut next = 0u64;
    for rec in records.iter_mut() {
        rec.block = match (&rec.pixels, rec.qc.kept) {
            (Some(px), true) => {
                if px.data.len() != block_len {
                    return Err(store_err(dir, format!("tile ({}, {}) has wrong pixel size", rec.grid_x, rec.grid_y)));
                }
                next += 1;
                Some(next - 1)
            }
            (None, false) => None,
            _ => return Err(store_err(dir, "kept flag and pixel presence disagree")),
        };
    }
    write_atomic(&dir.join(PIXELS_FILE), |w| {
        for px in records.iter().filter_map(|r| r.pixels.as_ref()) {
            w.write_all(&px.data)?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join(RECORDS_FILE), |w| {
        for rec in records.iter() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join(INFO_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, info)?;
        w.write_all(b"\n")
    })
}

/// Reads store metadata; pixels stay on disk until requested.
pub fn read_store(dir: impl AsRef<Path>) -> Result<TileStore> {
    let dir = dir.as_ref();
    let info_path = dir.join(INFO_FILE);
    let info: SlideInfo = serde_json::from_reader(BufReader::new(
        File::open(&info_path).map_err(|e| store_err(&info_path, e))?,
    ))
    .map_err(|e| store_err(&info_path, e))?;
    let rec_path = dir.join(RECORDS_FILE);
    let reader = BufReader::new(File::open(&rec_path).map_err(|e| store_err(&rec_path, e))?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| store_err(&rec_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TileRecord =
            serde_json::from_str(&line).map_err(|e| store_err(&rec_path, format!("line {}: {e}", i + 1)))?;
        if rec.block.is_some() != rec.qc.kept {
            return Err(store_err(&rec_path, format!("line {}: kept flag and block disagree", i + 1)));
        }
        records.push(rec);
    }
    Ok(TileStore {
        dir: dir.to_path_buf(),
        info,
        records,
    })
}

impl TileStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<TileStore> {
        read_store(dir)
    }

    pub fn kept(&self) -> impl Iterator<Item = &TileRecord> {
        self.records.iter().filter(|r| r.qc.kept)
    }

    pub fn block_len(&self) -> usize {
        self.info.out_size as usize * self.info.out_size as usize * 3
    }

    pub fn load_block(&self, block: u64) -> Result<Raster> {
        let path = self.dir.join(PIXELS_FILE);
        let n = self.block_len();
        let mut buf = vec![0u8; n];
        File::open(&path)
            .and_then(|mut f| {
                f.seek(SeekFrom::Start(block * n as u64))?;
                f.read_exact(&mut buf)
            })
            .map_err(|e| store_err(&path, e))?;
        Ok(Raster::new(self.info.out_size, self.info.out_size, buf))
    }

    /// Kept records with their pixels attached, in store order.
    pub fn load_kept(&self) -> Result<Vec<TileRecord>> {
        let path = self.dir.join(PIXELS_FILE);
        let mut all = Vec::new();
        File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut all))
            .map_err(|e| store_err(&path, e))?;
        let n = self.block_len();
        self.kept()
            .map(|r| {
                let b = r.block.expect("kept tiles carry a block") as usize;
                let bytes = all
                    .get(b * n..(b + 1) * n)
                    .ok_or_else(|| store_err(&path, format!("block {b} missing")))?;
                let mut rec = r.clone();
                rec.pixels = Some(Raster::new(self.info.out_size, self.info.out_size, bytes.to_vec()));
                Ok(rec)
            })
            .collect()
    }
}
