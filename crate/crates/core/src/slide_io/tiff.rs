//! Baseline TIFF subset: 8-bit RGB, chunky planar layout, tiled or
//! stripped, uncompressed or deflate (zlib), little- or big-endian.
//! Every IFD in the main chain is one pyramid level.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use rayon::prelude::*;

use super::{Level, Result, SlideError};

const TAG_SUBFILE_TYPE: u16 = 254;
const TAG_WIDTH: u16 = 256;
const TAG_HEIGHT: u16 = 257;
const TAG_BITS: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_DESCRIPTION: u16 = 270;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_COUNTS: u16 = 279;
const TAG_PLANAR: u16 = 284;
const TAG_PREDICTOR: u16 = 317;
const TAG_TILE_WIDTH: u16 = 322;
const TAG_TILE_LENGTH: u16 = 323;
const TAG_TILE_OFFSETS: u16 = 324;
const TAG_TILE_COUNTS: u16 = 325;
const TAG_SAMPLE_FORMAT: u16 = 339;

const TYPE_ASCII: u16 = 2;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;

/// Chunk compression understood by the reader and writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    None,
    Deflate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u16(self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        match self {
            Endian::Little => u16::from_le_bytes(a),
            Endian::Big => u16::from_be_bytes(a),
        }
    }

    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }

    fn put_u16(self, out: &mut Vec<u8>, v: u16) {
        match self {
            Endian::Little => out.extend_from_slice(&v.to_le_bytes()),
            Endian::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }

    fn put_u32(self, out: &mut Vec<u8>, v: u32) {
        match self {
            Endian::Little => out.extend_from_slice(&v.to_le_bytes()),
            Endian::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
}

#[derive(Debug, Clone)]
struct TiffLevel {
    width: u32,
    height: u32,
    chunk_w: u32,
    chunk_h: u32,
    chunks_across: u32,
    offsets: Vec<u64>,
    counts: Vec<u64>,
    compression: Compression,
}

#[derive(Debug, Clone)]
pub(super) struct TiffSource {
    path: PathBuf,
    levels: Vec<TiffLevel>,
}

pub(super) struct Opened {
    pub slide_id: Option<String>,
    pub levels: Vec<Level>,
    pub mpp: Option<f64>,
    pub source: TiffSource,
}

enum Value {
    Ints(Vec<u64>),
    Ascii(String),
    Other,
}

fn corrupt(msg: impl Into<String>) -> SlideError {
    SlideError::CorruptHeader(msg.into())
}

fn read_at(f: &mut File, path: &Path, offset: u64, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    f.seek(SeekFrom::Start(offset))
        .and_then(|_| f.read_exact(&mut buf))
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => corrupt(format!("truncated at offset {offset}")),
            _ => SlideError::io(path, e),
        })?;
    Ok(buf)
}

fn type_size(ty: u16) -> Option<usize> {
    match ty {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

fn read_ifd(
    f: &mut File,
    path: &Path,
    endian: Endian,
    offset: u64,
    file_len: u64,
) -> Result<(HashMap<u16, Value>, u64)> {
    if offset + 2 > file_len {
        return Err(corrupt(format!("IFD offset {offset} beyond end of file")));
    }
    let n = endian.u16(&read_at(f, path, offset, 2)?) as usize;
    let raw = read_at(f, path, offset + 2, n * 12 + 4)?;
    let mut tags = HashMap::new();
    for e in raw[..n * 12].chunks_exact(12) {
        let tag = endian.u16(&e[0..2]);
        let ty = endian.u16(&e[2..4]);
        let count = endian.u32(&e[4..8]) as usize;
        let Some(sz) = type_size(ty) else {
            tags.insert(tag, Value::Other);
            continue;
        };
        let total = sz
            .checked_mul(count)
            .ok_or_else(|| corrupt(format!("tag {tag} count overflows")))?;
        let bytes = if total <= 4 {
            e[8..8 + total].to_vec()
        } else {
            let off = endian.u32(&e[8..12]) as u64;
            if off + total as u64 > file_len {
                return Err(corrupt(format!("tag {tag} data runs past end of file")));
            }
            read_at(f, path, off, total)?
        };
        let value = match ty {
            TYPE_ASCII => Value::Ascii(
                String::from_utf8_lossy(&bytes)
                    .trim_end_matches('\0')
                    .to_string(),
            ),
            1 => Value::Ints(bytes.iter().map(|&b| b as u64).collect()),
            TYPE_SHORT => Value::Ints(bytes.chunks_exact(2).map(|c| endian.u16(c) as u64).collect()),
            TYPE_LONG => Value::Ints(bytes.chunks_exact(4).map(|c| endian.u32(c) as u64).collect()),
            _ => Value::Other,
        };
        tags.insert(tag, value);
    }
    let next = endian.u32(&raw[n * 12..]) as u64;
    Ok((tags, next))
}

fn ints(tags: &HashMap<u16, Value>, tag: u16) -> Option<&[u64]> {
    match tags.get(&tag) {
        Some(Value::Ints(v)) => Some(v),
        _ => None,
    }
}

fn scalar(tags: &HashMap<u16, Value>, tag: u16) -> Option<u64> {
    ints(tags, tag).and_then(|v| v.first().copied())
}

fn required(tags: &HashMap<u16, Value>, tag: u16, name: &str) -> Result<u64> {
    scalar(tags, tag).ok_or_else(|| corrupt(format!("missing {name}")))
}

fn parse_level(tags: &HashMap<u16, Value>, file_len: u64) -> Result<TiffLevel> {
    let width = required(tags, TAG_WIDTH, "ImageWidth")? as u32;
    let height = required(tags, TAG_HEIGHT, "ImageLength")? as u32;
    if width == 0 || height == 0 {
        return Err(corrupt("zero image dimension"));
    }
    let samples = scalar(tags, TAG_SAMPLES).unwrap_or(1);
    if samples != 3 {
        return Err(SlideError::UnsupportedFormat(format!("{samples} samples per pixel")));
    }
    let bits = ints(tags, TAG_BITS).unwrap_or(&[1]);
    if bits.iter().any(|&b| b != 8) {
        return Err(SlideError::UnsupportedFormat(format!("bits per sample {bits:?}")));
    }
    let photometric = required(tags, TAG_PHOTOMETRIC, "PhotometricInterpretation")?;
    if photometric != 2 {
        return Err(SlideError::UnsupportedFormat(format!("photometric interpretation {photometric}")));
    }
    if scalar(tags, TAG_PLANAR).unwrap_or(1) != 1 {
        return Err(SlideError::UnsupportedFormat("planar (separate) sample layout".into()));
    }
    if scalar(tags, TAG_PREDICTOR).unwrap_or(1) != 1 {
        return Err(SlideError::UnsupportedFormat("predictor".into()));
    }
    if ints(tags, TAG_SAMPLE_FORMAT).is_some_and(|v| v.iter().any(|&s| s != 1)) {
        return Err(SlideError::UnsupportedFormat("non-integer sample format".into()));
    }
    let compression = match scalar(tags, TAG_COMPRESSION).unwrap_or(1) {
        1 => Compression::None,
        8 | 32946 => Compression::Deflate,
        other => {
            return Err(SlideError::UnsupportedFormat(format!("compression {other}")));
        }
    };
    let (chunk_w, chunk_h, offsets, counts) = if tags.contains_key(&TAG_TILE_WIDTH) {
        let tw = required(tags, TAG_TILE_WIDTH, "TileWidth")? as u32;
        let th = required(tags, TAG_TILE_LENGTH, "TileLength")? as u32;
        let offs = ints(tags, TAG_TILE_OFFSETS).ok_or_else(|| corrupt("missing TileOffsets"))?;
        let cnts = ints(tags, TAG_TILE_COUNTS).ok_or_else(|| corrupt("missing TileByteCounts"))?;
        (tw, th, offs.to_vec(), cnts.to_vec())
    } else {
        let rps = scalar(tags, TAG_ROWS_PER_STRIP).unwrap_or(height as u64).min(height as u64) as u32;
        let offs = ints(tags, TAG_STRIP_OFFSETS).ok_or_else(|| corrupt("missing StripOffsets"))?;
        let cnts = ints(tags, TAG_STRIP_COUNTS).ok_or_else(|| corrupt("missing StripByteCounts"))?;
        (width, rps, offs.to_vec(), cnts.to_vec())
    };
    if chunk_w == 0 || chunk_h == 0 {
        return Err(corrupt("zero chunk dimension"));
    }
    let across = width.div_ceil(chunk_w);
    let down = height.div_ceil(chunk_h);
    let n = across as usize * down as usize;
    if offsets.len() != n || counts.len() != n {
        return Err(corrupt(format!(
            "expected {n} chunks, found {} offsets and {} byte counts",
            offsets.len(),
            counts.len()
        )));
    }
    if offsets.iter().zip(&counts).any(|(&o, &c)| o + c > file_len) {
        return Err(corrupt("chunk data runs past end of file"));
    }
    Ok(TiffLevel {
        width,
        height,
        chunk_w,
        chunk_h,
        chunks_across: across,
        offsets,
        counts,
        compression,
    })
}

fn parse_description(desc: &str) -> (Option<String>, Option<f64>) {
    let mut slide_id = None;
    let mut mpp = None;
    for field in desc.split(['|', '\n']) {
        let Some((k, v)) = field.split_once('=') else { continue };
        let (k, v) = (k.trim(), v.trim());
        if k.eq_ignore_ascii_case("mpp") {
            mpp = v.parse::<f64>().ok().filter(|m| m.is_finite() && *m > 0.0);
        } else if k.eq_ignore_ascii_case("slide_id") && !v.is_empty() {
            slide_id = Some(v.to_string());
        }
    }
    (slide_id, mpp)
}

pub(super) fn open(path: &Path) -> Result<Opened> {
    let mut f = File::open(path).map_err(|e| SlideError::io(path, e))?;
    let file_len = f.metadata().map_err(|e| SlideError::io(path, e))?.len();
    if file_len < 8 {
        return Err(SlideError::UnsupportedFormat(format!("{} is not a TIFF", path.display())));
    }
    let head = read_at(&mut f, path, 0, 8)?;
    let endian = match &head[0..2] {
        b"II" => Endian::Little,
        b"MM" => Endian::Big,
        _ => {
            return Err(SlideError::UnsupportedFormat(format!(
                "{} has no TIFF byte-order mark",
                path.display()
            )))
        }
    };
    match endian.u16(&head[2..4]) {
        42 => {}
        43 => return Err(SlideError::UnsupportedFormat("BigTIFF".into())),
        m => return Err(SlideError::UnsupportedFormat(format!("TIFF magic {m}"))),
    }
    let mut next = endian.u32(&head[4..8]) as u64;
    let mut seen = Vec::new();
    let mut levels = Vec::new();
    let mut slide_id = None;
    let mut mpp = None;
    while next != 0 {
        if seen.contains(&next) || seen.len() > 64 {
            return Err(corrupt("IFD chain loops"));
        }
        seen.push(next);
        let (tags, n) = read_ifd(&mut f, path, endian, next, file_len)?;
        if levels.is_empty() {
            if let Some(Value::Ascii(d)) = tags.get(&TAG_DESCRIPTION) {
                (slide_id, mpp) = parse_description(d);
            }
        }
        levels.push(parse_level(&tags, file_len)?);
        next = n;
    }
    if levels.is_empty() {
        return Err(corrupt("no image directories"));
    }
    let w0 = levels[0].width as f64;
    let table = levels
        .iter()
        .map(|l| Level {
            width: l.width,
            height: l.height,
            downsample: w0 / l.width as f64,
        })
        .collect();
    Ok(Opened {
        slide_id,
        levels: table,
        mpp,
        source: TiffSource {
            path: path.to_path_buf(),
            levels,
        },
    })
}

impl TiffSource {
    fn decode_chunk(&self, f: &mut File, lv: &TiffLevel, index: usize, rows: u32) -> Result<Vec<u8>> {
        let raw = read_at(f, &self.path, lv.offsets[index], lv.counts[index] as usize)?;
        let need = lv.chunk_w as usize * rows as usize * 3;
        let data = match lv.compression {
            Compression::None => raw,
            Compression::Deflate => {
                let mut out = Vec::with_capacity(need);
                ZlibDecoder::new(&raw[..])
                    .read_to_end(&mut out)
                    .map_err(|e| corrupt(format!("chunk {index}: deflate stream: {e}")))?;
                out
            }
        };
        if data.len() < need {
            return Err(corrupt(format!(
                "chunk {index} decodes to {} bytes, need {need}",
                data.len()
            )));
        }
        Ok(data)
    }

    pub(super) fn read(&self, level: usize, x: u32, y: u32, w: u32, h: u32) -> Result<Vec<u8>> {
        let lv = &self.levels[level];
        let mut f = File::open(&self.path).map_err(|e| SlideError::io(&self.path, e))?;
        let mut out = vec![0u8; w as usize * h as usize * 3];
        let out_stride = w as usize * 3;
        for cy in y / lv.chunk_h..=(y + h - 1) / lv.chunk_h {
            for cx in x / lv.chunk_w..=(x + w - 1) / lv.chunk_w {
                let index = (cy * lv.chunks_across + cx) as usize;
                let top = cy * lv.chunk_h;
                let left = cx * lv.chunk_w;
                // tiles are always full size; the last strip may be short
                let rows = if lv.chunk_w == lv.width {
                    lv.chunk_h.min(lv.height - top)
                } else {
                    lv.chunk_h
                };
                let chunk = self.decode_chunk(&mut f, lv, index, rows)?;
                let x0 = x.max(left);
                let x1 = (x + w).min(left + lv.chunk_w).min(lv.width);
                let y0 = y.max(top);
                let y1 = (y + h).min(top + rows);
                let span = (x1 - x0) as usize * 3;
                for row in y0..y1 {
                    let src = ((row - top) * lv.chunk_w + (x0 - left)) as usize * 3;
                    let dst = (row - y) as usize * out_stride + (x0 - x) as usize * 3;
                    out[dst..dst + span].copy_from_slice(&chunk[src..src + span]);
                }
            }
        }
        Ok(out)
    }
}

/// Options for [`write_tiled_tiff`].
#[derive(Debug, Clone)]
pub struct TiffWriteOptions {
    pub tile_size: u32,
    pub compression: Compression,
    pub big_endian: bool,
    /// Stored as ImageDescription on level 0, e.g. `slide_id=S01|mpp=0.25`.
    pub description: Option<String>,
}

impl Default for TiffWriteOptions {
    fn default() -> Self {
        TiffWriteOptions {
            tile_size: 256,
            compression: Compression::Deflate,
            big_endian: false,
            description: None,
        }
    }
}

struct Entry {
    tag: u16,
    ty: u16,
    count: u32,
    payload: Vec<u8>,
}

/// Writes a tiled pyramidal TIFF.
///
/// `dims` lists `(width, height)` per level. `region(level, x, y, w, h)` must
/// return exactly `w * h * 3` bytes for the requested rectangle; edge tiles
/// are zero-padded to the full tile size. Tiles within a row are produced and
/// compressed in parallel, then written in order.
pub fn write_tiled_tiff<F>(path: impl AsRef<Path>, dims: &[(u32, u32)], opts: &TiffWriteOptions, region: F) -> Result<()>
where
    F: Fn(usize, u32, u32, u32, u32) -> Vec<u8> + Sync,
{
    let path = path.as_ref();
    let ts = opts.tile_size;
    if ts == 0 || !ts.is_multiple_of(16) {
        return Err(SlideError::UnsupportedFormat(format!("tile size {ts} is not a multiple of 16")));
    }
    if dims.is_empty() {
        return Err(corrupt("no levels"));
    }
    let endian = if opts.big_endian { Endian::Big } else { Endian::Little };
    let io = |e| SlideError::io(path, e);
    let mut file = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = Vec::with_capacity(8);
    header.extend_from_slice(if opts.big_endian { b"MM" } else { b"II" });
    endian.put_u16(&mut header, 42);
    endian.put_u32(&mut header, 0);
    file.write_all(&header).map_err(io)?;
    let mut pos: u64 = 8;
    let mut patches: Vec<(u64, u32)> = Vec::new();
    let mut link_pos: u64 = 4;

    let check = |v: u64| -> Result<u32> {
        u32::try_from(v).map_err(|_| SlideError::UnsupportedFormat("file exceeds 4 GiB classic TIFF limit".into()))
    };

    for (level, &(width, height)) in dims.iter().enumerate() {
        let across = width.div_ceil(ts);
        let down = height.div_ceil(ts);
        let mut offsets = Vec::with_capacity((across * down) as usize);
        let mut counts = Vec::with_capacity((across * down) as usize);
        for ty in 0..down {
            let chunks: Vec<Vec<u8>> = (0..across)
                .into_par_iter()
                .map(|tx| {
                    let x = tx * ts;
                    let y = ty * ts;
                    let w = ts.min(width - x);
                    let h = ts.min(height - y);
                    let px = region(level, x, y, w, h);
                    assert_eq!(px.len(), (w * h * 3) as usize, "region callback returned wrong size");
                    let mut tile = vec![0u8; (ts * ts * 3) as usize];
                    for r in 0..h as usize {
                        let dst = r * ts as usize * 3;
                        let src = r * w as usize * 3;
                        tile[dst..dst + w as usize * 3].copy_from_slice(&px[src..src + w as usize * 3]);
                    }
                    match opts.compression {
                        Compression::None => tile,
                        Compression::Deflate => {
                            let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::fast());
                            enc.write_all(&tile).expect("in-memory write");
                            enc.finish().expect("in-memory write")
                        }
                    }
                })
                .collect();
            for c in chunks {
                offsets.push(check(pos)?);
                counts.push(check(c.len() as u64)?);
                file.write_all(&c).map_err(io)?;
                pos += c.len() as u64;
            }
        }

        let mut entries = Vec::new();
        let mut long = |tag: u16, vals: &[u32]| {
            let mut payload = Vec::new();
            for &v in vals {
                endian.put_u32(&mut payload, v);
            }
            entries.push(Entry { tag, ty: TYPE_LONG, count: vals.len() as u32, payload });
        };
        long(TAG_SUBFILE_TYPE, &[u32::from(level > 0)]);
        long(TAG_WIDTH, &[width]);
        long(TAG_HEIGHT, &[height]);
        long(TAG_TILE_WIDTH, &[ts]);
        long(TAG_TILE_LENGTH, &[ts]);
        long(TAG_TILE_OFFSETS, &offsets);
        long(TAG_TILE_COUNTS, &counts);
        let mut short = |tag: u16, vals: &[u16]| {
            let mut payload = Vec::new();
            for &v in vals {
                endian.put_u16(&mut payload, v);
            }
            entries.push(Entry { tag, ty: TYPE_SHORT, count: vals.len() as u32, payload });
        };
        short(TAG_BITS, &[8, 8, 8]);
        short(
            TAG_COMPRESSION,
            &[match opts.compression {
                Compression::None => 1,
                Compression::Deflate => 8,
            }],
        );
        short(TAG_PHOTOMETRIC, &[2]);
        short(TAG_SAMPLES, &[3]);
        short(TAG_PLANAR, &[1]);
        if level == 0 {
            if let Some(desc) = &opts.description {
                let mut payload = desc.as_bytes().to_vec();
                payload.push(0);
                entries.push(Entry {
                    tag: TAG_DESCRIPTION,
                    ty: TYPE_ASCII,
                    count: payload.len() as u32,
                    payload,
                });
            }
        }
        entries.sort_by_key(|e| e.tag);

        // out-of-line payloads first, then the directory itself (word aligned)
        let mut blob = Vec::new();
        if pos % 2 == 1 {
            blob.push(0);
        }
        let mut value_fields = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.payload.len() <= 4 {
                let mut field = e.payload.clone();
                field.resize(4, 0);
                value_fields.push(field);
            } else {
                let off = check(pos + blob.len() as u64)?;
                blob.extend_from_slice(&e.payload);
                if blob.len() % 2 == 1 {
                    blob.push(0);
                }
                let mut field = Vec::with_capacity(4);
                endian.put_u32(&mut field, off);
                value_fields.push(field);
            }
        }
        let ifd_pos = pos + blob.len() as u64;
        patches.push((link_pos, check(ifd_pos)?));
        endian.put_u16(&mut blob, entries.len() as u16);
        for (e, field) in entries.iter().zip(&value_fields) {
            endian.put_u16(&mut blob, e.tag);
            endian.put_u16(&mut blob, e.ty);
            endian.put_u32(&mut blob, e.count);
            blob.extend_from_slice(field);
        }
        link_pos = pos + blob.len() as u64;
        endian.put_u32(&mut blob, 0);
        file.write_all(&blob).map_err(io)?;
        pos += blob.len() as u64;
    }

    let mut file = file.into_inner().map_err(|e| io(e.into_error()))?;
    for (at, value) in patches {
        let mut b = Vec::with_capacity(4);
        endian.put_u32(&mut b, value);
        file.seek(SeekFrom::Start(at)).and_then(|_| file.write_all(&b)).map_err(io)?;
    }
    file.flush().map_err(io)?;
    Ok(())
}

/// Writes in-memory level planes as a tiled TIFF.
pub fn write_tiff_planes(path: impl AsRef<Path>, planes: &[(u32, u32, &[u8])], opts: &TiffWriteOptions) -> Result<()> {
    let dims: Vec<(u32, u32)> = planes.iter().map(|&(w, h, _)| (w, h)).collect();
    for &(w, h, px) in planes {
        if px.len() != w as usize * h as usize * 3 {
            return Err(corrupt(format!("plane {w}x{h} has {} bytes", px.len())));
        }
    }
    write_tiled_tiff(path, &dims, opts, |level, x, y, w, h| {
        let (pw, _, px) = planes[level];
        let mut out = Vec::with_capacity((w * h * 3) as usize);
        for row in y..y + h {
            let start = (row as usize * pw as usize + x as usize) * 3;
            out.extend_from_slice(&px[start..start + w as usize * 3]);
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn description_fields() {
        assert_eq!(
            parse_description("slide_id=S7|mpp=0.25"),
            (Some("S7".to_string()), Some(0.25))
        );
        assert_eq!(parse_description("Aperio Image |MPP = 0.2520"), (None, Some(0.252)));
        assert_eq!(parse_description("nothing here"), (None, None));
    }
}
