//! Output artifacts: slide heatmaps, histograms, ROC and metric tables.
//!
//! Every file is written under a temporary name and renamed into place,
//! so readers never see partial artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{Histogram, SlideReport};
use crate::metrics::{roc_csv, ConfusionMatrix, RocCurve, Scores};
use crate::tiler::{ClassLabel, Raster};

pub const ORANGE: [u8; 3] = [230, 120, 30];
pub const BLUE: [u8; 3] = [40, 90, 200];
pub const WHITE: [u8; 3] = [255, 255, 255];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("thumbnail {thumb_w}x{thumb_h} is not proportional to a {grid_w}x{grid_h} grid")]
    DimMismatch {
        thumb_w: u32,
        thumb_h: u32,
        grid_w: usize,
        grid_h: usize,
    },
    #[error("{path}: {message}")]
    Encode { path: PathBuf, message: String },
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    [0, 1, 2].map(|c| (a[c] as f64 + (b[c] as f64 - a[c] as f64) * t).round() as u8)
}

/// Blue at 0, white at 0.5, orange at 1.
pub fn diverging(p: f64) -> [u8; 3] {
    let p = p.clamp(0.0, 1.0);
    if p < 0.5 {
        lerp(BLUE, WHITE, p / 0.5)
    } else {
        lerp(WHITE, ORANGE, (p - 0.5) / 0.5)
    }
}

/// Paints each grid cell with its probability colour; cells without a
/// kept tile leave the thumbnail visible.
pub fn render_slide_heatmap(thumb: &Raster, grid: &[Vec<Option<f64>>]) -> Result<Raster> {
    let gh = grid.len();
    let gw = grid.first().map_or(0, Vec::len);
    let mismatch = ReportError::DimMismatch {
        thumb_w: thumb.width,
        thumb_h: thumb.height,
        grid_w: gw,
        grid_h: gh,
    };
    if gh == 0
        || gw == 0
        || grid.iter().any(|r| r.len() != gw)
        || (thumb.width as usize) < gw
        || (thumb.height as usize) < gh
        || thumb.width as usize * gh != thumb.height as usize * gw
    {
        return Err(mismatch);
    }
    let mut out = thumb.clone();
    let (w, h) = (thumb.width as usize, thumb.height as usize);
    for y in 0..h {
        let gy = y * gh / h;
        for x in 0..w {
            if let Some(p) = grid[gy][x * gw / w] {
                let i = (y * w + x) * 3;
                out.data[i..i + 3].copy_from_slice(&diverging(p));
            }
        }
    }
    Ok(out)
}

/// `bin_lo,bin_hi,count` rows.
pub fn render_histogram(hist: &Histogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in hist.counts.iter().enumerate() {
        let (lo, hi) = hist.edges(i);
        s.push_str(&format!("{lo:.2},{hi:.2},{c}\n"));
    }
    s
}

pub fn parse_histogram(csv_text: &str) -> Option<Histogram> {
    let mut counts = Vec::new();
    for line in csv_text.lines().skip(1) {
        counts.push(line.rsplit(',').next()?.parse().ok()?);
    }
    Some(Histogram { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileLevel {
    pub n_tiles: u64,
    pub confusion: ConfusionMatrix,
    pub scores: Scores,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideOutcome {
    pub slide_id: String,
    pub n_tiles: usize,
    pub mean_prob: f64,
    pub decision: ClassLabel,
    pub truth: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl Timestamps {
    pub fn now() -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub threshold: f64,
    pub tile_level: TileLevel,
    pub slide_level: Vec<SlideOutcome>,
    pub n_correct_slides: usize,
    pub n_slides: usize,
    /// Kept out of `metrics.json` so reruns are byte-identical.
    #[serde(skip)]
    pub timestamps: Timestamps,
}

impl EvalReport {
    pub fn new(config_digest: String, threshold: f64, tile_level: TileLevel, slide_level: Vec<SlideOutcome>) -> Self {
        let n_correct_slides = slide_level.iter().filter(|s| s.decision == s.truth).count();
        EvalReport {
            config_digest,
            threshold,
            tile_level,
            n_slides: slide_level.len(),
            slide_level,
            n_correct_slides,
            timestamps: Timestamps::default(),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.5}"))
}

pub fn summary_text(e: &EvalReport) -> String {
    let t = &e.tile_level;
    let mut s = String::new();
    s.push_str(&format!("config digest: {}\n", e.config_digest));
    s.push_str(&format!(
        "started: {} (unix)  finished: {} (unix)\n\n",
        e.timestamps.started_unix, e.timestamps.finished_unix
    ));
    s.push_str(&format!("tile level (TEST, n = {})\n", t.n_tiles));
    let cm = &t.confusion;
    s.push_str(&format!("  confusion: tn {} fp {} fn {} tp {}\n", cm.tn, cm.fp, cm.fn_, cm.tp));
    s.push_str(&format!(
        "  accuracy {}  precision {}  recall {}  f1 {}  auroc {}\n\n",
        fmt_opt(t.scores.accuracy),
        fmt_opt(t.scores.precision),
        fmt_opt(t.scores.recall),
        fmt_opt(t.scores.f1),
        fmt_opt(t.auc)
    ));
    s.push_str(&format!(
        "slide level (HELDOUT_WSI): {}/{} correct at p >= {}\n",
        e.n_correct_slides, e.n_slides, e.threshold
    ));
    for o in &e.slide_level {
        // derived Debug ignores width, so pad a rendered string
        let decision = format!("{:?}", o.decision);
        s.push_str(&format!(
            "  {:<24} tiles {:>5}  mean {:.4}  decision {decision:<15} truth {:?}\n",
            o.slide_id, o.n_tiles, o.mean_prob, o.truth
        ));
    }
    s
}

pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    format!(
        "truth,predicted_non_progressor,predicted_progressor\nNON_PROGRESSOR,{},{}\nPROGRESSOR,{},{}\n",
        cm.tn, cm.fp, cm.fn_, cm.tp
    )
}

/// Writes `bytes` to `path` through a temporary sibling.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let res = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(io_err(path))
}

pub fn encode_png(img: &Raster) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    image::write_buffer_with_format(
        &mut std::io::Cursor::new(&mut buf),
        &img.data,
        img.width,
        img.height,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| ReportError::Encode {
        path: PathBuf::from("<png>"),
        message: e.to_string(),
    })?;
    Ok(buf)
}

pub fn write_png(path: &Path, img: &Raster) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|e| ReportError::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(Raster::new(img.width(), img.height(), img.into_raw()))
}

/// Per-slide artifacts for one report: `report.json`, `histogram.csv` and,
/// given a thumbnail, `heatmap.png`.
pub fn slide_files(report: &SlideReport, heatmap: Option<&Raster>) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let dir = PathBuf::from("slides").join(&report.slide_id);
    let mut files = vec![
        (
            dir.join("report.json"),
            serde_json::to_vec_pretty(report).expect("report serializes"),
        ),
        (dir.join("histogram.csv"), render_histogram(&report.histogram).into_bytes()),
    ];
    if let Some(img) = heatmap {
        files.push((dir.join("heatmap.png"), encode_png(img)?));
    }
    Ok(files)
}

/// Writes `metrics.json`, `confusion.csv`, `roc.csv` (when defined),
/// `summary.txt` and the per-slide files. Everything is staged in a hidden
/// directory first; a failure leaves no artifacts behind.
pub fn write_eval_report(
    eval: &EvalReport,
    roc: Option<&RocCurve>,
    slides: &[(SlideReport, Option<Raster>)],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        (
            "metrics.json".into(),
            serde_json::to_vec_pretty(eval).expect("eval serializes"),
        ),
        ("confusion.csv".into(), confusion_csv(&eval.tile_level.confusion).into_bytes()),
        ("summary.txt".into(), summary_text(eval).into_bytes()),
    ];
    if let Some(r) = roc {
        files.push(("roc.csv".into(), roc_csv(r).into_bytes()));
    }
    for (report, heat) in slides {
        files.extend(slide_files(report, heat.as_ref())?);
    }
    commit_files(dir, &files)
}

/// Stages `files` (relative paths) under `dir` and moves them into place.
pub fn commit_files(dir: &Path, files: &[(PathBuf, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    let staging = dir.join(format!(".staging-{}", std::process::id()));
    let stage = || -> Result<()> {
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        for (rel, bytes) in files {
            let p = staging.join(rel);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        Ok(())
    };
    if let Err(e) = stage() {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    let mut out = Vec::with_capacity(files.len());
    for (rel, _) in files {
        let (from, to) = (staging.join(rel), dir.join(rel));
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::rename(&from, &to).map_err(io_err(&to))?;
        out.push(to);
    }
    let _ = fs::remove_dir_all(&staging);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::aggregate;
    use crate::inference::TileProb;
    use crate::metrics::scores;

    fn eval_fixture() -> EvalReport {
        let cm = ConfusionMatrix::new(19_773, 484, 374, 19_883);
        let tile = TileLevel {
            n_tiles: cm.total(),
            confusion: cm,
            scores: scores(&cm),
            auc: None,
        };
        let slides = vec![
            SlideOutcome {
                slide_id: "a".into(),
                n_tiles: 3,
                mean_prob: 0.9915,
                decision: ClassLabel::Progressor,
                truth: ClassLabel::Progressor,
            },
            SlideOutcome {
                slide_id: "b".into(),
                n_tiles: 2,
                mean_prob: 0.6,
                decision: ClassLabel::Progressor,
                truth: ClassLabel::NonProgressor,
            },
        ];
        EvalReport::new("abc".into(), 0.5, tile, slides)
    }

    #[test]
    fn uniform_grids_paint_uniformly() {
        let thumb = Raster::filled(8, 4, [10, 20, 30]);
        let ones = vec![vec![Some(1.0); 4]; 2];
        let img = render_slide_heatmap(&thumb, &ones).unwrap();
        assert!(img.data.chunks(3).all(|p| p == ORANGE));
        let zeros = vec![vec![Some(0.0); 4]; 2];
        let img = render_slide_heatmap(&thumb, &zeros).unwrap();
        assert!(img.data.chunks(3).all(|p| p == BLUE));
        assert_eq!(diverging(0.5), WHITE);
        assert!(render_slide_heatmap(&Raster::filled(8, 3, [0; 3]), &ones).is_err());
    }

    #[test]
    fn checkerboard_cells_follow_geometry() {
        let (gw, gh, cell) = (5usize, 3usize, 6u32);
        let grid: Vec<Vec<Option<f64>>> = (0..gh)
            .map(|y| (0..gw).map(|x| if (x + y) % 2 == 0 { Some(1.0) } else { Some(0.0) }).collect())
            .collect();
        let thumb = Raster::filled(gw as u32 * cell, gh as u32 * cell, [0, 0, 0]);
        let img = render_slide_heatmap(&thumb, &grid).unwrap();
        for y in 0..img.height {
            for x in 0..img.width {
                let (cx, cy) = ((x / cell) as usize, (y / cell) as usize);
                let want = if (cx + cy) % 2 == 0 { ORANGE } else { BLUE };
                assert_eq!(img.pixel(x, y), want, "({x}, {y})");
            }
        }
    }

    #[test]
    fn absent_cells_keep_thumbnail() {
        let thumb = Raster::filled(4, 2, [7, 8, 9]);
        let grid = vec![vec![None, Some(1.0)]];
        let img = render_slide_heatmap(&thumb, &grid).unwrap();
        assert_eq!(img.pixel(0, 0), [7, 8, 9]);
        assert_eq!(img.pixel(3, 1), ORANGE);
        assert_eq!(thumb, Raster::filled(4, 2, [7, 8, 9]));
    }

    #[test]
    fn histogram_csv() {
        let tiles = (0..10).map(|i| TileProb { grid_x: i, grid_y: 0, prob: 0.99 }).collect();
        let r = aggregate("s", (10, 1), tiles, None, 0.5).unwrap();
        let csv = render_histogram(&r.histogram);
        assert_eq!(csv.lines().count(), 21);
        assert!(csv.ends_with("0.95,1.00,10\n"));
        assert_eq!(parse_histogram(&csv).unwrap(), r.histogram);
        let empty = render_histogram(&Histogram::new(std::iter::empty(), 20));
        assert!(empty.lines().skip(1).all(|l| l.ends_with(",0")));
    }

    #[test]
    fn uniform_probabilities_fill_bins_evenly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 20_000;
        let h = Histogram::new((0..n).map(|_| rng.gen::<f64>()), 20);
        // multinomial: each count ~ Binomial(n, 1/20)
        let mean = n as f64 / 20.0;
        let sd = (n as f64 * 0.05 * 0.95).sqrt();
        assert!(h.counts.iter().all(|&c| (c as f64 - mean).abs() <= 3.0 * sd), "{:?}", h.counts);
    }

    #[test]
    fn eval_report_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = eval_fixture();
        e.timestamps = Timestamps {
            started_unix: 1,
            finished_unix: 2,
        };
        let tiles = vec![TileProb { grid_x: 0, grid_y: 0, prob: 0.9 }];
        let slide = aggregate("a", (1, 1), tiles, None, 0.5).unwrap();
        let thumb = Raster::filled(4, 4, [1, 2, 3]);
        let written = write_eval_report(&e, None, &[(slide.clone(), Some(thumb))], dir.path()).unwrap();
        assert_eq!(written.len(), 6);
        let text = fs::read_to_string(dir.path().join("metrics.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let acc = v["tile_level"]["scores"]["accuracy"].as_f64().unwrap();
        assert!((acc - 0.97882).abs() <= 5e-6);
        let mut back: EvalReport = serde_json::from_str(&text).unwrap();
        back.timestamps = e.timestamps;
        assert_eq!(back, e);
        assert_eq!(e.n_correct_slides, 1);
        let r = crate::inference::read_report(dir.path().join("slides/a/report.json")).unwrap();
        assert_eq!(r, slide);
        assert_eq!(read_png(&dir.path().join("slides/a/heatmap.png")).unwrap().width, 4);

        // a rerun with different timestamps only changes summary.txt
        let before = fs::read(dir.path().join("metrics.json")).unwrap();
        e.timestamps.finished_unix = 99;
        write_eval_report(&e, None, &[(slide, None)], dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("metrics.json")).unwrap(), before);
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with('.'))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn unwritable_target_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("out");
        fs::write(&blocker, b"a file, not a directory").unwrap();
        let e = eval_fixture();
        assert!(matches!(write_eval_report(&e, None, &[], &blocker), Err(ReportError::Io { .. })));
        assert_eq!(fs::read(&blocker).unwrap(), b"a file, not a directory");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
