//! Procedural slide corpus with class-correlated texture.
//!
//! Each slide is an elliptical tissue section on a white background. Tissue
//! is two-octave value noise mapped between eosin pink and hematoxylin
//! purple: progressor slides get a fine, high-frequency texture,
//! non-progressor slides a coarse, smooth one. Every slide has an ROI
//! polygon inset from the tissue border and a dark EXCLUDE rectangle.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{write_slides_csv, SlideEntry};
use crate::dataset::{write_patients_csv, PatientRecord};
use crate::rng::{domain, mix, splitmix64, stream_rng};
use crate::slide_io::tiff::{write_tiled_tiff, Compression, TiffWriteOptions};
use crate::slide_io::{AnnotationSet, Label, Region, SlideError};
use crate::tiler::ClassLabel;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid synth settings: {0}")]
    Invalid(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub slides_per_class: usize,
    pub width: u32,
    pub height: u32,
    /// Pyramid levels; each divides the previous by 4.
    pub levels: usize,
    pub tiff_tile: u32,
    pub mpp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            slides_per_class: 20,
            width: 2048,
            height: 2048,
            levels: 3,
            tiff_tile: 256,
            mpp: 0.25,
            seed: 0,
        }
    }
}

/// Per-slide rendering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideStyle {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Lattice spacing of the fine octave, in level-0 pixels.
    pub cell: f64,
    pub contrast: f64,
    pub tint: [f64; 3],
    /// Tissue ellipse centre and radii.
    pub ellipse: [f64; 4],
    /// EXCLUDE rectangle `x, y, w, h`.
    pub exclude: [f64; 4],
}

const PINK: [f64; 3] = [232.0, 160.0, 205.0];
const PURPLE: [f64; 3] = [105.0, 55.0, 150.0];
const CRUSH: [f64; 3] = [70.0, 40.0, 60.0];

impl SlideStyle {
    pub fn random(label: ClassLabel, width: u32, height: u32, seed: u64) -> Self {
        let mut rng = stream_rng(&[domain::SYNTH, seed, 0x57]);
        let cell = match label {
            ClassLabel::Progressor => rng.gen_range(2.5..4.5),
            ClassLabel::NonProgressor => rng.gen_range(24.0..40.0),
        };
        let (w, h) = (width as f64, height as f64);
        let ellipse = [
            w * rng.gen_range(0.47..0.53),
            h * rng.gen_range(0.47..0.53),
            w * rng.gen_range(0.38..0.44),
            h * rng.gen_range(0.38..0.44),
        ];
        let (ew, eh) = (w * 0.12, h * 0.12);
        let exclude = [
            ellipse[0] + rng.gen_range(-0.15..0.05) * w,
            ellipse[1] + rng.gen_range(-0.15..0.05) * h,
            ew,
            eh,
        ];
        SlideStyle {
            seed,
            width,
            height,
            cell,
            contrast: rng.gen_range(0.8..1.0),
            tint: [rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0)],
            ellipse,
            exclude,
        }
    }

    fn in_tissue(&self, x: f64, y: f64) -> bool {
        let [cx, cy, rx, ry] = self.ellipse;
        let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
        dx * dx + dy * dy <= 1.0
    }

    fn in_exclude(&self, x: f64, y: f64) -> bool {
        let [ex, ey, ew, eh] = self.exclude;
        x >= ex && x < ex + ew && y >= ey && y < ey + eh
    }

    /// Level-0 colour at pixel centre `(x, y)`.
    pub fn pixel(&self, x: f64, y: f64) -> [u8; 3] {
        let jitter = (hash01(self.seed ^ 0xB6, x as i64, y as i64) - 0.5) * 6.0;
        if !self.in_tissue(x, y) {
            let v = (244.0 + jitter).round() as u8;
            return [v, v, v];
        }
        if self.in_exclude(x, y) {
            return CRUSH.map(|c| (c + jitter * 2.0).round().clamp(0.0, 255.0) as u8);
        }
        let n = 0.65 * value_noise(self.seed, x, y, self.cell) + 0.35 * value_noise(self.seed ^ 0x9E, x, y, 2.0 * self.cell);
        let t = (0.5 + (n - 0.5) * 2.2 * self.contrast).clamp(0.0, 1.0);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = PINK[c] + (PURPLE[c] - PINK[c]) * t + self.tint[c] + jitter;
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    /// Region of pyramid level `level` (downsample `4^level`), point-sampled.
    pub fn region(&self, level: usize, x: u32, y: u32, w: u32, h: u32) -> Vec<u8> {
        let ds = 4f64.powi(level as i32);
        let mut out = Vec::with_capacity((w * h * 3) as usize);
        for yy in y..y + h {
            for xx in x..x + w {
                let px = self.pixel((xx as f64 + 0.5) * ds - 0.5, (yy as f64 + 0.5) * ds - 0.5);
                out.extend_from_slice(&px);
            }
        }
        out
    }

    pub fn annotations(&self) -> AnnotationSet {
        let [cx, cy, rx, ry] = self.ellipse;
        let polygon: Vec<[f64; 2]> = (0..24)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 24.0;
                [
                    (cx + 0.95 * rx * a.cos()).clamp(0.0, self.width as f64),
                    (cy + 0.95 * ry * a.sin()).clamp(0.0, self.height as f64),
                ]
            })
            .collect();
        let [ex, ey, ew, eh] = self.exclude;
        let mut set = AnnotationSet::default();
        set.push(Region::new(Label::Roi, polygon).expect("ellipse polygon is valid"));
        set.push(
            Region::new(Label::Exclude, vec![[ex, ey], [ex + ew, ey], [ex + ew, ey + eh], [ex, ey + eh]])
                .expect("rectangle is valid"),
        );
        set
    }

    pub fn level_dims(&self, levels: usize) -> Vec<(u32, u32)> {
        (0..levels as u32)
            .map(|l| (self.width >> (2 * l), self.height >> (2 * l)))
            .take_while(|&(w, h)| w > 0 && h > 0)
            .collect()
    }
}

/// Uniform `[0, 1)` hash of a lattice point.
fn hash01(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(ix as u64 ^ splitmix64(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise with smoothstep easing, lattice spacing `cell`.
pub fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (smooth(fx - ix), smooth(fy - iy));
    let (ix, iy) = (ix as i64, iy as i64);
    let a = hash01(seed, ix, iy);
    let b = hash01(seed, ix + 1, iy);
    let c = hash01(seed, ix, iy + 1);
    let d = hash01(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Writes one slide as a deflate-compressed pyramidal TIFF and returns its
/// annotations.
pub fn write_synthetic_slide(
    path: &Path,
    slide_id: &str,
    style: &SlideStyle,
    levels: usize,
    tiff_tile: u32,
    mpp: f64,
) -> Result<AnnotationSet> {
    let opts = TiffWriteOptions {
        tile_size: tiff_tile,
        compression: Compression::Deflate,
        big_endian: false,
        description: Some(format!("slide_id={slide_id}|mpp={mpp}")),
    };
    write_tiled_tiff(path, &style.level_dims(levels), &opts, |l, x, y, w, h| style.region(l, x, y, w, h))?;
    Ok(style.annotations())
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dir: PathBuf,
    pub slides: Vec<SlideEntry>,
    pub patients: Vec<PatientRecord>,
}

fn io(path: &Path, e: impl ToString) -> SynthError {
    SynthError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Generates `slides_per_class` slides per class under `dir`, plus
/// `slides.csv` and `patients.csv`. One patient per slide.
pub fn synth_corpus(dir: &Path, cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.slides_per_class == 0 || cfg.width < cfg.tiff_tile || cfg.height < cfg.tiff_tile || cfg.levels == 0 {
        return Err(SynthError::Invalid(format!("{cfg:?}")));
    }
    for sub in ["slides", "annotations"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| io(&dir.join(sub), e))?;
    }
    let mut jobs = Vec::new();
    for (ci, label) in [ClassLabel::Progressor, ClassLabel::NonProgressor].into_iter().enumerate() {
        let tag = if ci == 0 { "P" } else { "N" };
        for i in 0..cfg.slides_per_class {
            jobs.push((label, format!("SYN-{tag}{i:03}"), format!("PT-{tag}{i:03}")));
        }
    }
    // slides are generated one after another; each slide parallelizes internally
    let mut slides = Vec::with_capacity(jobs.len());
    for (k, (label, slide_id, patient_id)) in jobs.iter().enumerate() {
        let seed = mix(&[domain::SYNTH, cfg.seed, k as u64]);
        let style = SlideStyle::random(*label, cfg.width, cfg.height, seed);
        let rel_slide = PathBuf::from("slides").join(format!("{slide_id}.tiff"));
        let rel_ann = PathBuf::from("annotations").join(format!("{slide_id}.json"));
        let ann = write_synthetic_slide(&dir.join(&rel_slide), slide_id, &style, cfg.levels, cfg.tiff_tile, cfg.mpp)?;
        std::fs::write(dir.join(&rel_ann), ann.to_json()).map_err(|e| io(&dir.join(&rel_ann), e))?;
        slides.push(SlideEntry {
            slide_id: slide_id.clone(),
            patient_id: patient_id.clone(),
            label: *label,
            slide_path: rel_slide,
            annotation_path: Some(rel_ann),
        });
    }
    let patients: Vec<PatientRecord> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, (label, _, patient_id))| {
            let mut rng = stream_rng(&[domain::SYNTH, cfg.seed, k as u64, 0xA7]);
            PatientRecord {
                patient_id: patient_id.clone(),
                cohort: *label,
                age_years: rng.gen_range(54..=95),
                n_biopsies: rng.gen_range(1..=3),
                screening_interval_days: rng.gen_range(300..=2500),
            }
        })
        .collect();
    let slides_csv = dir.join("slides.csv");
    write_slides_csv(&slides_csv, &slides).map_err(|e| io(&slides_csv, e))?;
    let patients_csv = dir.join("patients.csv");
    write_patients_csv(&patients_csv, &patients).map_err(|e| io(&patients_csv, e))?;
    Ok(SynthCorpus {
        dir: dir.to_path_buf(),
        slides,
        patients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide_io::open_slide;

    #[test]
    fn noise_is_continuous_and_bounded() {
        for i in 0..200 {
            let x = i as f64 * 0.37;
            let v = value_noise(3, x, 2.0 * x, 8.0);
            assert!((0.0..1.0).contains(&v));
            let dv = (value_noise(3, x + 1e-6, 2.0 * x, 8.0) - v).abs();
            assert!(dv < 1e-5);
        }
    }

    #[test]
    fn classes_differ_in_high_frequency_energy() {
        // mean absolute horizontal difference inside the tissue
        let energy = |label| {
            let s = SlideStyle::random(label, 1024, 1024, 9);
            let (cx, cy) = (s.ellipse[0] + 0.2 * s.ellipse[2], s.ellipse[1] + 0.2 * s.ellipse[3]);
            let mut e = 0.0;
            for i in 0..200 {
                let (x, y) = (cx + (i % 20) as f64, cy + (i / 20) as f64);
                let (a, b) = (s.pixel(x, y), s.pixel(x + 1.0, y));
                e += (a[0] as f64 - b[0] as f64).abs();
            }
            e / 200.0
        };
        assert!(energy(ClassLabel::Progressor) > 3.0 * energy(ClassLabel::NonProgressor));
    }

    #[test]
    fn writes_a_readable_pyramid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            slides_per_class: 1,
            width: 512,
            height: 384,
            levels: 2,
            tiff_tile: 128,
            ..SynthConfig::default()
        };
        let corpus = synth_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(corpus.slides.len(), 2);
        let s = open_slide(dir.path().join(&corpus.slides[0].slide_path)).unwrap();
        assert_eq!(s.slide_id(), "SYN-P000");
        assert_eq!(s.dimensions(), (512, 384));
        assert_eq!(s.levels()[1].downsample, 4.0);
        let style = SlideStyle::random(ClassLabel::Progressor, 512, 384, mix(&[domain::SYNTH, 0, 0]));
        assert_eq!(s.read_region(0, 100, 90, 20, 10).unwrap(), style.region(0, 100, 90, 20, 10));
        let ann = crate::slide_io::load_annotations(dir.path().join(corpus.slides[0].annotation_path.as_ref().unwrap())).unwrap();
        assert!(ann.has_label(Label::Roi) && ann.has_label(Label::Exclude));
        let listing = crate::config::read_slides_csv(dir.path().join("slides.csv")).unwrap();
        assert_eq!(listing[1].label, ClassLabel::NonProgressor);
        assert_eq!(crate::dataset::read_patients_csv(dir.path().join("patients.csv")).unwrap(), corpus.patients);
    }
}
