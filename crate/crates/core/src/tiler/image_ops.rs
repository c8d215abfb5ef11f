//! Pixel operations on small RGB8 rasters: bilinear resize, per-channel
//! colour matching, unsharp masking and tile quality control.

use serde::{Deserialize, Serialize};

/// A row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Raster {
        assert_eq!(data.len(), width as usize * height as usize * 3, "raster buffer size");
        Raster { width, height, data }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Raster {
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Raster { width, height, data }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let n = self.pixel_count().max(1) as f64;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let mut mean = [0f64; 3];
        let mut std = [0f64; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
        }
        (mean, std)
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Source taps for one output coordinate under half-pixel-centre bilinear
/// sampling: `(i0, i1, weight of i1)`.
fn taps(dst_len: u32, src_len: u32) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let last = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len as usize - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres, channels independent, rounded to
/// nearest.
pub fn resize_bilinear(src: &Raster, dst_w: u32, dst_h: u32) -> Raster {
    assert!(src.width >= 1 && src.height >= 1 && dst_w >= 1 && dst_h >= 1, "resize dimensions must be positive");
    let tx = taps(dst_w, src.width);
    let ty = taps(dst_h, src.height);
    let sw = src.width as usize;
    let mut out = Vec::with_capacity(dst_w as usize * dst_h as usize * 3);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            for c in 0..3 {
                let p = |x: usize, y: usize| src.data[(y * sw + x) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out.push(to_u8(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Raster::new(dst_w, dst_h, out)
}

/// Single-channel float version of [`resize_bilinear`] using the same taps.
pub fn resize_plane(src: &[f32], src_w: u32, src_h: u32, dst_w: u32, dst_h: u32) -> Vec<f32> {
    assert_eq!(src.len(), src_w as usize * src_h as usize);
    let tx = taps(dst_w, src_w);
    let ty = taps(dst_h, src_h);
    let sw = src_w as usize;
    let mut out = Vec::with_capacity(dst_w as usize * dst_h as usize);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let p = |x: usize, y: usize| src[y * sw + x] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Target per-channel colour statistics (0–255 scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ReferenceColorStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Option<Self> {
        let ok = std.iter().all(|s| s.is_finite() && *s > 0.0) && mean.iter().all(|m| m.is_finite());
        ok.then_some(ReferenceColorStats { mean, std })
    }

    /// Average channel statistics over a set of tiles.
    pub fn from_tiles<'a>(tiles: impl IntoIterator<Item = &'a Raster>) -> Option<Self> {
        let mut mean = [0f64; 3];
        let mut std = [0f64; 3];
        let mut n = 0usize;
        for t in tiles {
            let (m, s) = t.channel_stats();
            for c in 0..3 {
                mean[c] += m[c];
                std[c] += s[c];
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        for c in 0..3 {
            mean[c] /= n as f64;
            std[c] /= n as f64;
        }
        Self::new(mean, std)
    }
}

impl Default for ReferenceColorStats {
    /// A mid-tone H&E-like target.
    fn default() -> Self {
        ReferenceColorStats {
            mean: [190.0, 140.0, 185.0],
            std: [30.0, 35.0, 25.0],
        }
    }
}

/// Per-channel mean/std matching to `reference`, clamped to `[0, 255]`.
/// A channel with (near) zero spread maps to the reference mean.
pub fn normalize_color(tile: &Raster, reference: &ReferenceColorStats) -> Raster {
    let (mean, std) = tile.channel_stats();
    let mut lut = [[0u8; 256]; 3];
    for c in 0..3 {
        for (v, slot) in lut[c].iter_mut().enumerate() {
            *slot = if std[c] < 1e-6 {
                to_u8(reference.mean[c])
            } else {
                to_u8((v as f64 - mean[c]) * (reference.std[c] / std[c]) + reference.mean[c])
            };
        }
    }
    let data = tile
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| lut[i % 3][v as usize])
        .collect();
    Raster::new(tile.width, tile.height, data)
}

/// 3x3 box blur with edge replication, kept in f64.
fn box_blur3(tile: &Raster) -> Vec<f64> {
    let (w, h) = (tile.width as i64, tile.height as i64);
    let mut out = vec![0f64; tile.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for dy in -1..=1 {
                let yy = (y + dy).clamp(0, h - 1);
                for dx in -1..=1 {
                    let xx = (x + dx).clamp(0, w - 1);
                    let i = ((yy * w + xx) * 3) as usize;
                    for c in 0..3 {
                        acc[c] += tile.data[i + c] as f64;
                    }
                }
            }
            let o = ((y * w + x) * 3) as usize;
            for c in 0..3 {
                out[o + c] = acc[c] / 9.0;
            }
        }
    }
    out
}

/// Unsharp mask: `in + amount * (in - blur3x3(in))`, clamped.
pub fn sharpen(tile: &Raster, amount: f64) -> Raster {
    if amount == 0.0 {
        return tile.clone();
    }
    let blur = box_blur3(tile);
    let data = tile
        .data
        .iter()
        .zip(&blur)
        .map(|(&v, &b)| to_u8(v as f64 + amount * (v as f64 - b)))
        .collect();
    Raster::new(tile.width, tile.height, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QcVerdict {
    Pass,
    Background,
    LowVariance,
}

/// Thresholds for [`qc_tile`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcThresholds {
    /// A pixel counts as background when its smallest channel is at least this.
    pub white_level: u8,
    pub min_tissue_fraction: f64,
    pub min_channel_std: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            white_level: 220,
            min_tissue_fraction: 0.25,
            min_channel_std: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcResult {
    pub tissue_fraction: f64,
    pub verdict: QcVerdict,
}

pub fn qc_tile(tile: &Raster, thresholds: &QcThresholds) -> QcResult {
    let tissue = tile
        .data
        .chunks_exact(3)
        .filter(|p| p[0].min(p[1]).min(p[2]) < thresholds.white_level)
        .count();
    let tissue_fraction = tissue as f64 / tile.pixel_count().max(1) as f64;
    let verdict = if tissue_fraction < thresholds.min_tissue_fraction {
        QcVerdict::Background
    } else if tile.channel_stats().1.iter().all(|&s| s < thresholds.min_channel_std) {
        QcVerdict::LowVariance
    } else {
        QcVerdict::Pass
    };
    QcResult { tissue_fraction, verdict }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raster(w: u32, h: u32, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect())
    }

    #[test]
    fn resize_constant_is_constant() {
        let src = Raster::filled(37, 11, [12, 200, 99]);
        let out = resize_bilinear(&src, 5, 23);
        assert!(out.data.chunks_exact(3).all(|p| p == [12, 200, 99]));
    }

    #[test]
    fn resize_upsample_is_monotone() {
        let src = Raster::new(2, 1, vec![0, 0, 0, 255, 255, 255]);
        let out = resize_bilinear(&src, 4, 1);
        let row: Vec<u8> = out.data.chunks_exact(3).map(|p| p[0]).collect();
        assert!(row.windows(2).all(|w| w[0] <= w[1]), "{row:?}");
        assert_eq!(row.first(), Some(&0));
        assert_eq!(row.last(), Some(&255));
    }

    #[test]
    fn resize_ramp_matches_analytic_ramp() {
        let (sw, dw) = (1024u32, 224u32);
        let ramp = |x: f64| x * 255.0 / (sw - 1) as f64;
        let mut data = Vec::with_capacity((sw * 8 * 3) as usize);
        for _ in 0..8 {
            for x in 0..sw {
                let v = ramp(x as f64).round() as u8;
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let src = Raster::new(sw, 8, data);
        let out = resize_bilinear(&src, dw, 8);
        let mut worst = 0f64;
        for dx in 0..dw {
            let s = ((dx as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let expected = ramp(s);
            worst = worst.max((out.pixel(dx, 3)[0] as f64 - expected).abs());
        }
        assert!(worst <= 1.0, "max error {worst}");
    }

    #[test]
    fn normalize_identity_when_stats_match() {
        let tile = random_raster(32, 32, 7);
        let (m, s) = tile.channel_stats();
        let out = normalize_color(&tile, &ReferenceColorStats::new(m, s).unwrap());
        assert!(tile.data.iter().zip(&out.data).all(|(a, b)| (*a as i32 - *b as i32).abs() <= 1));
    }

    #[test]
    fn normalize_constant_maps_to_reference_mean() {
        let tile = Raster::filled(8, 8, [128, 128, 128]);
        let reference = ReferenceColorStats::new([200.0, 100.5, 30.2], [10.0, 10.0, 10.0]).unwrap();
        let out = normalize_color(&tile, &reference);
        assert!(out.data.chunks_exact(3).all(|p| p == [200, 101, 30]));
    }

    #[test]
    fn normalize_random_tile_hits_reference_means() {
        let reference = ReferenceColorStats::default();
        for seed in 0..10 {
            let out = normalize_color(&random_raster(64, 64, seed), &reference);
            let (m, _) = out.channel_stats();
            for c in 0..3 {
                assert!((m[c] - reference.mean[c]).abs() < 0.5, "seed {seed} channel {c}: {}", m[c]);
            }
        }
    }

    #[test]
    fn sharpen_identities() {
        let tile = random_raster(16, 16, 3);
        assert_eq!(sharpen(&tile, 0.0), tile);
        let flat = Raster::filled(9, 9, [77, 140, 3]);
        assert_eq!(sharpen(&flat, 0.8), flat);
    }

    #[test]
    fn sharpen_step_edge_overshoots_both_sides() {
        // direct 3x3 convolution oracle on a vertical step 50 | 200
        let (w, h) = (8u32, 4u32);
        let val = |x: u32| -> f64 { if x < 4 { 50.0 } else { 200.0 } };
        let mut data = Vec::new();
        for _ in 0..h {
            for x in 0..w {
                let v = val(x) as u8;
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let out = sharpen(&Raster::new(w, h, data), 0.5);
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let blur = (val(xl) + val(x) + val(xr)) / 3.0;
            let expected = (val(x) + 0.5 * (val(x) - blur)).round().clamp(0.0, 255.0);
            assert_eq!(out.pixel(x, 1)[0] as f64, expected, "x={x}");
        }
        assert!(out.pixel(3, 1)[0] < 50);
        assert!(out.pixel(4, 1)[0] > 200);
    }

    #[test]
    fn qc_rules() {
        let t = QcThresholds::default();
        let white = Raster::filled(16, 16, [255, 255, 255]);
        let r = qc_tile(&white, &t);
        assert_eq!((r.tissue_fraction, r.verdict), (0.0, QcVerdict::Background));
        let gray = Raster::filled(16, 16, [128, 128, 128]);
        assert_eq!(qc_tile(&gray, &t).verdict, QcVerdict::LowVariance);

        // left half white, right half textured tissue
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data = Vec::new();
        for _ in 0..32 {
            for x in 0..32 {
                if x < 16 {
                    data.extend_from_slice(&[250, 250, 250]);
                } else {
                    data.extend_from_slice(&[rng.gen_range(80..200), rng.gen_range(40..160), rng.gen_range(90..210)]);
                }
            }
        }
        let r = qc_tile(&Raster::new(32, 32, data), &t);
        assert!((r.tissue_fraction - 0.5).abs() < 1e-12);
        assert_eq!(r.verdict, QcVerdict::Pass);
    }
}
