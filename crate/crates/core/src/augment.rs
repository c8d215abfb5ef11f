//! Seeded photometric augmentation of training tiles.
//!
//! Every call draws from its own generator keyed by
//! `(master_seed, epoch, tile_uid)`, so a tile gets a fresh variation each
//! epoch while any run can be replayed exactly, in any order, on any number
//! of threads. Transforms run in a fixed order: colour shift, saturation,
//! brightness/contrast, sharpening.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, stream_rng};
use crate::tiler::{sharpen, Raster};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("{name}: range [{lo}, {hi}] is not ordered")]
    Range { name: &'static str, lo: f64, hi: f64 },
    #[error("{name}: probability {p} outside [0, 1]")]
    Probability { name: &'static str, p: f64 },
}

/// A closed sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        self.lo + (self.hi - self.lo) * rng.gen::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_color_shift: f64,
    /// Additive per-channel shift.
    pub color_shift: Interval,
    pub p_saturation: f64,
    /// Chroma scale around Rec.601 luma.
    pub saturation: Interval,
    pub p_brightness_contrast: f64,
    pub brightness: Interval,
    pub contrast: Interval,
    pub p_sharpen: f64,
    pub sharpen: Interval,
    pub master_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_color_shift: 0.5,
            color_shift: Interval::new(-25.0, 25.0),
            p_saturation: 0.5,
            saturation: Interval::new(0.7, 1.3),
            p_brightness_contrast: 0.5,
            brightness: Interval::new(-25.0, 25.0),
            contrast: Interval::new(0.8, 1.2),
            p_sharpen: 0.5,
            sharpen: Interval::new(0.0, 1.0),
            master_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration that never changes a tile.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_color_shift: 0.0,
            p_saturation: 0.0,
            p_brightness_contrast: 0.0,
            p_sharpen: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let probs = [
            ("p_color_shift", self.p_color_shift),
            ("p_saturation", self.p_saturation),
            ("p_brightness_contrast", self.p_brightness_contrast),
            ("p_sharpen", self.p_sharpen),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::Probability { name, p });
            }
        }
        let ranges = [
            ("color_shift", self.color_shift),
            ("saturation", self.saturation),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("sharpen", self.sharpen),
        ];
        for (name, r) in ranges {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(AugmentError::Range { name, lo: r.lo, hi: r.hi });
            }
        }
        if self.sharpen.lo < 0.0 {
            return Err(AugmentError::Range {
                name: "sharpen",
                lo: self.sharpen.lo,
                hi: self.sharpen.hi,
            });
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.p_color_shift == 0.0 && self.p_saturation == 0.0 && self.p_brightness_contrast == 0.0 && self.p_sharpen == 0.0
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(tile: &mut Raster, f: impl Fn([f64; 3]) -> [f64; 3]) {
    for px in tile.data.chunks_exact_mut(3) {
        let out = f([px[0] as f64, px[1] as f64, px[2] as f64]);
        for c in 0..3 {
            px[c] = to_u8(out[c]);
        }
    }
}

/// Augments one tile for one epoch. Pure in `(tile, cfg, epoch, tile_uid)`.
pub fn augment_tile(tile: &Raster, cfg: &AugmentConfig, epoch: u64, tile_uid: u64) -> Raster {
    let mut rng = stream_rng(&[domain::AUGMENT, cfg.master_seed, epoch, tile_uid]);
    let mut out = tile.clone();

    // parameters are drawn even for skipped transforms so streams stay aligned
    let apply = rng.gen::<f64>() < cfg.p_color_shift;
    let shift = [
        cfg.color_shift.sample(&mut rng),
        cfg.color_shift.sample(&mut rng),
        cfg.color_shift.sample(&mut rng),
    ];
    if apply {
        map_pixels(&mut out, |p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]);
    }

    let apply = rng.gen::<f64>() < cfg.p_saturation;
    let scale = cfg.saturation.sample(&mut rng);
    if apply {
        map_pixels(&mut out, |p| {
            let luma = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            [
                luma + scale * (p[0] - luma),
                luma + scale * (p[1] - luma),
                luma + scale * (p[2] - luma),
            ]
        });
    }

    let apply = rng.gen::<f64>() < cfg.p_brightness_contrast;
    let brightness = cfg.brightness.sample(&mut rng);
    let contrast = cfg.contrast.sample(&mut rng);
    if apply {
        map_pixels(&mut out, |p| p.map(|v| (v - 127.5) * contrast + 127.5 + brightness));
    }

    let apply = rng.gen::<f64>() < cfg.p_sharpen;
    let amount = cfg.sharpen.sample(&mut rng);
    if apply {
        out = sharpen(&out, amount);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tile(seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::new(12, 12, (0..12 * 12 * 3).map(|_| rng.gen()).collect())
    }

    #[test]
    fn disabled_is_identity() {
        let t = random_tile(1);
        assert_eq!(augment_tile(&t, &AugmentConfig::disabled(), 3, 99), t);
    }

    #[test]
    fn deterministic_per_key() {
        let t = random_tile(2);
        let cfg = AugmentConfig {
            master_seed: 11,
            ..AugmentConfig::default()
        };
        assert_eq!(augment_tile(&t, &cfg, 4, 7), augment_tile(&t, &cfg, 4, 7));
    }

    #[test]
    fn saturation_keeps_gray() {
        let gray = Raster::filled(10, 10, [128, 128, 128]);
        let cfg = AugmentConfig {
            p_saturation: 1.0,
            saturation: Interval::new(0.0, 3.0),
            master_seed: 5,
            ..AugmentConfig::disabled()
        };
        for epoch in 0..20 {
            assert_eq!(augment_tile(&gray, &cfg, epoch, 1), gray);
        }
    }

    #[test]
    fn validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            contrast: Interval::new(1.2, 0.8),
            ..AugmentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(AugmentError::Range { name: "contrast", .. })));
        let bad = AugmentConfig {
            p_sharpen: 1.5,
            ..AugmentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(AugmentError::Probability { .. })));
    }

    #[test]
    fn epochs_produce_distinct_variations() {
        let cfg = AugmentConfig {
            master_seed: 2024,
            ..AugmentConfig::default()
        };
        let n = 400;
        let differing = (0..n)
            .filter(|&i| {
                let t = random_tile(1000 + i);
                augment_tile(&t, &cfg, 0, i) != augment_tile(&t, &cfg, 1, i)
            })
            .count();
        assert!(differing as f64 >= 0.95 * n as f64, "{differing}/{n}");
    }

    proptest! {
        #[test]
        fn shape_preserved(seed in any::<u64>(), epoch in 0u64..100, uid in any::<u64>()) {
            let t = random_tile(seed);
            let cfg = AugmentConfig { p_color_shift: 1.0, p_saturation: 1.0, p_brightness_contrast: 1.0, p_sharpen: 1.0, master_seed: seed, ..AugmentConfig::default() };
            let out = augment_tile(&t, &cfg, epoch, uid);
            prop_assert_eq!((out.width, out.height, out.data.len()), (t.width, t.height, t.data.len()));
        }
    }
}
