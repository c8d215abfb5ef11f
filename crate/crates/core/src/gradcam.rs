//! Gradient-weighted class activation maps.
//!
//! Channel weights are the spatial mean of `dlogit/dA_k` over the target
//! feature map `A`; the map is `ReLU(sum_k alpha_k A_k)`, max-normalized per
//! tile and bilinearly upsampled to the tile size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ModelState, NnError, Scalar};
use crate::tiler::{resize_plane, Raster};

pub const DEFAULT_ALPHA: f64 = 0.45;

#[derive(Debug, Error)]
pub enum GradCamError {
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("map is {map_w}x{map_h} but tile is {tile_w}x{tile_h}")]
    DimMismatch { map_w: u32, map_h: u32, tile_w: u32, tile_h: u32 },
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
}

pub type Result<T, E = GradCamError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative.
    pub raw: Vec<f64>,
    /// `raw / max(raw)`, or all zeros when the map vanishes.
    pub normalized: Vec<f64>,
    pub logit: f64,
    pub out_width: u32,
    pub out_height: u32,
    #[serde(skip)]
    pub upsampled: Vec<f32>,
}

/// `ReLU(sum_k mean(grads_k) * acts_k)` for `h x w x c` activations and gradients.
pub fn grad_cam_from(acts: &[f64], grads: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    assert_eq!(acts.len(), h * w * c, "activation shape");
    assert_eq!(grads.len(), h * w * c, "gradient shape");
    let mut alpha = vec![0.0; c];
    for px in grads.chunks_exact(c) {
        alpha.iter_mut().zip(px).for_each(|(a, g)| *a += g);
    }
    alpha.iter_mut().for_each(|a| *a /= (h * w) as f64);
    acts.chunks_exact(c)
        .map(|px| px.iter().zip(&alpha).map(|(a, w)| a * w).sum::<f64>().max(0.0))
        .collect()
}

pub fn normalize_map(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        raw.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

fn build(raw: Vec<f64>, height: usize, width: usize, logit: f64, out_w: u32, out_h: u32) -> GradCamMap {
    let normalized = normalize_map(&raw);
    let plane: Vec<f32> = normalized.iter().map(|&v| v as f32).collect();
    let upsampled = resize_plane(&plane, width as u32, height as u32, out_w, out_h)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    GradCamMap {
        height,
        width,
        raw,
        normalized,
        logit,
        out_width: out_w,
        out_height: out_h,
        upsampled,
    }
}

/// Map for the positive-class logit at the last block.
pub fn gradcam<T: Scalar>(model: &ModelState<T>, tile: &Raster) -> Result<GradCamMap> {
    gradcam_at(model, tile, model.spec.blocks - 1)
}

/// Map for the positive-class logit at the pooled output of `block`.
pub fn gradcam_at<T: Scalar>(model: &ModelState<T>, tile: &Raster, block: usize) -> Result<GradCamMap> {
    let input = crate::nn::tile_input::<T>(&model.spec, tile)?;
    let fg = model.feature_gradient_at(&input, block)?;
    let acts: Vec<f64> = fg.activations.iter().map(|v| v.f64()).collect();
    let grads: Vec<f64> = fg.gradients.iter().map(|v| v.f64()).collect();
    let raw = grad_cam_from(&acts, &grads, fg.height, fg.width, fg.channels);
    Ok(build(raw, fg.height, fg.width, fg.logit.f64(), tile.width, tile.height))
}

/// Blue (0) -> green -> yellow -> red (1).
pub fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 255.0], [0.0, 255.0, 0.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];
    let t = v.clamp(0.0, 1.0) * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
}

/// Blends the colour-mapped upsampled map over the tile.
pub fn overlay(tile: &Raster, map: &GradCamMap, alpha: f64) -> Result<Raster> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GradCamError::Alpha(alpha));
    }
    if (map.out_width, map.out_height) != (tile.width, tile.height) || map.upsampled.len() != tile.pixel_count() {
        return Err(GradCamError::DimMismatch {
            map_w: map.out_width,
            map_h: map.out_height,
            tile_w: tile.width,
            tile_h: tile.height,
        });
    }
    let mut out = tile.clone();
    for (px, &v) in out.data.chunks_exact_mut(3).zip(&map.upsampled) {
        let c = colormap(v as f64);
        for k in 0..3 {
            px[k] = ((1.0 - alpha) * px[k] as f64 + alpha * c[k] as f64).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_raw(raw: Vec<f64>, h: usize, w: usize, out: u32) -> GradCamMap {
        build(raw, h, w, 0.0, out, out)
    }

    #[test]
    fn single_channel_uniform_gradient() {
        let acts = [1.0, -2.0, 4.0, 0.5];
        let m = grad_cam_from(&acts, &[0.3; 4], 2, 2, 1);
        let n = normalize_map(&m);
        let expect: Vec<f64> = acts.iter().map(|a: &f64| a.max(0.0) / 4.0).collect();
        for (a, b) in n.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_evidence_gives_zero_map() {
        let m = grad_cam_from(&[1.0, 2.0, 3.0, 4.0], &[-1.0; 4], 2, 2, 1);
        assert_eq!(m, vec![0.0; 4]);
        assert_eq!(normalize_map(&m), vec![0.0; 4]);
    }

    #[test]
    fn overlay_tints() {
        let tile = Raster::filled(4, 4, [100, 100, 100]);
        let zero = from_raw(vec![0.0; 4], 2, 2, 4);
        let o = overlay(&tile, &zero, 0.5).unwrap();
        assert_eq!(o.pixel(1, 1), [50, 50, 178]);
        let hot = from_raw(vec![1.0; 4], 2, 2, 4);
        assert_eq!(overlay(&tile, &hot, 1.0).unwrap().pixel(0, 3), [255, 0, 0]);
        assert_eq!(overlay(&tile, &hot, 0.0).unwrap(), tile);
        let small = from_raw(vec![1.0; 4], 2, 2, 3);
        assert!(matches!(overlay(&tile, &small, 0.5), Err(GradCamError::DimMismatch { .. })));
    }

    #[test]
    fn colormap_anchors() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(1.0 / 3.0), [0, 255, 0]);
        assert_eq!(colormap(2.0 / 3.0), [255, 255, 0]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
    }

    proptest! {
        #[test]
        fn nonnegative_normalized_and_scale_invariant(
            acts in prop::collection::vec(-3.0f64..3.0, 18),
            grads in prop::collection::vec(-1.0f64..1.0, 18),
            scale in 0.01f64..100.0,
        ) {
            let raw = grad_cam_from(&acts, &grads, 3, 3, 2);
            prop_assert!(raw.iter().all(|&v| v >= 0.0));
            let n = normalize_map(&raw);
            let max = n.iter().cloned().fold(0.0, f64::max);
            prop_assert!(max == 1.0 || n.iter().all(|&v| v == 0.0));
            let scaled: Vec<f64> = grads.iter().map(|g| g * scale).collect();
            let n2 = normalize_map(&grad_cam_from(&acts, &scaled, 3, 3, 2));
            for (a, b) in n.iter().zip(&n2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
