use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    conv2d_backward, conv2d_forward, conv_out, global_avg_pool, maxpool2_backward, maxpool2_forward,
    relu_backward_inplace, relu_inplace,
};
use super::loss::sigmoid;
use super::train::TrainProgress;
use super::{NnError, Result, Scalar, Tensor};
use crate::rng::{domain, stream_rng};
use crate::tiler::Raster;

/// Dropout rate of the classification head.
pub const DROPOUT_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const ADAM: AdamConfig = AdamConfig {
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
};

/// Architecture hyperparameters. Two models with equal specs have
/// interchangeable parameter layouts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of the stem; each block doubles them.
    pub stem_channels: usize,
    pub blocks: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_height: 224,
            input_width: 224,
            stem_channels: 16,
            blocks: 4,
        }
    }
}

/// Input geometry of one convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    stride: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (conv_out(self.h, self.stride), conv_out(self.w, self.stride))
    }
}

impl ModelSpec {
    pub fn square(input: usize, stem_channels: usize, blocks: usize) -> Self {
        ModelSpec {
            input_height: input,
            input_width: input,
            stem_channels,
            blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidSpec(m));
        if self.stem_channels == 0 {
            return bad("stem_channels must be positive".into());
        }
        if !(1..=8).contains(&self.blocks) {
            return bad(format!("blocks must be in 1..=8, got {}", self.blocks));
        }
        let (h, w, _) = self.feature_dims_unchecked();
        if h == 0 || w == 0 {
            return bad(format!(
                "input {}x{} is too small for {} blocks",
                self.input_height, self.input_width, self.blocks
            ));
        }
        Ok(())
    }

    /// Stem, blocks, head.
    pub fn layer_count(&self) -> usize {
        self.blocks + 2
    }

    pub fn head_layer(&self) -> usize {
        self.blocks + 1
    }

    fn convs(&self) -> Vec<ConvGeom> {
        let mut out = Vec::with_capacity(self.blocks + 1);
        let stem = ConvGeom {
            h: self.input_height,
            w: self.input_width,
            cin: 3,
            cout: self.stem_channels,
            stride: 2,
        };
        out.push(stem);
        let (mut h, mut w) = stem.out_hw();
        let mut c = self.stem_channels;
        for _ in 0..self.blocks {
            let g = ConvGeom {
                h,
                w,
                cin: c,
                cout: 2 * c,
                stride: 1,
            };
            out.push(g);
            let (oh, ow) = g.out_hw();
            h = oh / 2;
            w = ow / 2;
            c *= 2;
        }
        out
    }

    fn feature_dims_unchecked(&self) -> (usize, usize, usize) {
        let last = *self.convs().last().expect("stem");
        let (h, w) = last.out_hw();
        (h / 2, w / 2, last.cout)
    }

    /// Height, width and channels of the last block's (pooled) output.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        self.feature_dims_unchecked()
    }

    /// Names and shapes of all parameter tensors in declared order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, g) in self.convs().iter().enumerate() {
            let name = if i == 0 { "stem".to_string() } else { format!("block{}", i - 1) };
            out.push((format!("{name}.weight"), vec![3, 3, g.cin, g.cout]));
            out.push((format!("{name}.bias"), vec![g.cout]));
        }
        let (_, _, c) = self.feature_dims();
        out.push(("head.weight".into(), vec![c, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// SHA-256 over the canonical JSON form plus the fixed head constants.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"tileforge-cnn/1\0");
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        h.update(DROPOUT_RATE.to_le_bytes());
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

/// Parameters, optimizer state and training bookkeeping of one network.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub spec: ModelSpec,
    /// One flat buffer per tensor, in [`ModelSpec::param_shapes`] order.
    pub params: Vec<Vec<T>>,
    pub adam_m: Vec<Vec<T>>,
    pub adam_v: Vec<Vec<T>>,
    /// Number of optimizer steps taken so far, across all phases.
    pub step: u64,
    /// Per layer: stem, blocks, head.
    pub frozen: Vec<bool>,
    /// Completed epochs.
    pub epoch: u32,
    pub seed: u64,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) version: u64,
    pub progress: TrainProgress<T>,
}

/// Activations of one sample needed by the backward pass.
#[derive(Debug, Clone)]
struct SampleCache<T> {
    input: Vec<T>,
    stem: Vec<T>,
    conv: Vec<Vec<T>>,
    arg: Vec<Vec<u32>>,
    pooled: Vec<Vec<T>>,
    features: Vec<T>,
    mask: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Cache<T> {
    version: u64,
    samples: Vec<SampleCache<T>>,
}

impl<T> Cache<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: Vec<T>,
    pub cache: Cache<T>,
}

/// Per-tensor gradients; `None` for tensors of frozen layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Number of tensors that carry a gradient.
    pub fn len(&self) -> usize {
        self.tensors.iter().filter(|t| t.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, &y)| *x = *x + y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

/// Last-block activations of one input and the logit's gradient with
/// respect to them.
#[derive(Debug, Clone)]
pub struct FeatureGrad<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `height x width x channels`.
    pub activations: Vec<T>,
    pub gradients: Vec<T>,
    pub logit: T,
}

impl<T: Scalar> ModelState<T> {
    /// He-uniform convolutions, Glorot-uniform head, zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = stream_rng(&[domain::INIT, seed]);
        let shapes = spec.param_shapes();
        let head_w = shapes.len() - 2;
        let params: Vec<Vec<T>> = shapes
            .iter()
            .enumerate()
            .map(|(i, (_, shape))| {
                let n: usize = shape.iter().product();
                if i % 2 == 1 {
                    return vec![T::zero(); n];
                }
                let limit = if i == head_w {
                    (6.0 / (shape[0] + 1) as f64).sqrt()
                } else {
                    (6.0 / (9 * shape[2]) as f64).sqrt()
                };
                (0..n).map(|_| T::of(init.gen_range(-limit..limit))).collect()
            })
            .collect();
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Ok(ModelState {
            frozen: vec![false; spec.layer_count()],
            spec,
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            step: 0,
            epoch: 0,
            seed,
            rng: stream_rng(&[domain::DROPOUT, seed]),
            version: 0,
            progress: TrainProgress::default(),
        })
    }

    /// Same state at a different precision.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let conv = |v: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            v.iter().map(|t| t.iter().map(|&x| U::of(x.f64())).collect()).collect()
        };
        ModelState {
            spec: self.spec.clone(),
            params: conv(&self.params),
            adam_m: conv(&self.adam_m),
            adam_v: conv(&self.adam_v),
            step: self.step,
            frozen: self.frozen.clone(),
            epoch: self.epoch,
            seed: self.seed,
            rng: self.rng.clone(),
            version: self.version,
            progress: self.progress.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Freezes or unfreezes every layer except the head.
    pub fn freeze_backbone(&mut self, frozen: bool) {
        let head = self.spec.head_layer();
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = frozen && i != head;
        }
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    /// Parameter tensors that belong to layer `layer`.
    pub fn layer_tensors(layer: usize) -> [usize; 2] {
        [2 * layer, 2 * layer + 1]
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let want = [self.spec.input_height, self.spec.input_width, 3];
        if batch.shape.len() != 4 || batch.shape[1..] != want {
            let mut expected = vec![batch.batch()];
            expected.extend(want);
            return Err(NnError::ShapeMismatch {
                expected,
                got: batch.shape.clone(),
            });
        }
        Ok(())
    }

    fn forward_sample(&self, x: &[T], mask: Option<Vec<T>>) -> (T, SampleCache<T>) {
        let convs = self.spec.convs();
        let p = &self.params;
        let g = convs[0];
        let mut stem = conv2d_forward(x, g.h, g.w, g.cin, &p[0], &p[1], g.cout, g.stride);
        relu_inplace(&mut stem);
        let mut conv = Vec::with_capacity(self.spec.blocks);
        let mut arg = Vec::with_capacity(self.spec.blocks);
        let mut pooled: Vec<Vec<T>> = Vec::with_capacity(self.spec.blocks);
        for (i, g) in convs.iter().enumerate().skip(1) {
            let input = if i == 1 { &stem } else { &pooled[i - 2] };
            let mut c = conv2d_forward(input, g.h, g.w, g.cin, &p[2 * i], &p[2 * i + 1], g.cout, 1);
            relu_inplace(&mut c);
            let (oh, ow) = g.out_hw();
            let (pl, a) = maxpool2_forward(&c, oh, ow, g.cout);
            conv.push(c);
            arg.push(a);
            pooled.push(pl);
        }
        let (fh, fw, fc) = self.spec.feature_dims();
        let features = global_avg_pool(pooled.last().expect("at least one block"), fh * fw, fc);
        let head = self.spec.head_layer();
        let (hw, hb) = (&p[2 * head], p[2 * head + 1][0]);
        let logit = match &mask {
            Some(m) => hb + features.iter().zip(m).zip(hw).map(|((&f, &m), &w)| f * m * w).sum::<T>(),
            None => hb + features.iter().zip(hw).map(|(&f, &w)| f * w).sum::<T>(),
        };
        let cache = SampleCache {
            input: x.to_vec(),
            stem,
            conv,
            arg,
            pooled,
            features,
            mask,
        };
        (logit, cache)
    }

    /// Forward pass. With `training` set, dropout masks are drawn from the
    /// model's generator (sequentially, before the parallel per-sample work).
    pub fn forward(&mut self, batch: &Tensor<T>, training: bool) -> Result<Forward<T>> {
        self.check_input(batch)?;
        let n = batch.batch();
        let (_, _, c) = self.spec.feature_dims();
        let masks: Vec<Option<Vec<T>>> = if training {
            let keep = T::of(1.0 / (1.0 - DROPOUT_RATE));
            (0..n)
                .map(|_| {
                    Some(
                        (0..c)
                            .map(|_| if self.rng.gen::<f64>() < DROPOUT_RATE { T::zero() } else { keep })
                            .collect(),
                    )
                })
                .collect()
        } else {
            vec![None; n]
        };
        let this = &*self;
        let (logits, samples): (Vec<T>, Vec<SampleCache<T>>) = masks
            .into_par_iter()
            .enumerate()
            .map(|(i, m)| this.forward_sample(batch.item(i), m))
            .unzip();
        Ok(Forward {
            logits,
            cache: Cache {
                version: self.version,
                samples,
            },
        })
    }

    /// Inference logits without keeping activations.
    pub fn forward_eval(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(batch)?;
        Ok((0..batch.batch())
            .into_par_iter()
            .map(|i| self.forward_sample(batch.item(i), None).0)
            .collect())
    }

    /// Backward pass for one sample. `capture` names a block whose pooled
    /// output gradient should be returned.
    fn backward_sample(
        &self,
        c: &SampleCache<T>,
        dz: T,
        frozen: &[bool],
        capture: Option<usize>,
    ) -> (Gradients<T>, Option<Vec<T>>) {
        let convs = self.spec.convs();
        let head = self.spec.head_layer();
        let lowest = frozen.iter().position(|f| !f);
        // layer index whose output gradient is captured
        let target = capture.map(|b| b + 1);
        let mut tensors: Vec<Option<Vec<T>>> = vec![None; self.params.len()];
        let ones;
        let mask = match &c.mask {
            Some(m) => m,
            None => {
                ones = vec![T::one(); c.features.len()];
                &ones
            }
        };
        if !frozen[head] {
            tensors[2 * head] = Some(c.features.iter().zip(mask).map(|(&f, &m)| f * m * dz).collect());
            tensors[2 * head + 1] = Some(vec![dz]);
        }
        let needed_at = |i: usize| lowest.is_some_and(|l| l <= i) || target.is_some_and(|t| t <= i);
        let needed_below = |i: usize| lowest.is_some_and(|l| l < i) || target.is_some_and(|t| t < i);
        if !needed_below(head) {
            return (Gradients { tensors }, None);
        }
        let (fh, fw, fc) = self.spec.feature_dims();
        let inv_hw = T::one() / T::of((fh * fw) as f64);
        let dfeat: Vec<T> = self.params[2 * head].iter().zip(mask).map(|(&w, &m)| dz * w * m * inv_hw).collect();
        let mut dcur: Vec<T> = Vec::with_capacity(fh * fw * fc);
        for _ in 0..fh * fw {
            dcur.extend_from_slice(&dfeat);
        }
        let mut captured = None;
        for i in (1..convs.len()).rev() {
            if target == Some(i) {
                captured = Some(dcur.clone());
            }
            if !needed_at(i) {
                break;
            }
            let g = convs[i];
            let mut dconv = maxpool2_backward(&dcur, &c.arg[i - 1], c.conv[i - 1].len());
            relu_backward_inplace(&mut dconv, &c.conv[i - 1]);
            let input = if i == 1 { &c.stem } else { &c.pooled[i - 2] };
            let mut din = needed_below(i).then(|| vec![T::zero(); input.len()]);
            let mut dw_db = (!frozen[i]).then(|| (vec![T::zero(); self.params[2 * i].len()], vec![T::zero(); g.cout]));
            conv2d_backward(
                input,
                g.h,
                g.w,
                g.cin,
                &self.params[2 * i],
                g.cout,
                1,
                &dconv,
                dw_db.as_mut().map(|(a, b)| (a.as_mut_slice(), b.as_mut_slice())),
                din.as_deref_mut(),
            );
            if let Some((dw, db)) = dw_db {
                tensors[2 * i] = Some(dw);
                tensors[2 * i + 1] = Some(db);
            }
            match din {
                Some(d) => dcur = d,
                None => break,
            }
        }
        if !frozen[0] {
            let g = convs[0];
            relu_backward_inplace(&mut dcur, &c.stem);
            let mut dw = vec![T::zero(); self.params[0].len()];
            let mut db = vec![T::zero(); g.cout];
            conv2d_backward(&c.input, g.h, g.w, g.cin, &self.params[0], g.cout, g.stride, &dcur, Some((&mut dw, &mut db)), None);
            tensors[0] = Some(dw);
            tensors[1] = Some(db);
        }
        (Gradients { tensors }, captured)
    }

    /// Reverse pass from `dL/dlogit` to every unfrozen parameter. Per-sample
    /// gradients run in parallel and are summed in sample order.
    pub fn backward(&self, cache: &Cache<T>, dlogits: &[T]) -> Result<Gradients<T>> {
        if cache.version != self.version {
            return Err(NnError::StaleCache);
        }
        if dlogits.len() != cache.samples.len() {
            return Err(NnError::ShapeMismatch {
                expected: vec![cache.samples.len()],
                got: vec![dlogits.len()],
            });
        }
        let per: Vec<Gradients<T>> = cache
            .samples
            .par_iter()
            .zip(dlogits)
            .map(|(s, &dz)| self.backward_sample(s, dz, &self.frozen, None).0)
            .collect();
        let mut total = Gradients {
            tensors: vec![None; self.params.len()],
        };
        for g in &per {
            total.add_assign(g);
        }
        Ok(total)
    }

    /// Activations of the last block for one `H x W x 3` input in `[0, 1]`,
    /// and `dlogit / dactivation`.
    pub fn feature_gradient(&self, input: &[T]) -> Result<FeatureGrad<T>> {
        self.feature_gradient_at(input, self.spec.blocks - 1)
    }

    /// As [`Self::feature_gradient`], for the pooled output of block `block`.
    pub fn feature_gradient_at(&self, input: &[T], block: usize) -> Result<FeatureGrad<T>> {
        let want = self.spec.input_height * self.spec.input_width * 3;
        if input.len() != want {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.spec.input_height, self.spec.input_width, 3],
                got: vec![input.len()],
            });
        }
        if block >= self.spec.blocks {
            return Err(NnError::InvalidSpec(format!(
                "block {block} out of range for {} blocks",
                self.spec.blocks
            )));
        }
        let (logit, mut cache) = self.forward_sample(input, None);
        let all_frozen = vec![true; self.frozen.len()];
        let (_, grads) = self.backward_sample(&cache, T::one(), &all_frozen, Some(block));
        let g = self.spec.convs()[block + 1];
        let (oh, ow) = g.out_hw();
        Ok(FeatureGrad {
            height: oh / 2,
            width: ow / 2,
            channels: g.cout,
            activations: cache.pooled.swap_remove(block),
            gradients: grads.expect("captured block gradient"),
            logit,
        })
    }
}

/// One Adam update with bias correction. Frozen layers keep their
/// parameters and moments untouched.
pub fn adam_step<T: Scalar>(state: &mut ModelState<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    if grads.tensors.len() != state.params.len() {
        return Err(NnError::ShapeMismatch {
            expected: vec![state.params.len()],
            got: vec![grads.tensors.len()],
        });
    }
    for (i, g) in grads.tensors.iter().enumerate() {
        let frozen = state.frozen[i / 2];
        match g {
            Some(g) if !frozen && g.len() != state.params[i].len() => {
                return Err(NnError::ShapeMismatch {
                    expected: vec![state.params[i].len()],
                    got: vec![g.len()],
                })
            }
            None if !frozen => {
                return Err(NnError::ShapeMismatch {
                    expected: vec![state.params[i].len()],
                    got: vec![0],
                })
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { beta1, beta2, eps } = ADAM;
    let bc1 = T::of(1.0 - beta1.powi(t));
    let bc2 = T::of(1.0 - beta2.powi(t));
    let (b1, b2, eps, lr) = (T::of(beta1), T::of(beta2), T::of(eps), T::of(lr));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (i, g) in grads.tensors.iter().enumerate() {
        let Some(g) = g else { continue };
        if state.frozen[i / 2] {
            continue;
        }
        let p = &mut state.params[i];
        let m = &mut state.adam_m[i];
        let v = &mut state.adam_v[i];
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
        }
    }
    state.version += 1;
    Ok(())
}

/// A tile as a flat `H x W x 3` input scaled to `[0, 1]`.
pub fn tile_input<T: Scalar>(spec: &ModelSpec, tile: &Raster) -> Result<Vec<T>> {
    if (tile.height as usize, tile.width as usize) != (spec.input_height, spec.input_width) {
        return Err(NnError::ShapeMismatch {
            expected: vec![spec.input_height, spec.input_width, 3],
            got: vec![tile.height as usize, tile.width as usize, 3],
        });
    }
    let scale = T::of(1.0 / 255.0);
    Ok(tile.data.iter().map(|&b| T::of(b as f64) * scale).collect())
}

/// Inference logits, one per tile, computed independently per tile.
pub fn predict_logits<T: Scalar>(model: &ModelState<T>, tiles: &[Raster]) -> Result<Vec<T>> {
    tiles
        .par_iter()
        .map(|t| Ok(model.forward_sample(&tile_input(&model.spec, t)?, None).0))
        .collect()
}

/// `sigmoid(logit)` per tile, dropout disabled.
pub fn predict<T: Scalar>(model: &ModelState<T>, tiles: &[Raster]) -> Result<Vec<f64>> {
    Ok(predict_logits(model, tiles)?.into_iter().map(|z| sigmoid(z).f64()).collect())
}
