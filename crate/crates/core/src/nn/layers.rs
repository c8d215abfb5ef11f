//! Per-sample kernels on NHWC slices. Convolutions are 3x3 with padding 1.

use super::Scalar;

/// Output side length of a 3x3, padding-1 convolution.
pub const fn conv_out(n: usize, stride: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n - 1) / stride + 1
    }
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - 1;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// `out[oy, ox, co] = b[co] + sum in[iy, ix, ci] * w[ky, kx, ci, co]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
    stride: usize,
) -> Vec<T> {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * cout..][..cout];
            acc.copy_from_slice(bias);
            for ky in 0..3 {
                let Some(iy) = tap(oy, ky, stride, h) else { continue };
                for kx in 0..3 {
                    let Some(ix) = tap(ox, kx, stride, w) else { continue };
                    let px = &input[(iy * w + ix) * cin..][..cin];
                    let wk = &weight[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for (ci, &a) in px.iter().enumerate() {
                        let row = &wk[ci * cout..][..cout];
                        for (o, &wv) in acc.iter_mut().zip(row) {
                            *o = *o + a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel and bias gradients into `dw`/`db`, and the input
/// gradient into `din` when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    stride: usize,
    dout: &[T],
    mut dparams: Option<(&mut [T], &mut [T])>,
    mut din: Option<&mut [T]>,
) {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &dout[(oy * ow + ox) * cout..][..cout];
            if let Some((_, db)) = dparams.as_mut() {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
            for ky in 0..3 {
                let Some(iy) = tap(oy, ky, stride, h) else { continue };
                for kx in 0..3 {
                    let Some(ix) = tap(ox, kx, stride, w) else { continue };
                    let base = (iy * w + ix) * cin;
                    let koff = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = input[base + ci];
                        let off = koff + ci * cout;
                        if let Some((dw, _)) = dparams.as_mut() {
                            for (d, &gv) in dw[off..off + cout].iter_mut().zip(g) {
                                *d = *d + a * gv;
                            }
                        }
                        if let Some(din) = din.as_mut() {
                            let s: T = weight[off..off + cout].iter().zip(g).map(|(&wv, &gv)| wv * gv).sum();
                            din[base + ci] = din[base + ci] + s;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling (odd trailing rows/columns are dropped).
/// Returns the pooled map and the flat input index of each maximum.
pub fn maxpool2_forward<T: Scalar>(input: &[T], h: usize, w: usize, c: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = (2 * oy * w + 2 * ox) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dout: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut din = vec![T::zero(); input_len];
    for (&g, &i) in dout.iter().zip(arg) {
        din[i as usize] = din[i as usize] + g;
    }
    din
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose activation was clipped.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut [T], activation: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Global average pool over the spatial axes.
pub fn global_avg_pool<T: Scalar>(input: &[T], hw: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for px in input.chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o = *o + v;
        }
    }
    let inv = T::one() / T::of(hw as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    out
}
