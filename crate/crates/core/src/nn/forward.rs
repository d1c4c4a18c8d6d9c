//! Functional forward pass: parameters and inputs are tape variables.
//!
//! Activations are NHWC. Convolutions lower to an im2col gather followed
//! by a matmul, pooling and upsampling are gathers, so every layer is
//! differentiable to any order through the tape primitives.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::arch::{ActShape, ArchSpec, Layer};
use crate::autograd::Var;
use crate::error::{reject, Result};
use crate::tensor::{Real, Tensor, NO_INDEX};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Normalize with the current batch statistics.
    #[default]
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    /// Also compute batch statistics at BN inputs in eval mode.
    pub collect_bn_stats: bool,
    /// Run only the first `n` layers.
    pub stop_after: Option<usize>,
}

/// Biased batch statistics of the activation entering a BN layer.
pub struct BnStats<'t, F> {
    pub layer: usize,
    pub mean: Var<'t, F>,
    pub var: Var<'t, F>,
}

pub struct ForwardOut<'t, F> {
    pub output: Var<'t, F>,
    pub bn_stats: Vec<BnStats<'t, F>>,
}

type IndexKey = (u8, [usize; 7]);

thread_local! {
    static INDEX_CACHE: RefCell<HashMap<IndexKey, Rc<Vec<u32>>>> = RefCell::new(HashMap::new());
}

fn cached_index(key: IndexKey, build: impl FnOnce() -> Vec<u32>) -> Rc<Vec<u32>> {
    INDEX_CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        if let Some(idx) = cache.get(&key) {
            return Rc::clone(idx);
        }
        if cache.len() > 256 {
            cache.clear();
        }
        let idx = Rc::new(build());
        cache.insert(key, Rc::clone(&idx));
        idx
    })
}

/// im2col gather index: rows `(b, oy, ox)`, columns `(ky, kx, c)`.
#[allow(clippy::too_many_arguments)]
fn im2col_index(
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<u32> {
    let mut idx = Vec::with_capacity(b * oh * ow * k * k * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            idx.extend(std::iter::repeat_n(NO_INDEX, c));
                        } else {
                            let base = ((bi * h + iy as usize) * w + ix as usize) * c;
                            idx.extend((base..base + c).map(|i| i as u32));
                        }
                    }
                }
            }
        }
    }
    idx
}

fn upsample_index(b: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<u32> {
    let (oh, ow) = (h * f, w * f);
    let mut idx = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((bi * h + oy / f) * w + ox / f) * c;
                idx.extend((base..base + c).map(|i| i as u32));
            }
        }
    }
    idx
}

fn maxpool_index<F: Real>(x: &Tensor<F>, b: usize, h: usize, w: usize, c: usize, s: usize) -> Vec<u32> {
    let (oh, ow) = (h / s, w / s);
    let data = x.data();
    let mut idx = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = F::zero();
                    for ky in 0..s {
                        for kx in 0..s {
                            let i = ((bi * h + oy * s + ky) * w + ox * s + kx) * c + ch;
                            // first maximum wins on ties
                            if best == usize::MAX || data[i] > best_v {
                                best = i;
                                best_v = data[i];
                            }
                        }
                    }
                    idx.push(best as u32);
                }
            }
        }
    }
    idx
}

/// Run `arch` on `input` (`[B, H, W, C]`) with flat parameters `params`.
pub fn forward<'t, F: Real>(
    arch: &ArchSpec,
    params: Var<'t, F>,
    input: Var<'t, F>,
    mode: Mode,
    opts: ForwardOpts,
) -> Result<ForwardOut<'t, F>> {
    let shapes = arch.shapes()?;
    let in_shape = input.shape();
    let expect = arch.input_shape;
    if in_shape.len() != 4
        || in_shape[1] != expect.height
        || in_shape[2] != expect.width
        || in_shape[3] != expect.channels
    {
        return reject(format!(
            "input shape {in_shape:?} does not match architecture input {}×{}×{}",
            expect.height, expect.width, expect.channels
        ));
    }
    if params.shape() != [arch.param_len()] {
        return reject(format!(
            "parameter vector has shape {:?}, architecture needs {}",
            params.shape(),
            arch.param_len()
        ));
    }
    let batch = in_shape[0];
    if batch == 0 {
        return reject("empty batch");
    }
    let offsets = arch.param_offsets();
    let stop = opts.stop_after.unwrap_or(arch.layers.len()).min(arch.layers.len());

    let mut x = input;
    let mut shape = ActShape::Image {
        h: expect.height,
        w: expect.width,
        c: expect.channels,
    };
    let mut bn_stats = Vec::new();

    for (li, layer) in arch.layers.iter().enumerate().take(stop) {
        let off = offsets[li];
        let next = shapes[li];
        x = match (*layer, shape) {
            (
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
                ActShape::Image { h, w, c },
            ) => {
                let ActShape::Image { h: oh, w: ow, .. } = next else {
                    unreachable!("conv produces an image")
                };
                let idx = cached_index(
                    (0, [batch, h, w, c, kernel, stride, pad]),
                    || im2col_index(batch, h, w, c, kernel, stride, pad, oh, ow),
                );
                let kk = kernel * kernel * in_channels;
                let rows = batch * oh * ow;
                let cols = x.gather_rc(idx, vec![rows, kk]);
                let wt = params.slice(off, kk * out_channels).reshape(vec![kk, out_channels]);
                let bias = params
                    .slice(off + kk * out_channels, out_channels)
                    .reshape(vec![1, out_channels]);
                cols.matmul(wt)
                    .add(bias.broadcast_rows(rows))
                    .reshape(vec![batch, oh, ow, out_channels])
            }
            (Layer::BatchNorm { channels }, s) => {
                let rows = batch * s.elements() / channels;
                let x2 = x.reshape(vec![rows, channels]);
                let p = |i: usize| {
                    params
                        .slice(off + i * channels, channels)
                        .reshape(vec![1, channels])
                };
                let (gain, shift) = (p(0), p(1));
                let want_stats = mode == Mode::Train || opts.collect_bn_stats;
                let mut centered = None;
                if want_stats {
                    let inv_n = 1.0 / rows as f64;
                    let mean = x2.sum_rows().scale(inv_n);
                    let xc = x2.sub(mean.broadcast_rows(rows));
                    let var = xc.mul(xc).sum_rows().scale(inv_n);
                    bn_stats.push(BnStats {
                        layer: li,
                        mean,
                        var,
                    });
                    centered = Some((xc, var));
                }
                let y = match mode {
                    Mode::Train => {
                        let (xc, var) = centered.expect("train mode computes stats");
                        let std = var.add_scalar(BN_EPS).sqrt();
                        xc.div(std.broadcast_rows(rows))
                            .mul(gain.broadcast_rows(rows))
                            .add(shift.broadcast_rows(rows))
                    }
                    Mode::Eval => {
                        let (rm, rv) = (p(2), p(3));
                        let scale = gain.div(rv.add_scalar(BN_EPS).sqrt());
                        let bias = shift.sub(rm.mul(scale));
                        x2.mul(scale.broadcast_rows(rows))
                            .add(bias.broadcast_rows(rows))
                    }
                };
                y.reshape(x.shape())
            }
            (Layer::Relu, _) => {
                let mask = x.value().map(|v| if v > F::zero() { F::one() } else { F::zero() });
                x.mul_const(mask)
            }
            (Layer::LeakyRelu { slope }, _) => {
                let s = F::from_f64(slope);
                let mask = x.value().map(|v| if v > F::zero() { F::one() } else { s });
                x.mul_const(mask)
            }
            (Layer::Sigmoid, _) => x.sigmoid(),
            (Layer::MaxPool { size }, ActShape::Image { h, w, c }) => {
                let idx = maxpool_index(&x.value(), batch, h, w, c, size);
                x.gather(idx, vec![batch, h / size, w / size, c])
            }
            (Layer::Upsample { factor }, ActShape::Image { h, w, c }) => {
                let idx = cached_index((1, [batch, h, w, c, factor, 0, 0]), || {
                    upsample_index(batch, h, w, c, factor)
                });
                x.gather_rc(idx, vec![batch, h * factor, w * factor, c])
            }
            (Layer::Linear { inputs, outputs }, _) => {
                let flat = x.reshape(vec![batch, inputs]);
                let wt = params.slice(off, inputs * outputs).reshape(vec![inputs, outputs]);
                let bias = params
                    .slice(off + inputs * outputs, outputs)
                    .reshape(vec![1, outputs]);
                flat.matmul(wt).add(bias.broadcast_rows(batch))
            }
            (
                Layer::Reshape {
                    height,
                    width,
                    channels,
                },
                _,
            ) => x.reshape(vec![batch, height, width, channels]),
            (l, s) => unreachable!("validated architecture applied {l:?} to {s:?}"),
        };
        shape = next;
    }

    Ok(ForwardOut {
        output: x,
        bn_stats,
    })
}

/// Row-wise log-softmax of `[B, K]` logits.
pub fn log_softmax<'t, F: Real>(logits: Var<'t, F>) -> Var<'t, F> {
    let v = logits.value();
    let (b, k) = v.dims2();
    let maxes: Vec<F> = v
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .copied()
                .fold(row[0], |m, x| if x > m { x } else { m })
        })
        .collect();
    let shift = logits.tape().constant(Tensor::new(vec![b, 1], maxes));
    let s = logits.sub(shift.broadcast_cols(k));
    let lse = s.exp().sum_cols().ln();
    s.sub(lse.broadcast_cols(k))
}

pub fn one_hot<F: Real>(labels: &[usize], classes: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = F::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean cross-entropy of `[B, K]` logits against integer labels.
pub fn cross_entropy<'t, F: Real>(logits: Var<'t, F>, labels: &[usize]) -> Result<Var<'t, F>> {
    let (b, k) = logits.value().dims2();
    check_labels(labels, b, k)?;
    let lp = log_softmax(logits);
    Ok(lp.mul_const(one_hot(labels, k)).sum().scale(-1.0 / b as f64))
}

/// Mean `KL(p ‖ softmax(logits))` for a fixed target distribution `p`.
pub fn kl_to_logits<'t, F: Real>(target: &Tensor<F>, logits: Var<'t, F>) -> Var<'t, F> {
    let (b, _) = target.dims2();
    let entropy_term: f64 = target
        .data()
        .iter()
        .map(|p| {
            let p = p.to_f64();
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    let lq = log_softmax(logits);
    lq.mul_const(target.clone())
        .sum()
        .neg()
        .add_scalar(entropy_term)
        .scale(1.0 / b as f64)
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return reject(format!("{} labels for a batch of {batch}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return reject(format!("label {bad} outside [0, {classes})"));
    }
    Ok(())
}

/// Softmax probabilities of a `[B, K]` logit tensor, computed in `f64`.
pub fn softmax_rows<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    let (_, k) = logits.dims2();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x.to_f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| F::from_f64(v / z)));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Index of the largest entry per row (first on ties).
pub fn argmax_rows<F: Real>(logits: &Tensor<F>) -> Vec<usize> {
    let (_, k) = logits.dims2();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
