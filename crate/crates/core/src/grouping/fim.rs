//! Diagonal Fisher information of a pseudo-task under a frozen probe.
//!
//! The probe backbone is fixed; a softmax head is fitted on its features
//! for the task's own labels so that `log P(y|x)` is defined, then the
//! per-sample log-likelihood gradients with respect to the trainable
//! backbone parameters are squared and averaged.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{numeric, reject, Result};
use crate::nn::{
    cross_entropy, forward, log_softmax, ArchKind, ArchSpec, ForwardOpts, ImageBatch, InputShape, Layer, Mode,
    NetworkState, ParamVector,
};
use crate::optim::Adam;
use crate::tensor::{Real, Tensor};

/// Frozen feature extractor shared by all tasks.
#[derive(Clone, Debug)]
pub struct ProbeSpec {
    pub net: NetworkState,
}

impl ProbeSpec {
    /// The probe's own head is discarded; its backbone is every layer
    /// before the last linear layer.
    pub fn new(net: NetworkState) -> Result<Self> {
        if net.arch().head_index().is_none() {
            return reject("probe network has no linear head");
        }
        Ok(ProbeSpec {
            net: net.with_mode(Mode::Eval),
        })
    }

    pub fn backbone_layers(&self) -> usize {
        self.net.arch().head_index().expect("checked in new")
    }

    pub fn head_dim(&self) -> usize {
        match self.net.arch().layers[self.backbone_layers()] {
            Layer::Linear { inputs, .. } => inputs,
            _ => unreachable!("head_index points at a linear layer"),
        }
    }

    pub fn backbone_param_len(&self) -> usize {
        self.net.arch().param_len_until(self.backbone_layers())
    }

    /// Indices of trainable backbone entries; the embedding coordinates.
    pub fn embedding_coords(&self) -> Vec<usize> {
        let n = self.backbone_param_len();
        self.net.arch().trainable_mask()[..n]
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| t.then_some(i))
            .collect()
    }

    pub fn features<F: Real>(&self, images: &ImageBatch) -> Result<Tensor<F>> {
        let tape = Tape::<F>::new();
        let out = forward(
            self.net.arch(),
            tape.constant(self.net.params().to_tensor()),
            tape.constant(images.to_tensor()),
            Mode::Eval,
            ForwardOpts {
                collect_bn_stats: false,
                stop_after: Some(self.backbone_layers()),
            },
        )?;
        let v = out.output.value();
        let n = images.len();
        Ok(v.reshaped(vec![n, v.len() / n]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadFit {
    pub iterations: usize,
    pub lr: f64,
    /// Weight of `‖W‖²` in the head objective.
    pub ridge: f64,
}

impl Default for HeadFit {
    fn default() -> Self {
        HeadFit {
            iterations: 100,
            lr: 0.01,
            ridge: 1e-3,
        }
    }
}

/// Fisher diagonal; entries are non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskEmbedding(pub Vec<f64>);

impl TaskEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Probe backbone with a fitted task head, as one network.
#[derive(Clone, Debug)]
pub struct FisherNetwork<F> {
    pub arch: ArchSpec,
    pub params: Tensor<F>,
    /// Coordinates of `params` that form the embedding.
    pub coords: Vec<usize>,
}

/// Ridge-regularized softmax regression on probe features, from zero.
pub fn fit_head<F: Real>(features: &Tensor<F>, labels: &[usize], way: usize, fit: HeadFit) -> Result<Tensor<F>> {
    let (n, d) = features.dims2();
    if labels.len() != n {
        return reject("label count differs from feature rows");
    }
    let len = d * way + way;
    let mut w = vec![0.0f32; len];
    let mut opt = Adam::new(len, fit.lr);
    for it in 0..fit.iterations {
        let tape = Tape::<F>::new();
        let p = tape.var(Tensor::from_f32(vec![len], &w));
        let x = tape.constant(features.clone());
        let weight = p.slice(0, d * way).reshape(vec![d, way]);
        let bias = p.slice(d * way, way).reshape(vec![1, way]);
        let logits = x.matmul(weight).add(bias.broadcast_rows(n));
        let loss = cross_entropy(logits, labels)?.add(weight.mul(weight).sum().scale(fit.ridge));
        let value = loss.item();
        if !value.is_finite() {
            return Err(numeric("fitting the probe head", format!("loss {value} at iteration {it}")));
        }
        let g = tape.grad(loss, &[p], false)[0].value().to_f32_vec();
        opt.step(&mut w, &g, None);
    }
    Ok(Tensor::from_f32(vec![len], &w))
}

/// Assemble the probe backbone with a head fitted on `(images, labels)`.
pub fn fisher_network<F: Real>(
    probe: &ProbeSpec,
    images: &ImageBatch,
    labels: &[usize],
    way: usize,
    fit: HeadFit,
) -> Result<FisherNetwork<F>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= way) {
        return reject(format!("label {bad} outside [0, {way})"));
    }
    let feats = probe.features::<F>(images)?;
    let head = fit_head(&feats, labels, way, fit)?;
    let src = probe.net.arch();
    let cut = probe.backbone_layers();
    let mut layers: Vec<Layer> = src.layers[..cut].to_vec();
    layers.push(Layer::Linear {
        inputs: probe.head_dim(),
        outputs: way,
    });
    let arch = ArchSpec {
        kind: ArchKind::Probe,
        layers,
        input_shape: InputShape { ..src.input_shape },
        num_outputs: way,
    };
    arch.validate()?;
    let backbone = &probe.net.params().as_slice()[..probe.backbone_param_len()];
    let mut data: Vec<F> = backbone.iter().map(|&v| F::from_f64(v as f64)).collect();
    data.extend_from_slice(head.data());
    Ok(FisherNetwork {
        arch,
        params: Tensor::new(vec![data.len()], data),
        coords: probe.embedding_coords(),
    })
}

/// `(1/N) Σ_j (∂ log P(y_j|x_j) / ∂φ_k)²` over trainable backbone entries.
///
/// Each sample gets its own eval-mode forward and backward pass.
pub fn fim_diagonal_with<F: Real>(net: &FisherNetwork<F>, images: &ImageBatch, labels: &[usize]) -> Result<TaskEmbedding> {
    if images.len() != labels.len() || labels.is_empty() {
        return reject("FIM needs one label per image and at least one image");
    }
    let mut acc = vec![0.0f64; net.coords.len()];
    for (j, &y) in labels.iter().enumerate() {
        let tape = Tape::<F>::new();
        let p = tape.var(net.params.clone());
        let x = tape.constant(images.select(&[j]).to_tensor());
        let out = forward(&net.arch, p, x, Mode::Eval, ForwardOpts::default())?;
        let lp = log_softmax(out.output);
        let ll = lp.value().data()[y].to_f64();
        if !ll.is_finite() {
            return Err(numeric("FIM log-likelihood", format!("sample {j}: {ll}")));
        }
        let mut seed = vec![F::zero(); net.arch.num_outputs];
        seed[y] = F::one();
        let g = tape.grad_with_seed(lp, Tensor::new(vec![1, net.arch.num_outputs], seed), &[p], false)[0].value();
        let g = g.data();
        for (a, &k) in acc.iter_mut().zip(&net.coords) {
            let v = g[k].to_f64();
            *a += v * v;
        }
    }
    let n = labels.len() as f64;
    Ok(TaskEmbedding(acc.into_iter().map(|v| v / n).collect()))
}

/// Embedding of a labelled task under `probe`.
pub fn fim_diagonal(probe: &ProbeSpec, images: &ImageBatch, labels: &[usize], way: usize, fit: HeadFit) -> Result<TaskEmbedding> {
    let net = fisher_network::<f32>(probe, images, labels, way, fit)?;
    fim_diagonal_with(&net, images, labels)
}

/// A probe network sized for `input` with a `way`-output head.
pub fn probe_arch(input: InputShape, filters: usize, blocks: usize, way: usize) -> ArchSpec {
    ArchSpec::conv_classifier(ArchKind::Probe, input, filters, blocks, way)
}

/// Frozen probe from raw parameters.
pub fn probe_from_params(arch: ArchSpec, params: ParamVector) -> Result<ProbeSpec> {
    ProbeSpec::new(NetworkState::new(arch, params, Mode::Eval)?)
}
