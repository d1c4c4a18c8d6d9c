//! Task recovery by model inversion.
//!
//! A generator and its latent codes are optimized jointly so that a frozen
//! teacher classifies the generated images as pre-assigned labels while the
//! batch statistics at each of its BN layers match the stored running
//! statistics.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{numeric, reject, Result};
use crate::nn::{
    argmax_rows, cross_entropy, forward, ArchSpec, ForwardOpts, ImageBatch, Layer, Mode, NetworkState,
};
use crate::optim::Adam;
use crate::seed;
use crate::tensor::{Real, Tensor};
use crate::zoo::PretrainedModelRecord;

pub const LATENT_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub per_class: usize,
    /// Generator filter count; the output block has this many channels.
    pub generator_filters: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 200,
            lr: 1e-3,
            per_class: 6,
            generator_filters: 8,
        }
    }
}

/// Generator network, always run with batch statistics.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub net: NetworkState,
    pub latent_dim: usize,
}

impl GeneratorState {
    pub fn new(filters: usize, image_size: usize, channels: usize, seed: u64) -> Result<Self> {
        if !image_size.is_multiple_of(4) || image_size < 4 {
            return reject(format!("generator image size {image_size} is not a multiple of 4"));
        }
        let arch = ArchSpec::generator(LATENT_DIM, filters, image_size, channels);
        Ok(GeneratorState {
            net: NetworkState::init(arch, seed, Mode::Train)?,
            latent_dim: LATENT_DIM,
        })
    }

    /// Generator sized for `teacher`'s input.
    pub fn for_teacher(teacher: &ArchSpec, filters: usize, seed: u64) -> Result<Self> {
        let s = teacher.input_shape;
        if s.height != s.width {
            return reject("generator supports square images only");
        }
        Self::new(filters, s.height, s.channels, seed)
    }

    fn output_shape(&self) -> (usize, usize) {
        let n = self.net.arch().num_outputs;
        let c = self.net.arch().layers.iter().rev().find_map(|l| match *l {
            Layer::Conv { out_channels, .. } => Some(out_channels),
            _ => None,
        }).unwrap_or(1);
        (((n / c) as f64).sqrt() as usize, c)
    }

    /// Images for `z`, detached.
    pub fn generate(&self, z: &LatentBatch) -> Result<ImageBatch> {
        let tape = Tape::<f32>::new();
        let p = tape.constant(self.net.params().to_tensor());
        let zv = tape.constant(z.to_tensor());
        let img = forward(self.net.arch(), p, zv, Mode::Train, ForwardOpts::default())?.output;
        let (s, c) = self.output_shape();
        ImageBatch::new(s, s, c, img.value().to_f32_vec())
    }
}

/// Latent codes, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub dim: usize,
    pub codes: Vec<f32>,
}

impl LatentBatch {
    pub fn sample(batch: usize, dim: usize, rng: &mut seed::Rng) -> Self {
        let codes = (0..batch * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v as f32
            })
            .collect();
        LatentBatch { dim, codes }
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_f32(vec![self.len(), 1, 1, self.dim], &self.codes)
    }
}

/// Label slot `local` of the teacher identified by `source`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassKey {
    pub source: String,
    pub local: usize,
}

#[derive(Clone, Debug)]
pub struct PseudoTask {
    pub images: ImageBatch,
    /// Teacher-local labels.
    pub labels: Vec<usize>,
    pub source_id: String,
    pub class_keys: Vec<ClassKey>,
}

impl PseudoTask {
    pub fn way(&self) -> usize {
        self.class_keys.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionLoss {
    pub l_ce: f64,
    pub l_bn: f64,
    pub total: f64,
}

/// Tape terms of the inversion objective for images already on the tape.
pub struct TeacherTerms<'t, F> {
    pub l_ce: Var<'t, F>,
    pub l_bn: Var<'t, F>,
    pub logits: Var<'t, F>,
}

/// Cross-entropy of the eval-mode teacher on `images`, and the squared
/// distance between batch and running statistics at every BN layer.
pub fn teacher_terms<'t, F: Real>(
    teacher: &NetworkState,
    images: Var<'t, F>,
    labels: &[usize],
) -> Result<TeacherTerms<'t, F>> {
    let tape = images.tape();
    let arch = teacher.arch();
    let params = teacher.params().to_tensor::<F>();
    let p = tape.constant(params.clone());
    let out = forward(
        arch,
        p,
        images,
        Mode::Eval,
        ForwardOpts {
            collect_bn_stats: true,
            stop_after: None,
        },
    )?;
    let l_ce = cross_entropy(out.output, labels)?;
    let offsets = arch.param_offsets();
    let mut l_bn: Option<Var<'t, F>> = None;
    for s in &out.bn_stats {
        let Layer::BatchNorm { channels } = arch.layers[s.layer] else {
            unreachable!("stats come from BN layers")
        };
        let off = offsets[s.layer];
        let slice = |k: usize| {
            Tensor::new(
                vec![1, channels],
                params.data()[off + k * channels..off + (k + 1) * channels].to_vec(),
            )
        };
        let dm = s.mean.sub(tape.constant(slice(2)));
        let dv = s.var.sub(tape.constant(slice(3)));
        let term = dm.mul(dm).sum().add(dv.mul(dv).sum());
        l_bn = Some(match l_bn {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    let l_bn = l_bn.unwrap_or_else(|| tape.constant(Tensor::zeros(&[1])));
    Ok(TeacherTerms {
        l_ce,
        l_bn,
        logits: out.output,
    })
}

/// `{l_ce, l_bn, total}` of the teacher on `G(z)`.
pub fn inversion_loss(
    teacher: &NetworkState,
    generator: &GeneratorState,
    z: &LatentBatch,
    labels: &[usize],
) -> Result<InversionLoss> {
    let tape = Tape::<f32>::new();
    let gp = tape.constant(generator.net.params().to_tensor());
    let zv = tape.constant(z.to_tensor());
    let img = forward(generator.net.arch(), gp, zv, Mode::Train, ForwardOpts::default())?.output;
    let terms = teacher_terms(teacher, img, labels)?;
    let loss = InversionLoss {
        l_ce: terms.l_ce.item(),
        l_bn: terms.l_bn.item(),
        total: terms.l_ce.item() + terms.l_bn.item(),
    };
    if !loss.total.is_finite() {
        return Err(numeric("inversion loss", format!("{loss:?}")));
    }
    Ok(loss)
}

/// Round-robin labels `0, 1, …, way−1, 0, 1, …`.
pub fn round_robin_labels(way: usize, per_class: usize) -> Vec<usize> {
    (0..way * per_class).map(|i| i % way).collect()
}

/// Per-step losses of one recovery; `losses[0]` is measured before any
/// update, `losses[steps]` on the returned images.
#[derive(Clone, Debug, Default)]
pub struct InversionTrace {
    pub losses: Vec<InversionLoss>,
}

/// Recover a pseudo-task from `teacher`, warm-starting from `generator`.
pub fn recover_task(
    teacher: &PretrainedModelRecord,
    generator: &mut GeneratorState,
    config: &InversionConfig,
    seed: u64,
) -> Result<(PseudoTask, InversionTrace)> {
    if config.per_class == 0 {
        return reject("per_class must be at least 1");
    }
    let net = teacher.network()?;
    let input = net.arch().input_shape;
    let (gs, gc) = generator.output_shape();
    if gs != input.height || gs != input.width || gc != input.channels {
        return reject(format!(
            "generator produces {gs}×{gs}×{gc} images, teacher {} expects {}×{}×{}",
            teacher.id, input.height, input.width, input.channels
        ));
    }
    let way = teacher.way();
    let labels = round_robin_labels(way, config.per_class);
    let mut rng = seed::rng(seed);
    let mut z = LatentBatch::sample(labels.len(), generator.latent_dim, &mut rng);

    let gen_arch = generator.net.arch().clone();
    let gen_mask = gen_arch.trainable_mask();
    let mut g_opt = Adam::new(gen_arch.param_len(), config.lr);
    let mut z_opt = Adam::new(z.codes.len(), config.lr);
    let mut trace = InversionTrace::default();

    for step in 0..=config.steps {
        let tape = Tape::<f32>::new();
        let gp = tape.var(generator.net.params().to_tensor());
        let zv = tape.var(z.to_tensor());
        let img = forward(&gen_arch, gp, zv, Mode::Train, ForwardOpts::default())?.output;
        let terms = teacher_terms(&net, img, &labels)?;
        let total = terms.l_ce.add(terms.l_bn);
        let loss = InversionLoss {
            l_ce: terms.l_ce.item(),
            l_bn: terms.l_bn.item(),
            total: total.item(),
        };
        if !loss.total.is_finite() {
            return Err(numeric(
                format!("inverting {} at step {step}", teacher.id),
                format!("total loss {}", loss.total),
            ));
        }
        trace.losses.push(loss);
        if step == config.steps {
            let images = ImageBatch::new(gs, gs, gc, img.value().to_f32_vec())?;
            let class_keys = (0..way)
                .map(|local| ClassKey {
                    source: teacher.id.clone(),
                    local,
                })
                .collect();
            let task = PseudoTask {
                images,
                labels,
                source_id: teacher.id.clone(),
                class_keys,
            };
            return Ok((task, trace));
        }
        let grads = tape.grad(total, &[gp, zv], false);
        let (gg, gz) = (grads[0].value().to_f32_vec(), grads[1].value().to_f32_vec());
        if !gg.iter().chain(&gz).all(|v| v.is_finite()) {
            return Err(numeric(
                format!("inverting {} at step {step}", teacher.id),
                "non-finite gradient",
            ));
        }
        let mut p = generator.net.params().as_slice().to_vec();
        g_opt.step(&mut p, &gg, Some(&gen_mask));
        generator.net.set_params(crate::nn::ParamVector::new(p))?;
        z_opt.step(&mut z.codes, &gz, None);
    }
    unreachable!("loop returns on its last step")
}

/// Teacher top-1 agreement with the pre-assigned labels.
pub fn teacher_accuracy(teacher: &PretrainedModelRecord, task: &PseudoTask) -> Result<f64> {
    let logits = teacher.network()?.forward_logits(&task.images)?;
    let hits = argmax_rows(&logits)
        .iter()
        .zip(&task.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / task.labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{collect_stats, ArchKind, InputShape, ParamVector};

    fn one_block_teacher() -> NetworkState {
        let arch = ArchSpec::conv_classifier(ArchKind::Conv4Like, InputShape::square(8, 3), 2, 1, 3);
        NetworkState::init(arch, 11, Mode::Eval).unwrap()
    }

    fn images(n: usize) -> ImageBatch {
        let data = (0..n * 8 * 8 * 3).map(|i| ((i * 37 % 101) as f32) / 101.0).collect();
        ImageBatch::new(8, 8, 3, data).unwrap()
    }

    /// Teacher whose running statistics equal the batch statistics of `x`.
    fn matched_teacher(x: &ImageBatch) -> NetworkState {
        let t = one_block_teacher();
        let tape = Tape::<f64>::new();
        let out = forward(
            t.arch(),
            tape.constant(t.params().to_tensor()),
            tape.constant(x.to_tensor()),
            Mode::Train,
            ForwardOpts::default(),
        )
        .unwrap();
        let stats = collect_stats(&out.bn_stats);
        let mut p = t.params().as_slice().to_vec();
        let off = t.arch().param_offsets()[1];
        for c in 0..2 {
            p[off + 4 + c] = stats[0].mean[c] as f32;
            p[off + 6 + c] = stats[0].var[c] as f32;
        }
        NetworkState::new(t.arch().clone(), ParamVector::new(p), Mode::Eval).unwrap()
    }

    fn terms_of(t: &NetworkState, x: &ImageBatch, labels: &[usize]) -> (f64, f64) {
        let tape = Tape::<f64>::new();
        let tt = teacher_terms(t, tape.constant(x.to_tensor()), labels).unwrap();
        (tt.l_ce.item(), tt.l_bn.item())
    }

    #[test]
    fn matched_statistics_give_zero_bn_term() {
        let x = images(4);
        let t = matched_teacher(&x);
        let (_, l_bn) = terms_of(&t, &x, &[0, 1, 2, 0]);
        assert!(l_bn < 1e-10, "{l_bn}");
    }

    #[test]
    fn mean_shift_gives_delta_squared() {
        let x = images(4);
        let t = matched_teacher(&x);
        let delta = 0.25;
        // shifting a conv bias moves that channel's batch mean, variance unchanged
        let mut p = t.params().as_slice().to_vec();
        let conv_bias = 3 * 3 * 3 * 2;
        p[conv_bias + 1] += delta as f32;
        let shifted = NetworkState::new(t.arch().clone(), ParamVector::new(p), Mode::Eval).unwrap();
        let (_, l_bn) = terms_of(&shifted, &x, &[0, 1, 2, 0]);
        assert!((l_bn - delta * delta).abs() < 1e-6, "{l_bn}");
    }

    #[test]
    fn confident_teacher_has_zero_ce() {
        // zero weights, huge bias on label 1 → one-hot prediction
        let t = one_block_teacher();
        let arch = t.arch().clone();
        let mut p = vec![0.0f32; arch.param_len()];
        let offs = arch.param_offsets();
        p[offs[1] + 6..offs[1] + 8].fill(1.0);
        let head = arch.head_index().unwrap();
        let Layer::Linear { inputs, outputs } = arch.layers[head] else { panic!() };
        p[offs[head] + inputs * outputs + 1] = 1e4;
        let t = NetworkState::new(arch, ParamVector::new(p), Mode::Eval).unwrap();
        let (l_ce, _) = terms_of(&t, &images(2), &[1, 1]);
        assert_eq!(l_ce, 0.0);
    }

    #[test]
    fn labels_are_balanced() {
        let y = round_robin_labels(5, 6);
        assert_eq!(y.len(), 30);
        for c in 0..5 {
            assert_eq!(y.iter().filter(|&&l| l == c).count(), 6);
        }
    }
}
