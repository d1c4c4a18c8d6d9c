//! Small convolutional networks over flat parameter vectors.

pub mod arch;
pub mod forward;

use serde::{Deserialize, Serialize};

pub use arch::{ActShape, ArchKind, ArchSpec, InputShape, Layer};
pub use forward::{
    argmax_rows, cross_entropy, forward, kl_to_logits, log_softmax, one_hot, softmax_rows, BnStats,
    ForwardOpts, ForwardOut, Mode, BN_EPS, BN_MOMENTUM,
};

use crate::autograd::{Tape, Var};
use crate::error::{numeric, reject, Result};
use crate::tensor::{Real, Tensor};

/// A batch of NHWC images stored as `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBatch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || !data.len().is_multiple_of(per) {
            return reject(format!(
                "{} values do not form {height}×{width}×{channels} images",
                data.len()
            ));
        }
        Ok(ImageBatch {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        ImageBatch {
            height,
            width,
            channels,
            data: Vec::new(),
        }
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f32]) {
        assert_eq!(image.len(), self.image_len(), "image size mismatch");
        self.data.extend_from_slice(image);
    }

    /// Copy out the images at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut out = ImageBatch::empty(self.height, self.width, self.channels);
        out.data.reserve(indices.len() * self.image_len());
        for &i in indices {
            out.push(self.image(i));
        }
        out
    }

    pub fn append(&mut self, other: &ImageBatch) {
        assert_eq!(
            (self.height, self.width, self.channels),
            (other.height, other.width, other.channels)
        );
        self.data.extend_from_slice(&other.data);
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_f32(
            vec![self.len(), self.height, self.width, self.channels],
            &self.data,
        )
    }

    pub fn matches(&self, shape: InputShape) -> bool {
        self.height == shape.height && self.width == shape.width && self.channels == shape.channels
    }
}

/// Flat parameters in canonical layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f32>);

impl ParamVector {
    pub fn new(values: Vec<f32>) -> Self {
        ParamVector(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_f32(vec![self.0.len()], &self.0)
    }

    /// Little-endian `f32` blob with no header.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) {
            return reject(format!("weight blob of {} bytes is not a whole number of f32", bytes.len()));
        }
        Ok(ParamVector(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ))
    }
}

/// An architecture, its parameters and a normalization mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    arch: ArchSpec,
    params: ParamVector,
    pub mode: Mode,
}

impl NetworkState {
    pub fn new(arch: ArchSpec, params: ParamVector, mode: Mode) -> Result<Self> {
        arch.validate()?;
        check_params(&arch, params.as_slice())?;
        Ok(NetworkState { arch, params, mode })
    }

    /// Freshly initialized parameters.
    pub fn init(arch: ArchSpec, seed: u64, mode: Mode) -> Result<Self> {
        arch.validate()?;
        let params = ParamVector::new(arch.init_params(seed));
        Ok(NetworkState { arch, params, mode })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        check_params(&self.arch, params.as_slice())?;
        self.params = params;
        Ok(())
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        NetworkState {
            mode,
            ..self.clone()
        }
    }

    /// Logits for `batch`; never mutates running statistics.
    pub fn forward_logits(&self, batch: &ImageBatch) -> Result<Tensor<f32>> {
        self.forward_logits_as::<f32>(batch)
    }

    pub fn forward_logits_as<F: Real>(&self, batch: &ImageBatch) -> Result<Tensor<F>> {
        self.check_batch(batch)?;
        let tape = Tape::<F>::new();
        let p = tape.constant(self.params.to_tensor());
        let x = tape.constant(batch.to_tensor());
        let out = forward(&self.arch, p, x, self.mode, ForwardOpts::default())?;
        let logits = out.output.value();
        if !logits.all_finite() {
            return Err(numeric("forward_logits", "non-finite logits"));
        }
        Ok(logits)
    }

    /// Train-mode forward that also commits the batch statistics to the
    /// running statistics.
    pub fn train_forward(&mut self, batch: &ImageBatch) -> Result<Tensor<f32>> {
        self.check_batch(batch)?;
        let tape = Tape::<f32>::new();
        let p = tape.constant(self.params.to_tensor());
        let x = tape.constant(batch.to_tensor());
        let out = forward(&self.arch, p, x, Mode::Train, ForwardOpts::default())?;
        let stats = collect_stats(&out.bn_stats);
        commit_bn_stats(&self.arch, &mut self.params.0, &stats);
        Ok(out.output.value())
    }

    /// Gradient of a scalar objective of the parameters, in canonical order.
    pub fn loss_grad(
        &self,
        loss: impl for<'t> FnOnce(&'t Tape<f32>, Var<'t, f32>) -> Result<Var<'t, f32>>,
    ) -> Result<(f64, ParamVector)> {
        let (value, g) = loss_grad(&self.params.to_tensor::<f32>(), loss)?;
        Ok((value, ParamVector(g.to_f32_vec())))
    }

    /// Rows are `∇ log P(y_j | x_j)` in canonical order.
    pub fn per_sample_loglik_grads(&self, batch: &ImageBatch, labels: &[usize]) -> Result<Vec<Vec<f32>>> {
        let rows = per_sample_loglik_grads::<f32>(
            &self.arch,
            &self.params.to_tensor(),
            self.mode,
            batch,
            labels,
        )?;
        Ok(rows.iter().map(Tensor::to_f32_vec).collect())
    }

    /// Mean cross-entropy on `batch`, its gradient, and the batch
    /// statistics the forward pass saw (empty in eval mode).
    pub fn ce_grad(&self, batch: &ImageBatch, labels: &[usize]) -> Result<(f64, Vec<f32>, Vec<BatchStats>)> {
        self.check_batch(batch)?;
        let tape = Tape::<f32>::new();
        let p = tape.var(self.params.to_tensor());
        let x = tape.constant(batch.to_tensor());
        let out = forward(&self.arch, p, x, self.mode, ForwardOpts::default())?;
        let loss = cross_entropy(out.output, labels)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(numeric("cross-entropy", format!("loss evaluated to {value}")));
        }
        let g = tape.grad(loss, &[p], false)[0].value().to_f32_vec();
        Ok((value, g, collect_stats(&out.bn_stats)))
    }

    /// Write batch statistics into the running statistics.
    pub fn commit_bn_stats(&mut self, stats: &[BatchStats]) {
        commit_bn_stats(&self.arch, &mut self.params.0, stats);
    }

    pub(crate) fn check_batch(&self, batch: &ImageBatch) -> Result<()> {
        if !batch.matches(self.arch.input_shape) {
            return reject(format!(
                "batch images are {}×{}×{}, network expects {}×{}×{}",
                batch.height,
                batch.width,
                batch.channels,
                self.arch.input_shape.height,
                self.arch.input_shape.width,
                self.arch.input_shape.channels
            ));
        }
        if batch.is_empty() {
            return reject("empty batch");
        }
        Ok(())
    }
}

fn check_params(arch: &ArchSpec, values: &[f32]) -> Result<()> {
    if values.len() != arch.param_len() {
        return reject(format!(
            "parameter vector has {} entries, architecture needs {}",
            values.len(),
            arch.param_len()
        ));
    }
    let offsets = arch.param_offsets();
    for (layer, &off) in arch.layers.iter().zip(&offsets) {
        if let Layer::BatchNorm { channels } = *layer {
            let rv = &values[off + 3 * channels..off + 4 * channels];
            if rv.iter().any(|&v| v < 0.0 || v.is_nan()) {
                return reject("negative running variance");
            }
        }
    }
    Ok(())
}

/// Evaluate `loss` at `params` and return its value and gradient.
pub fn loss_grad<F: Real>(
    params: &Tensor<F>,
    loss: impl for<'t> FnOnce(&'t Tape<F>, Var<'t, F>) -> Result<Var<'t, F>>,
) -> Result<(f64, Tensor<F>)> {
    let tape = Tape::<F>::new();
    let p = tape.var(params.clone());
    let l = loss(&tape, p)?;
    let value = l.item();
    if !value.is_finite() {
        return Err(numeric("loss_grad", format!("loss evaluated to {value}")));
    }
    let g = tape.grad(l, &[p], false)[0].value();
    if !g.all_finite() {
        return Err(numeric("loss_grad", "non-finite gradient"));
    }
    Ok((value, g))
}

/// Per-sample gradients of `log P(y_j | x_j)` from one batched forward pass.
///
/// In train mode the samples interact through batch statistics; each row
/// is still the gradient of that sample's log-likelihood within the batch.
pub fn per_sample_loglik_grads<F: Real>(
    arch: &ArchSpec,
    params: &Tensor<F>,
    mode: Mode,
    batch: &ImageBatch,
    labels: &[usize],
) -> Result<Vec<Tensor<F>>> {
    if !batch.matches(arch.input_shape) {
        return reject("batch shape does not match architecture input");
    }
    forward::check_labels(labels, batch.len(), arch.num_outputs)?;
    let tape = Tape::<F>::new();
    let p = tape.var(params.clone());
    let x = tape.constant(batch.to_tensor());
    let out = forward(arch, p, x, mode, ForwardOpts::default())?;
    let lp = log_softmax(out.output);
    if !lp.value().all_finite() {
        return Err(numeric("per_sample_loglik_grads", "non-finite log-probabilities"));
    }
    let k = arch.num_outputs;
    let mark = tape.len();
    let mut rows = Vec::with_capacity(labels.len());
    for (j, &y) in labels.iter().enumerate() {
        let mut seed = vec![F::zero(); labels.len() * k];
        seed[j * k + y] = F::one();
        let g = tape.grad_with_seed(lp, Tensor::new(vec![labels.len(), k], seed), &[p], false)[0].value();
        tape.truncate(mark);
        rows.push(g);
    }
    Ok(rows)
}

/// Plain per-layer batch statistics, detached from any tape.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn collect_stats<F: Real>(stats: &[BnStats<'_, F>]) -> Vec<BatchStats> {
    stats
        .iter()
        .map(|s| BatchStats {
            layer: s.layer,
            mean: s.mean.value().to_f64_vec(),
            var: s.var.value().to_f64_vec(),
        })
        .collect()
}

/// `running ← (1 − momentum)·running + momentum·batch` for every BN layer.
pub fn commit_bn_stats(arch: &ArchSpec, params: &mut [f32], stats: &[BatchStats]) {
    let offsets = arch.param_offsets();
    for s in stats {
        let Layer::BatchNorm { channels } = arch.layers[s.layer] else {
            continue;
        };
        let off = offsets[s.layer];
        for c in 0..channels {
            let rm = &mut params[off + 2 * channels + c];
            *rm = ((1.0 - BN_MOMENTUM) * *rm as f64 + BN_MOMENTUM * s.mean[c]) as f32;
            let rv = &mut params[off + 3 * channels + c];
            *rv = ((1.0 - BN_MOMENTUM) * *rv as f64 + BN_MOMENTUM * s.var[c]).max(0.0) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn tiny_arch() -> ArchSpec {
        ArchSpec::conv_classifier(ArchKind::Conv4Like, InputShape::square(8, 2), 3, 1, 4)
    }

    fn random_batch(n: usize, shape: InputShape, seed: u64) -> ImageBatch {
        let mut rng = crate::seed::rng(seed);
        let data = (0..n * shape.elements()).map(|_| rng.random::<f32>()).collect();
        ImageBatch::new(shape.height, shape.width, shape.channels, data).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let arch = tiny_arch();
        let mut p = vec![0.0; arch.param_len()];
        // running variances must stay valid; gains are zero anyway
        let offsets = arch.param_offsets();
        for (l, &off) in arch.layers.iter().zip(&offsets) {
            if let Layer::BatchNorm { channels } = *l {
                p[off + 3 * channels..off + 4 * channels].fill(1.0);
            }
        }
        let st = NetworkState::new(arch.clone(), ParamVector::new(p), Mode::Eval).unwrap();
        let x = random_batch(3, arch.input_shape, 1);
        let logits = st.forward_logits(&x).unwrap();
        assert_eq!(logits.shape(), &[3, 4]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let arch = tiny_arch();
        let st = NetworkState::init(arch, 0, Mode::Eval).unwrap();
        let x = random_batch(2, InputShape::square(6, 2), 0);
        assert!(st.forward_logits(&x).is_err());
    }

    #[test]
    fn eval_equals_train_when_running_stats_match_batch() {
        let arch = tiny_arch();
        let mut st = NetworkState::init(arch.clone(), 3, Mode::Train).unwrap();
        let x = random_batch(5, arch.input_shape, 4);
        let tape = Tape::<f64>::new();
        let out = forward(
            &arch,
            tape.constant(st.params().to_tensor()),
            tape.constant(x.to_tensor()),
            Mode::Train,
            ForwardOpts::default(),
        )
        .unwrap();
        let stats = collect_stats(&out.bn_stats);
        let mut p = st.params().as_slice().to_vec();
        let offsets = arch.param_offsets();
        for s in &stats {
            let Layer::BatchNorm { channels } = arch.layers[s.layer] else { unreachable!() };
            for c in 0..channels {
                p[offsets[s.layer] + 2 * channels + c] = s.mean[c] as f32;
                p[offsets[s.layer] + 3 * channels + c] = s.var[c] as f32;
            }
        }
        st.set_params(ParamVector::new(p)).unwrap();
        let train = st.forward_logits_as::<f64>(&x).unwrap();
        let eval = st.with_mode(Mode::Eval).forward_logits_as::<f64>(&x).unwrap();
        for (a, b) in train.data().iter().zip(eval.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn set_get_roundtrip_and_length_check() {
        let arch = tiny_arch();
        let mut st = NetworkState::init(arch.clone(), 9, Mode::Eval).unwrap();
        let x = random_batch(2, arch.input_shape, 2);
        let before = st.forward_logits(&x).unwrap();
        st.set_params(st.params().clone()).unwrap();
        assert_eq!(before, st.forward_logits(&x).unwrap());
        let mut p = st.params().as_slice().to_vec();
        p[5] += 0.25;
        st.set_params(ParamVector::new(p.clone())).unwrap();
        let back = st.params().as_slice();
        let diffs: Vec<usize> = (0..p.len())
            .filter(|&i| back[i] != NetworkState::init(arch.clone(), 9, Mode::Eval).unwrap().params().as_slice()[i])
            .collect();
        assert_eq!(diffs, vec![5]);
        assert!(st.set_params(ParamVector::new(vec![0.0; 3])).is_err());
    }

    #[test]
    fn train_forward_updates_running_stats_as_convex_combination() {
        let arch = tiny_arch();
        let mut st = NetworkState::init(arch.clone(), 1, Mode::Train).unwrap();
        let x = random_batch(4, arch.input_shape, 8);
        let old = st.params().as_slice().to_vec();
        st.train_forward(&x).unwrap();
        let new = st.params().as_slice();
        let off = arch.param_offsets()[1];
        let Layer::BatchNorm { channels } = arch.layers[1] else { panic!() };
        for c in 0..channels {
            let rv = new[off + 3 * channels + c];
            assert!(rv >= 0.0);
            // old var was 1, so new var lies between batch var and 1
            assert!(rv != old[off + 3 * channels + c]);
        }
    }

    #[test]
    fn uniform_logit_cross_entropy_gradient() {
        let tape = Tape::<f64>::new();
        let z = tape.var(Tensor::zeros(&[1, 4]));
        let l = cross_entropy(z, &[2]).unwrap();
        let g = tape.grad(l, &[z], false)[0].value();
        assert_eq!(g.data(), &[0.25, 0.25, 0.25 - 1.0, 0.25]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let st = NetworkState::init(tiny_arch(), 5, Mode::Eval).unwrap();
        let (_, g) = st.loss_grad(|_, p| Ok(p.mul(p).sum().scale(0.5))).unwrap();
        assert_eq!(g.as_slice(), st.params().as_slice());
    }

    #[test]
    fn per_sample_rows_match_single_sample_nll_and_average_to_batch_gradient() {
        let arch = tiny_arch();
        let st = NetworkState::init(arch.clone(), 2, Mode::Eval).unwrap();
        let p = st.params().to_tensor::<f64>();
        let x = random_batch(3, arch.input_shape, 6);
        let labels = [1, 3, 1];
        let rows = per_sample_loglik_grads(&arch, &p, Mode::Eval, &x, &labels).unwrap();
        for (j, row) in rows.iter().enumerate() {
            let xj = x.select(&[j]);
            let (_, g) = loss_grad(&p, |tape, pv| {
                let out = forward(&arch, pv, tape.constant(xj.to_tensor()), Mode::Eval, ForwardOpts::default())?;
                cross_entropy(out.output, &labels[j..=j])
            })
            .unwrap();
            for (a, b) in row.data().iter().zip(g.data()) {
                assert!((a + b).abs() < 1e-12);
            }
        }
        let (_, gb) = loss_grad(&p, |tape, pv| {
            let out = forward(&arch, pv, tape.constant(x.to_tensor()), Mode::Eval, ForwardOpts::default())?;
            cross_entropy(out.output, &labels)
        })
        .unwrap();
        for i in 0..gb.len() {
            let mean: f64 = rows.iter().map(|r| r.data()[i]).sum::<f64>() / 3.0;
            assert!((mean + gb.data()[i]).abs() < 1e-12);
        }
        assert!(per_sample_loglik_grads(&arch, &p, Mode::Eval, &x, &[0, 4, 1]).is_err());
    }
}
