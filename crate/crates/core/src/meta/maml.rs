use crate::autograd::{Tape, Var};
use crate::datasets::Episode;
use crate::error::{numeric, reject, Result};
use crate::nn::{cross_entropy, forward, ArchSpec, ForwardOpts, ImageBatch, Mode, NetworkState, ParamVector};
use crate::optim::Adam;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct MamlOutput<F> {
    pub outer_loss: f64,
    pub inner_losses: Vec<f64>,
    pub grad: Tensor<F>,
}

/// Gradient of `outer(θ_c)` with respect to `θ`, where `θ_c` follows
/// `inner_steps` gradient steps on `inner` from `θ`.
///
/// With `second_order` off the inner gradients are treated as constants,
/// so the result is `∇outer(θ_c)`.
pub fn maml_outer_grad<F: Real>(
    params: &Tensor<F>,
    inner: impl for<'t> Fn(&'t Tape<F>, Var<'t, F>) -> Result<Var<'t, F>>,
    outer: impl for<'t> Fn(&'t Tape<F>, Var<'t, F>) -> Result<Var<'t, F>>,
    inner_lr: f64,
    inner_steps: usize,
    second_order: bool,
) -> Result<MamlOutput<F>> {
    let tape = Tape::<F>::new();
    let theta = tape.var(params.clone());
    let mut adapted = theta;
    let mut inner_losses = Vec::with_capacity(inner_steps);
    for step in 0..inner_steps {
        let loss = inner(&tape, adapted)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(numeric(format!("inner step {step}"), format!("loss {value}")));
        }
        inner_losses.push(value);
        let g = tape.grad(loss, &[adapted], second_order)[0];
        let g = if second_order { g } else { tape.constant(g.value()) };
        adapted = adapted.sub(g.scale(inner_lr));
    }
    let loss = outer(&tape, adapted)?;
    let outer_loss = loss.item();
    if !outer_loss.is_finite() {
        return Err(numeric("outer loss", format!("loss {outer_loss}")));
    }
    let grad = tape.grad(loss, &[theta], false)[0].value();
    if !grad.all_finite() {
        return Err(numeric("outer gradient", "non-finite entries"));
    }
    Ok(MamlOutput {
        outer_loss,
        inner_losses,
        grad,
    })
}

/// Train-mode cross-entropy of `arch` on a fixed labelled batch.
pub fn batch_ce<'t, F: Real>(
    arch: &ArchSpec,
    tape: &'t Tape<F>,
    params: Var<'t, F>,
    images: &Tensor<F>,
    labels: &[usize],
) -> Result<Var<'t, F>> {
    let x = tape.constant(images.clone());
    let out = forward(arch, params, x, Mode::Train, ForwardOpts::default())?;
    cross_entropy(out.output, labels)
}

/// MAML gradient on one episode for a network with `arch`.
pub fn episode_outer_grad<K>(
    arch: &ArchSpec,
    params: &ParamVector,
    episode: &Episode<K>,
    inner_lr: f64,
    inner_steps: usize,
    second_order: bool,
) -> Result<MamlOutput<f32>> {
    let way = episode.class_map.len();
    if way > arch.num_outputs {
        return reject(format!("{way}-way episode for a {}-output head", arch.num_outputs));
    }
    let support: Tensor<f32> = episode.support.to_tensor();
    let query: Tensor<f32> = episode.query.to_tensor();
    maml_outer_grad(
        &params.to_tensor(),
        |tape, p| batch_ce(arch, tape, p, &support, &episode.support_labels),
        |tape, p| batch_ce(arch, tape, p, &query, &episode.query_labels),
        inner_lr,
        inner_steps,
        second_order,
    )
}

/// Meta-model and optimizer state.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub model: NetworkState,
    /// Moments for the distillation path.
    pub kd_opt: Adam,
    /// Moments for the replay path.
    pub replay_opt: Adam,
    /// Completed training iterations.
    pub epoch: usize,
}

impl MetaState {
    pub fn new(model: NetworkState, meta_lr: f64, outer_lr: f64) -> Self {
        let len = model.arch().param_len();
        MetaState {
            model: model.with_mode(Mode::Train),
            kd_opt: Adam::new(len, meta_lr),
            replay_opt: Adam::new(len, outer_lr),
            epoch: 0,
        }
    }

    /// Apply `grad` to the trainable parameters with `opt`.
    pub(crate) fn apply(&mut self, grad: &[f32], replay: bool) -> Result<()> {
        let mask = self.model.arch().trainable_mask();
        let mut p = self.model.params().as_slice().to_vec();
        let opt = if replay { &mut self.replay_opt } else { &mut self.kd_opt };
        opt.step(&mut p, grad, Some(&mask));
        self.model.set_params(ParamVector::new(p))
    }
}

/// One MAML update of the meta-model on `episode`; returns the outer loss.
pub fn maml_step<K>(
    meta: &mut MetaState,
    episode: &Episode<K>,
    inner_lr: f64,
    inner_steps: usize,
    second_order: bool,
) -> Result<f64> {
    let out = episode_outer_grad(
        meta.model.arch(),
        meta.model.params(),
        episode,
        inner_lr,
        inner_steps,
        second_order,
    )?;
    meta.apply(&out.grad.to_f32_vec(), true)?;
    Ok(out.outer_loss)
}

/// Support-set adaptation by plain gradient steps on a copy of `model`.
pub fn adapt(model: &NetworkState, support: &ImageBatch, labels: &[usize], lr: f64, steps: usize) -> Result<NetworkState> {
    let mut net = model.with_mode(Mode::Train);
    let mask = net.arch().trainable_mask();
    for step in 0..steps {
        let (value, grad, _) = net.ce_grad(support, labels).map_err(|e| match e {
            crate::Error::NumericFailure { detail, .. } => numeric(format!("adaptation step {step}"), detail),
            other => other,
        })?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(numeric(format!("adaptation step {step}"), format!("non-finite gradient at loss {value}")));
        }
        let mut p = net.params().as_slice().to_vec();
        crate::optim::sgd_step(&mut p, &grad, lr, Some(&mask));
        net.set_params(ParamVector::new(p))?;
    }
    Ok(net)
}
