//! Gradient-alignment regularized updates.
//!
//! Each task gradient is re-evaluated after a small displacement towards
//! the mean gradient, `θ − β(∇L̄ − ∇L_i)`. To first order in `β` the mean
//! of the displaced gradients is `∇L̄ + (β/2m)∇Σ‖∇L_i − ∇L̄‖²`, so the
//! update penalizes disagreement between task gradients without ever
//! forming a Hessian.

use crate::error::{numeric, Result};
use crate::nn::BatchStats;

/// One evaluation of a task loss.
#[derive(Clone, Debug)]
pub struct TaskEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Batch statistics seen by the forward pass (empty without BN).
    pub stats: Vec<BatchStats>,
}

pub trait TaskLoss {
    fn evaluate(&self, params: &[f64]) -> Result<TaskEval>;
}

/// Adapter for closures returning `(value, grad)`.
pub struct FnLoss<F>(pub F);

impl<F> TaskLoss for FnLoss<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&self, params: &[f64]) -> Result<TaskEval> {
        let (value, grad) = (self.0)(params)?;
        Ok(TaskEval {
            value,
            grad,
            stats: Vec::new(),
        })
    }
}

/// Results of the first (undisplaced) pass.
#[derive(Clone, Debug)]
pub struct TaskGradients {
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    pub mean_grad: Vec<f64>,
    pub stats: Vec<Vec<BatchStats>>,
}

#[derive(Clone, Debug)]
pub struct IgrOutput {
    /// Direction handed to the optimizer.
    pub update: Vec<f64>,
    pub first_pass: TaskGradients,
}

fn checked(eval: TaskEval, pass: &str, task: usize, len: usize) -> Result<TaskEval> {
    if !eval.value.is_finite() {
        return Err(numeric(format!("{pass}, task {task}"), format!("loss {}", eval.value)));
    }
    if eval.grad.len() != len {
        return Err(numeric(
            format!("{pass}, task {task}"),
            format!("gradient has {} entries, expected {len}", eval.grad.len()),
        ));
    }
    if let Some(k) = eval.grad.iter().position(|g| !g.is_finite()) {
        return Err(numeric(format!("{pass}, task {task}"), format!("non-finite gradient entry {k}")));
    }
    Ok(eval)
}

fn mean_of(rows: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut mean = vec![0.0; len];
    for row in rows {
        for (m, g) in mean.iter_mut().zip(row) {
            *m += g;
        }
    }
    let m = rows.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    mean
}

/// Every task gradient at `params` and their mean.
pub fn task_gradients(params: &[f64], losses: &[&dyn TaskLoss]) -> Result<TaskGradients> {
    if losses.is_empty() {
        return crate::error::reject("at least one task loss is required");
    }
    let mut out = TaskGradients {
        losses: Vec::with_capacity(losses.len()),
        grads: Vec::with_capacity(losses.len()),
        mean_grad: Vec::new(),
        stats: Vec::with_capacity(losses.len()),
    };
    for (i, loss) in losses.iter().enumerate() {
        let eval = checked(loss.evaluate(params)?, "pass 1", i, params.len())?;
        out.losses.push(eval.value);
        out.grads.push(eval.grad);
        out.stats.push(eval.stats);
    }
    out.mean_grad = mean_of(&out.grads, params.len());
    Ok(out)
}

/// Mean of the task gradients evaluated at their displaced points.
///
/// `params` is only read; each displaced point is a fresh vector.
pub fn igr_update_gradient(params: &[f64], losses: &[&dyn TaskLoss], beta: f64) -> Result<IgrOutput> {
    let first_pass = task_gradients(params, losses)?;
    let mut displaced_grads = Vec::with_capacity(losses.len());
    for (i, loss) in losses.iter().enumerate() {
        let point: Vec<f64> = params
            .iter()
            .zip(&first_pass.mean_grad)
            .zip(&first_pass.grads[i])
            .map(|((p, mg), g)| p - beta * (mg - g))
            .collect();
        displaced_grads.push(checked(loss.evaluate(&point)?, "pass 2", i, params.len())?.grad);
    }
    Ok(IgrOutput {
        update: mean_of(&displaced_grads, params.len()),
        first_pass,
    })
}

/// Spread of a set of task gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientSpread {
    /// `(1/2m) Σ ‖g_i − ḡ‖²`.
    pub regularizer: f64,
    /// Mean cosine over unordered pairs; pairs with a zero-norm member
    /// count as 0, and a single gradient counts as 1.
    pub mean_cosine: f64,
}

pub fn explicit_regularizer(grads: &[Vec<f64>]) -> GradientSpread {
    let m = grads.len();
    if m == 0 {
        return GradientSpread {
            regularizer: 0.0,
            mean_cosine: 1.0,
        };
    }
    let len = grads[0].len();
    let mean = mean_of(grads, len);
    let regularizer = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / (2.0 * m as f64);
    if m == 1 {
        return GradientSpread {
            regularizer,
            mean_cosine: 1.0,
        };
    }
    let norms: Vec<f64> = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            pairs += 1;
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                total += dot / (norms[i] * norms[j]);
            }
        }
    }
    GradientSpread {
        regularizer,
        mean_cosine: total / pairs as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_beta_and_single_task_degenerate_to_the_mean() {
        let a = FnLoss(|p: &[f64]| Ok((p[0] * p[0] * p[1], vec![2.0 * p[0] * p[1], p[0] * p[0]])));
        let b = FnLoss(|p: &[f64]| Ok((p[1].sin(), vec![0.0, p[1].cos()])));
        let theta = vec![0.7, -1.3];
        let out = igr_update_gradient(&theta, &[&a, &b], 0.0).unwrap();
        assert_eq!(out.update, out.first_pass.mean_grad);
        let single = igr_update_gradient(&theta, &[&a], 0.5).unwrap();
        assert_eq!(single.update, single.first_pass.grads[0]);
    }

    #[test]
    fn spread_arithmetic() {
        let g = vec![1.0, -2.0, 2.0];
        let s = explicit_regularizer(&[g.clone(), g.clone()]);
        assert_eq!(s.regularizer, 0.0);
        assert!((s.mean_cosine - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let s = explicit_regularizer(&[g, neg]);
        assert!((s.regularizer - 4.5).abs() < 1e-12);
        assert!((s.mean_cosine + 1.0).abs() < 1e-15);
        assert_eq!(explicit_regularizer(&[vec![0.0, 0.0], vec![1.0, 0.0]]).mean_cosine, 0.0);
    }

    #[test]
    fn non_finite_gradient_names_pass_and_task() {
        let ok = FnLoss(|p: &[f64]| Ok((p[0], vec![1.0])));
        let bad = FnLoss(|p: &[f64]| Ok((p[0], vec![if p[0] == 0.0 { 3.0 } else { f64::NAN }])));
        let err = igr_update_gradient(&[0.0], &[&ok, &bad], 1.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pass 2") && msg.contains("task 1"), "{msg}");
    }
}
