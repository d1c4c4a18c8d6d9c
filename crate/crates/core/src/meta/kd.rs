use crate::autograd::Var;
use crate::error::{reject, Result};
use crate::nn::{cross_entropy, kl_to_logits, softmax_rows};
use crate::tensor::{Real, Tensor};

/// First `way` columns of `[B, K]` logits.
pub fn slice_logits<'t, F: Real>(logits: Var<'t, F>, way: usize) -> Result<Var<'t, F>> {
    let shape = logits.shape();
    let (b, k) = (shape[0], shape[1]);
    if k < way {
        return reject(format!("student head has {k} outputs, teacher needs {way}"));
    }
    if k == way {
        return Ok(logits);
    }
    let index = (0..b)
        .flat_map(|r| (0..way).map(move |c| (r * k + c) as u32))
        .collect();
    Ok(logits.gather(index, vec![b, way]))
}

/// Teacher soft targets at `temperature`.
pub fn teacher_targets<F: Real>(teacher_logits: &Tensor<F>, temperature: f64) -> Tensor<F> {
    softmax_rows(&teacher_logits.map(|v| F::from_f64(v.to_f64() / temperature)))
}

/// `KL(teacher ‖ student) + CE(student, labels)`, both batch means, with
/// teacher-local labels mapped onto the first `way` student outputs.
pub fn kd_loss_var<'t, F: Real>(
    targets: &Tensor<F>,
    student_logits: Var<'t, F>,
    labels: &[usize],
    temperature: f64,
) -> Result<Var<'t, F>> {
    let (b, way) = targets.dims2();
    if labels.len() != b {
        return reject(format!("{} labels for {b} teacher rows", labels.len()));
    }
    let s = slice_logits(student_logits, way)?;
    let kl = kl_to_logits(targets, s.scale(1.0 / temperature));
    Ok(kl.add(cross_entropy(s, labels)?))
}
