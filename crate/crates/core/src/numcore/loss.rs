//! Loss functions with exact gradients.
//!
//! Losses on logits report `grad_input` with respect to the logits; the
//! `through_model` helper chains them back to parameters and model inputs.

use super::model::{BatchNormState, BnMode, BnStatGrad, BnStats, Model};
use super::tensor::{log_softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_params: Option<Vec<f64>>,
    pub grad_input: Option<Tensor>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        LossValue {
            value,
            grad_params: None,
            grad_input: None,
        }
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "expected [batch, classes] logits, got {:?}",
            logits.shape()
        )));
    }
    if labels.len() != logits.batch() {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.batch()
        )));
    }
    let classes = logits.row_len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    check_labels(logits, labels)?;
    let batch = logits.batch();
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let classes = logits.row_len();
    let logp = log_softmax(logits, 1.0);
    let mut value = 0.0;
    let mut grad = logp.map(f64::exp);
    for (b, &y) in labels.iter().enumerate() {
        value -= logp.data()[b * classes + y];
        grad.data_mut()[b * classes + y] -= 1.0;
    }
    let inv = 1.0 / batch as f64;
    Ok(LossValue {
        value: value * inv,
        grad_params: None,
        grad_input: Some(grad.scale(inv)),
    })
}

/// `tau^2 * mean_b KL(softmax(teacher/tau) || softmax(student/tau))`.
pub fn kl_divergence(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    student_logits.expect_shape(teacher_logits.shape())?;
    let logp = log_softmax(teacher_logits, tau);
    kl_impl(&logp.map(f64::exp), Some(&logp), student_logits, tau)
}

/// Same as [`kl_divergence`] with the teacher already given as
/// probabilities (e.g. an ensemble average of tempered softmaxes).
pub fn kl_to_targets(targets: &Tensor, student_logits: &Tensor, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    student_logits.expect_shape(targets.shape())?;
    kl_impl(targets, None, student_logits, tau)
}

fn kl_impl(targets: &Tensor, log_targets: Option<&Tensor>, student_logits: &Tensor, tau: f64) -> Result<LossValue> {
    let batch = student_logits.batch();
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let logq = log_softmax(student_logits, tau);
    let mut value = 0.0;
    for (i, (&p, &lq)) in targets.data().iter().zip(logq.data()).enumerate() {
        if p > 0.0 {
            let lp = log_targets.map_or_else(|| p.ln(), |l| l.data()[i]);
            value += p * (lp - lq);
        }
    }
    let inv = 1.0 / batch as f64;
    let mut grad = logq.map(f64::exp);
    for (g, &p) in grad.data_mut().iter_mut().zip(targets.data()) {
        *g = (*g - p) * tau * inv;
    }
    Ok(LossValue {
        // Clamp tiny negative rounding so the Gibbs bound holds exactly.
        value: (value * inv * tau * tau).max(0.0),
        grad_params: None,
        grad_input: Some(grad),
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Anisotropic squared-difference total variation, averaged over the batch.
pub fn total_variation(images: &Tensor) -> Result<LossValue> {
    let s = images.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::invalid(format!(
            "total variation needs [batch, channels, H>=2, W>=2], got {s:?}"
        )));
    }
    let (batch, channels, h, w) = (s[0], s[1], s[2], s[3]);
    let x = images.data();
    let mut grad = vec![0.0; x.len()];
    let mut value = 0.0;
    for plane in 0..batch * channels {
        let base = plane * h * w;
        for i in 0..h {
            for j in 0..w {
                let a = base + i * w + j;
                if j + 1 < w {
                    let d = x[a + 1] - x[a];
                    value += d * d;
                    grad[a + 1] += 2.0 * d;
                    grad[a] -= 2.0 * d;
                }
                if i + 1 < h {
                    let d = x[a + w] - x[a];
                    value += d * d;
                    grad[a + w] += 2.0 * d;
                    grad[a] -= 2.0 * d;
                }
            }
        }
    }
    let inv = 1.0 / batch.max(1) as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok(LossValue {
        value: value * inv,
        grad_params: None,
        grad_input: Some(Tensor::new(s.to_vec(), grad)?),
    })
}

/// Batch-statistic mismatch and its gradient with respect to the statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRegularizer {
    pub value: f64,
    pub stat_grads: Vec<BnStatGrad>,
}

/// `sum_l ||mu_l - mu_ref_l||^2 + ||var_l - var_ref_l||^2`.
pub fn bn_regularizer(batch_stats: &[BnStats], reference: &[BatchNormState]) -> Result<BnRegularizer> {
    if batch_stats.len() != reference.len() {
        return Err(Error::invalid(format!(
            "{} batch-norm layers observed but {} reference states",
            batch_stats.len(),
            reference.len()
        )));
    }
    let mut value = 0.0;
    let mut stat_grads = Vec::with_capacity(reference.len());
    for (b, r) in batch_stats.iter().zip(reference) {
        if b.mean.len() != r.channels() || b.var.len() != r.channels() {
            return Err(Error::invalid("batch-norm channel count mismatch"));
        }
        let mut gm = Vec::with_capacity(b.mean.len());
        let mut gv = Vec::with_capacity(b.var.len());
        for (m, rm) in b.mean.iter().zip(&r.running_mean) {
            value += (m - rm) * (m - rm);
            gm.push(2.0 * (m - rm));
        }
        for (v, rv) in b.var.iter().zip(&r.running_var) {
            value += (v - rv) * (v - rv);
            gv.push(2.0 * (v - rv));
        }
        stat_grads.push(BnStatGrad { mean: gm, var: gv });
    }
    Ok(BnRegularizer { value, stat_grads })
}

/// Evaluate a loss on a model's logits and backpropagate it, returning the
/// loss with gradients for the parameters and the model input.
pub fn through_model(
    model: &Model,
    x: &Tensor,
    mode: BnMode,
    head: impl FnOnce(&Tensor) -> Result<LossValue>,
) -> Result<LossValue> {
    let trace = model.forward_traced(x, mode)?;
    let head = head(trace.logits())?;
    let grad_logits = head
        .grad_input
        .ok_or_else(|| Error::invalid("loss head must provide a logit gradient"))?;
    let grads = model.backward(&trace, &grad_logits, None)?;
    Ok(LossValue {
        value: head.value,
        grad_params: Some(grads.params),
        grad_input: Some(grads.input),
    })
}

/// Batch-norm regularizer of a single model on `x`, with gradients for the
/// parameters and the input.
pub fn bn_regularizer_loss(model: &Model, x: &Tensor, mode: BnMode) -> Result<LossValue> {
    let trace = model.forward_traced(x, mode)?;
    let reg = bn_regularizer(&trace.batch_stats(), model.bn_states())?;
    let zero = Tensor::zeros(trace.logits().shape().to_vec());
    let grads = model.backward(&trace, &zero, Some(&reg.stat_grads))?;
    Ok(LossValue {
        value: reg.value,
        grad_params: Some(grads.params),
        grad_input: Some(grads.input),
    })
}
