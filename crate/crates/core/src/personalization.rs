//! Per-client fine-tuning of the cluster model, regularized towards both the
//! cluster model and the client's own local model, plus evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{accuracy, ClientModel, Dataset};
use crate::numcore::{cross_entropy, kl_divergence, BnMode, LossValue, Model, Tensor};
use crate::optim::{minibatches, Optimizer, OptimizerKind};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationConfig {
    /// Weight of the KL term towards the cluster model.
    pub gamma: f64,
    /// Weight of the KL term towards the client's local model.
    pub delta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        PersonalizationConfig {
            gamma: 0.5,
            delta: 0.3,
            epochs: 10,
            lr: 1e-2,
            batch_size: 32,
            tau: 20.0,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.delta >= 0.0) {
            return Err(Error::invalid("gamma and delta must be non-negative"));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.tau > 0.0) {
            return Err(Error::invalid("lr must be non-negative and tau positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kl_cluster: f64,
    pub kl_local: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedModel {
    pub client: usize,
    pub cluster: usize,
    pub model: Model,
    /// Loss over the whole shard after fine-tuning, inference statistics.
    pub final_loss: LossBreakdown,
}

#[allow(clippy::too_many_arguments)]
fn loss_from_logits(
    f_pers: &Model,
    x: &Tensor,
    mode: BnMode,
    cluster_logits: &Tensor,
    local_logits: &Tensor,
    labels: &[usize],
    gamma: f64,
    delta: f64,
    tau: f64,
) -> Result<(LossValue, LossBreakdown, crate::numcore::Trace)> {
    let trace = f_pers.forward_traced(x, mode)?;
    let ce = cross_entropy(trace.logits(), labels)?;
    let kc = kl_divergence(cluster_logits, trace.logits(), tau)?;
    let kf = kl_divergence(local_logits, trace.logits(), tau)?;
    let mut grad = ce.grad_input.expect("ce gradient");
    grad.axpy(gamma, kc.grad_input.as_ref().expect("kl gradient"))?;
    grad.axpy(delta, kf.grad_input.as_ref().expect("kl gradient"))?;
    let grads = f_pers.backward(&trace, &grad, None)?;
    let parts = LossBreakdown {
        total: ce.value + gamma * kc.value + delta * kf.value,
        ce: ce.value,
        kl_cluster: kc.value,
        kl_local: kf.value,
    };
    Ok((
        LossValue {
            value: parts.total,
            grad_params: Some(grads.params),
            grad_input: Some(grads.input),
        },
        parts,
        trace,
    ))
}

/// `CE(f_pers(x), y) + gamma KL(G(x) || f_pers(x)) + delta KL(f_i(x) || f_pers(x))`.
/// `f_pers` uses batch statistics (running ones for a single sample); the
/// two teachers use running statistics and receive no gradient.
#[allow(clippy::too_many_arguments)]
pub fn personalization_loss(
    f_pers: &Model,
    cluster_model: &Model,
    local_model: &Model,
    x: &Tensor,
    labels: &[usize],
    gamma: f64,
    delta: f64,
    tau: f64,
) -> Result<(LossValue, LossBreakdown)> {
    if gamma < 0.0 || delta < 0.0 {
        return Err(Error::invalid("gamma and delta must be non-negative"));
    }
    if cluster_model.num_classes() != f_pers.num_classes() || local_model.num_classes() != f_pers.num_classes() {
        return Err(Error::invalid("models disagree on the class count"));
    }
    let gl = cluster_model.forward(x, BnMode::Running)?;
    let fl = local_model.forward(x, BnMode::Running)?;
    let mode = BnMode::training_for(x.batch());
    let (loss, parts, _) = loss_from_logits(f_pers, x, mode, &gl, &fl, labels, gamma, delta, tau)?;
    Ok((loss, parts))
}

/// Copy the cluster model and fine-tune it on the client's own shard.
pub fn personalize(
    client: &ClientModel,
    shard: &Dataset,
    cluster: usize,
    cluster_model: &Model,
    cfg: &PersonalizationConfig,
    seed: u64,
) -> Result<PersonalizedModel> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty shard", client.id)));
    }
    if !cluster_model.same_architecture(&client.model) {
        return Err(Error::invalid("cluster and client architectures differ"));
    }
    let gl = cluster_model.forward(&shard.inputs, BnMode::Running)?;
    let fl = client.model.forward(&shard.inputs, BnMode::Running)?;
    let mut model = cluster_model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum);
    let mut rng = rng::stream(seed, streams::PERSONALIZE, client.id as u64);
    for _ in 0..cfg.epochs {
        for idx in minibatches(shard.len(), cfg.batch_size, &mut rng) {
            let x = shard.inputs.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| shard.labels[i]).collect();
            let mode = BnMode::training_for(idx.len());
            let (loss, _, trace) = loss_from_logits(
                &model,
                &x,
                mode,
                &gl.select_rows(&idx),
                &fl.select_rows(&idx),
                &y,
                cfg.gamma,
                cfg.delta,
                cfg.tau,
            )?;
            opt.step(
                model.params_mut(),
                loss.grad_params.as_ref().expect("parameter gradient"),
            );
            if mode == BnMode::Batch {
                model.update_running_stats(&trace.batch_stats());
            }
        }
    }
    let (_, final_loss, _) = loss_from_logits(
        &model,
        &shard.inputs,
        BnMode::Running,
        &gl,
        &fl,
        &shard.labels,
        cfg.gamma,
        cfg.delta,
        cfg.tau,
    )?;
    Ok(PersonalizedModel {
        client: client.id,
        cluster,
        model,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_client: Vec<f64>,
    /// Unweighted mean over clients.
    pub mean: f64,
}

/// Top-1 accuracy of `models[i]` on `tests[i]`.
pub fn evaluate(models: &[&Model], tests: &[Dataset]) -> Result<Evaluation> {
    if models.len() != tests.len() || models.is_empty() {
        return Err(Error::invalid("one test set per model is required"));
    }
    let per_client = models
        .iter()
        .zip(tests)
        .map(|(m, t)| accuracy(m, t))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_client.iter().sum::<f64>() / per_client.len() as f64;
    Ok(Evaluation { per_client, mean })
}
