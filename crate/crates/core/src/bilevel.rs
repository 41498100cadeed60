//! Online bi-level distillation of one model per cluster from all clusters'
//! synthetic trajectories, with learned cross-cluster weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::EnsembleTeacher;
use crate::error::{Error, Result};
use crate::numcore::{dot, kl_to_targets, ArchSpec, BnMode, BnStats, LossValue, Model, Tensor};
use crate::rng::{self, streams};
use crate::synthesis::{NoiseAdaptedTeacher, Trajectory};

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

pub const SIMPLEX_TOL: f64 = 1e-9;

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if w.is_empty() || w.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("{w:?} is not on the probability simplex")));
        }
        Ok(WeightVector(w))
    }

    pub fn uniform(k: usize) -> Self {
        WeightVector(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, i: usize) -> Self {
        let mut w = vec![0.0; k];
        w[i] = 1.0;
        WeightVector(w)
    }

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

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Result<WeightVector> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("cannot project {v:?}")));
    }
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-12 {
        return Ok(WeightVector(v.to_vec()));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    Ok(WeightVector(v.iter().map(|&x| (x - theta).max(0.0)).collect()))
}

/// Fixed partition of batch positions into train and validation parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl SplitIndex {
    /// Both parts get at least two positions so batch statistics exist.
    pub fn new<R: Rng + ?Sized>(batch: usize, train_fraction: f64, rng: &mut R) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction {train_fraction} outside (0, 1)"
            )));
        }
        if batch < 4 {
            return Err(Error::invalid(format!("batch of {batch} cannot be split")));
        }
        let n_train = ((batch as f64 * train_fraction).round() as usize).clamp(2, batch - 2);
        let mut idx: Vec<usize> = (0..batch).collect();
        idx.shuffle(rng);
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        Ok(SplitIndex { train, val })
    }
}

/// How the cross-cluster weights of each target cluster are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Start uniform and follow the hypergradient.
    #[default]
    Learned,
    /// Frozen at `1/K`.
    Uniform,
    /// Frozen at a softmax of negative centroid distances.
    SimWeighted,
    /// Frozen one-hot on the target cluster itself.
    IntraCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilevelConfig {
    /// Inner learning rate `eta_G`.
    pub lr_model: f64,
    /// Outer learning rate `eta_w`.
    pub lr_weights: f64,
    pub tau: f64,
    pub train_fraction: f64,
    pub weight_mode: WeightMode,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            lr_model: 0.05,
            lr_weights: 5e-3,
            tau: 20.0,
            train_fraction: 0.8,
            weight_mode: WeightMode::Learned,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_model >= 0.0 && self.lr_weights >= 0.0)
            || !self.lr_model.is_finite()
            || !self.lr_weights.is_finite()
        {
            return Err(Error::invalid("learning rates must be non-negative and finite"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// `1 - t / T` for `1 <= t <= T`.
pub fn lambda_schedule(t: usize, total: usize) -> Result<f64> {
    if t < 1 || t > total {
        return Err(Error::invalid(format!("iteration {t} outside 1..={total}")));
    }
    Ok(1.0 - t as f64 / total as f64)
}

/// One cluster's distillation batch: inputs plus the original and the
/// noise-adapted teacher outputs at temperature `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct KdBatch {
    pub x: Tensor,
    pub original: Tensor,
    pub adapted: Tensor,
    pub lambda: f64,
}

impl KdBatch {
    pub fn new(
        x: Tensor,
        original: &EnsembleTeacher,
        adapted: &EnsembleTeacher,
        lambda: f64,
        tau: f64,
    ) -> Result<Self> {
        Ok(KdBatch {
            original: original.probabilities(&x, tau)?,
            adapted: adapted.probabilities(&x, tau)?,
            x,
            lambda,
        })
    }

    pub fn select(&self, rows: &[usize]) -> KdBatch {
        KdBatch {
            x: self.x.select_rows(rows),
            original: self.original.select_rows(rows),
            adapted: self.adapted.select_rows(rows),
            lambda: self.lambda,
        }
    }
}

/// Blended distillation loss of `g` on a prepared batch, with the batch
/// statistics seen by `g`. `g` runs in batch-statistics mode.
pub fn kd_loss_on(g: &Model, batch: &KdBatch, tau: f64) -> Result<(LossValue, Vec<BnStats>)> {
    let trace = g.forward_traced(&batch.x, BnMode::training_for(batch.x.batch()))?;
    let a = kl_to_targets(&batch.adapted, trace.logits(), tau)?;
    let o = kl_to_targets(&batch.original, trace.logits(), tau)?;
    let lam = batch.lambda;
    let mut grad = a.grad_input.expect("kl gradient").scale(lam);
    grad.axpy(1.0 - lam, o.grad_input.as_ref().expect("kl gradient"))?;
    let grads = g.backward(&trace, &grad, None)?;
    Ok((
        LossValue {
            value: lam * a.value + (1.0 - lam) * o.value,
            grad_params: Some(grads.params),
            grad_input: Some(grads.input),
        },
        trace.batch_stats(),
    ))
}

/// `lambda(t) KL(adapted || g) + (1 - lambda(t)) KL(original || g)` on `x`,
/// teachers in inference mode. Gradients are for `g` only.
pub fn kd_loss(
    g: &Model,
    original: &EnsembleTeacher,
    adapted: &EnsembleTeacher,
    x: &Tensor,
    t: usize,
    total: usize,
    tau: f64,
) -> Result<LossValue> {
    if g.num_classes() != original.num_classes() || g.num_classes() != adapted.num_classes() {
        return Err(Error::invalid("student and teachers disagree on the class count"));
    }
    if x.batch() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let batch = KdBatch::new(x.clone(), original, adapted, lambda_schedule(t, total)?, tau)?;
    Ok(kd_loss_on(g, &batch, tau)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrainState {
    pub cluster: usize,
    pub model: Model,
    pub weights: WeightVector,
    /// Weights after each iteration.
    pub weight_history: Vec<WeightVector>,
    /// Validation loss after each inner step.
    pub val_history: Vec<f64>,
}

impl ClusterTrainState {
    pub fn new(cluster: usize, model: Model, weights: WeightVector) -> Self {
        ClusterTrainState {
            cluster,
            model,
            weights,
            weight_history: Vec::new(),
            val_history: Vec::new(),
        }
    }
}

/// `G - eta_G sum_j w_j g_j` with `g_j` the distillation gradient on
/// cluster `j`'s training batch at `model`, and `w` any real vector. The
/// running statistics of the result absorb the `w`-mixed batch statistics.
/// Returns the stepped model and the `g_j`.
pub fn inner_step(model: &Model, train: &[KdBatch], w: &[f64], cfg: &BilevelConfig) -> Result<(Model, Vec<Vec<f64>>)> {
    if train.len() != w.len() {
        return Err(Error::invalid(format!(
            "{} training batches for {} weights",
            train.len(),
            w.len()
        )));
    }
    if train.iter().any(|b| b.x.batch() == 0) {
        return Err(Error::invalid("empty training split"));
    }
    let mut grads = Vec::with_capacity(train.len());
    let mut step = vec![0.0; model.num_params()];
    let mut mixed: Vec<BnStats> = Vec::new();
    for (batch, &wj) in train.iter().zip(w) {
        let (loss, stats) = kd_loss_on(model, batch, cfg.tau)?;
        let g = loss.grad_params.expect("parameter gradient");
        for (s, gv) in step.iter_mut().zip(&g) {
            *s += wj * gv;
        }
        grads.push(g);
        if mixed.is_empty() {
            mixed = stats
                .iter()
                .map(|s| BnStats {
                    mean: vec![0.0; s.mean.len()],
                    var: vec![0.0; s.var.len()],
                })
                .collect();
        }
        for (a, s) in mixed.iter_mut().zip(&stats) {
            a.mean.iter_mut().zip(&s.mean).for_each(|(a, v)| *a += wj * v);
            a.var.iter_mut().zip(&s.var).for_each(|(a, v)| *a += wj * v);
        }
    }
    let mut next = model.clone();
    next.sgd_step(&step, cfg.lr_model);
    next.update_running_stats(&mixed);
    Ok((next, grads))
}

/// [`inner_step`] applied to a cluster's state with its current weights.
pub fn inner_update(state: &mut ClusterTrainState, train: &[KdBatch], cfg: &BilevelConfig) -> Result<Vec<Vec<f64>>> {
    let (next, grads) = inner_step(&state.model, train, state.weights.as_slice(), cfg)?;
    state.model = next;
    Ok(grads)
}

/// `dL_val / dw_j = -eta_G <grad L_val(G), g_j>`, exact through one inner step.
pub fn hypergradient(model: &Model, grads: &[Vec<f64>], val: &KdBatch, cfg: &BilevelConfig) -> Result<(f64, Vec<f64>)> {
    let (loss, _) = kd_loss_on(model, val, cfg.tau)?;
    let gv = loss.grad_params.expect("parameter gradient");
    Ok((loss.value, grads.iter().map(|g| -cfg.lr_model * dot(&gv, g)).collect()))
}

/// Projected hypergradient step on the weights; records the validation loss.
pub fn outer_update(
    state: &mut ClusterTrainState,
    grads: &[Vec<f64>],
    val: &KdBatch,
    cfg: &BilevelConfig,
) -> Result<WeightVector> {
    let (loss, h) = hypergradient(&state.model, grads, val, cfg)?;
    let moved: Vec<f64> = state
        .weights
        .as_slice()
        .iter()
        .zip(&h)
        .map(|(w, h)| w - cfg.lr_weights * h)
        .collect();
    state.weights = project_simplex(&moved)?;
    state.val_history.push(loss);
    Ok(state.weights.clone())
}

/// `softmax_j(-||c_k - c_j||)` per row `k`.
pub fn similarity_weights(centroids: &[Vec<f64>]) -> Vec<WeightVector> {
    centroids
        .iter()
        .map(|ck| {
            let d: Vec<f64> = centroids
                .iter()
                .map(|cj| ck.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let e: Vec<f64> = d.iter().map(|v| (m - v).exp()).collect();
            let s: f64 = e.iter().sum();
            WeightVector(e.into_iter().map(|v| v / s).collect())
        })
        .collect()
}

/// What stage 2 needs from one cluster.
#[derive(Debug, Clone, Copy)]
pub struct ClusterInputs<'a> {
    pub trajectory: &'a Trajectory,
    pub teacher: &'a EnsembleTeacher,
    pub adapted: &'a NoiseAdaptedTeacher,
}

fn check_trajectories(clusters: &[ClusterInputs]) -> Result<(usize, Vec<usize>)> {
    let first = clusters
        .first()
        .ok_or_else(|| Error::invalid("no clusters"))?
        .trajectory;
    for c in clusters {
        let t = c.trajectory;
        if t.iterations != first.iterations || t.is_empty() {
            return Err(Error::invalid("trajectories differ in length or stride"));
        }
        if t.snapshots.iter().any(|s| s.shape() != first.snapshots[0].shape()) {
            return Err(Error::invalid("trajectories differ in batch shape"));
        }
    }
    let total = *first.iterations.last().expect("non-empty trajectory");
    Ok((total, first.iterations.clone()))
}

/// Distillation batches for every (cluster, snapshot), teachers evaluated once.
pub fn prepare_batches(clusters: &[ClusterInputs], tau: f64) -> Result<Vec<Vec<KdBatch>>> {
    let (total, iterations) = check_trajectories(clusters)?;
    clusters
        .par_iter()
        .map(|c| {
            c.trajectory
                .snapshots
                .iter()
                .zip(&iterations)
                .map(|(x, &t)| {
                    KdBatch::new(
                        x.clone(),
                        c.teacher,
                        &c.adapted.teacher,
                        lambda_schedule(t, total)?,
                        tau,
                    )
                })
                .collect()
        })
        .collect()
}

/// Snapshot `s` of every trajectory drives step `s` of every cluster: an
/// inner step on the training rows of all clusters, then (in learned mode)
/// an outer step on the target cluster's validation rows. Cluster models
/// start from `stream(seed, "cluster-init", k)`.
pub fn run_online_bilevel(
    clusters: &[ClusterInputs],
    arch: &ArchSpec,
    centroids: &[Vec<f64>],
    cfg: &BilevelConfig,
    seed: u64,
) -> Result<Vec<ClusterTrainState>> {
    cfg.validate()?;
    let k = clusters.len();
    let batches = prepare_batches(clusters, cfg.tau)?;
    let b = clusters[0].trajectory.batch_size();
    let split = SplitIndex::new(b, cfg.train_fraction, &mut rng::stream(seed, streams::BILEVEL, 0))?;
    let steps = batches[0].len();
    let train: Vec<Vec<KdBatch>> = (0..steps)
        .map(|s| batches.iter().map(|c| c[s].select(&split.train)).collect())
        .collect();

    let initial = match cfg.weight_mode {
        WeightMode::Learned | WeightMode::Uniform => vec![WeightVector::uniform(k); k],
        WeightMode::IntraCluster => (0..k).map(|i| WeightVector::one_hot(k, i)).collect(),
        WeightMode::SimWeighted => {
            if centroids.len() != k {
                return Err(Error::invalid(format!(
                    "{} centroids for {k} clusters",
                    centroids.len()
                )));
            }
            similarity_weights(centroids)
        }
    };
    let learn = cfg.weight_mode == WeightMode::Learned;

    initial
        .into_par_iter()
        .enumerate()
        .map(|(target, w)| {
            let g = Model::new(
                arch.clone(),
                &mut rng::stream(seed, streams::CLUSTER_INIT, target as u64),
            )?;
            let mut state = ClusterTrainState::new(target, g, w);
            for (s, train_s) in train.iter().enumerate() {
                let grads = inner_update(&mut state, train_s, cfg)?;
                let val = batches[target][s].select(&split.val);
                if learn {
                    outer_update(&mut state, &grads, &val, cfg)?;
                } else {
                    let (loss, _) = kd_loss_on(&state.model, &val, cfg.tau)?;
                    state.val_history.push(loss.value);
                }
                state.weight_history.push(state.weights.clone());
            }
            Ok(state)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_schedule(10, 10).unwrap(), 0.0);
        assert_eq!(lambda_schedule(5, 10).unwrap(), 0.5);
        assert!((lambda_schedule(100, 500).unwrap() - 0.8).abs() < 1e-15);
        assert!(lambda_schedule(0, 10).is_err());
        assert!(lambda_schedule(11, 10).is_err());
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_simplex(&[0.25; 4]).unwrap().as_slice(), &[0.25; 4]);
        assert_eq!(project_simplex(&[0.8, 0.8]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = project_simplex(&[1.2, -0.2]).unwrap();
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-15 && p.as_slice()[1] == 0.0);
        assert!(project_simplex(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let s = SplitIndex::new(64, 0.8, &mut rng::from_seed(3)).unwrap();
        assert_eq!(s.train.len(), 51);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert!(SplitIndex::new(3, 0.8, &mut rng::from_seed(0)).is_err());
    }

    #[test]
    fn similarity_rows_are_on_simplex() {
        let c = vec![vec![0.0, 1.0], vec![0.0, 0.0], vec![3.0, 3.0]];
        let w = similarity_weights(&c);
        for (k, row) in w.iter().enumerate() {
            assert!(WeightVector::new(row.as_slice().to_vec()).is_ok());
            let best = crate::numcore::argmax(row.as_slice());
            assert_eq!(best, k);
        }
    }
}
