//! Model inversion of a cluster's ensemble into a trajectory of synthetic
//! batches, and re-estimation of the teacher's batch-norm statistics on that
//! trajectory.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{Averaging, EnsembleTeacher};
use crate::error::{Error, Result};
use crate::numcore::{bn_regularizer, cross_entropy, softmax, total_variation, BnMode, BnStatGrad, LossValue, Tensor};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of synthesis iterations `T`.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha_tv: f64,
    pub alpha_bn: f64,
    /// Momentum `beta` of the noise-adaptation update.
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    /// Record every `stride`-th iterate (the last one is always kept).
    pub stride: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            iterations: 100,
            batch_size: 64,
            lr: 5e-2,
            alpha_tv: 2.5e-5,
            alpha_bn: 10.0,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            stride: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.iterations < 1 {
            problems.push("iterations must be >= 1");
        }
        if self.batch_size < 2 {
            problems.push("batch_size must be >= 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push("lr must be a non-negative finite number");
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            problems.push("momentum must lie in (0, 1)");
        }
        if self.alpha_tv < 0.0 || self.alpha_bn < 0.0 {
            problems.push("loss coefficients must be non-negative");
        }
        if self.stride < 1 {
            problems.push("stride must be >= 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

/// The three parts of the inversion loss at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthLoss {
    pub total: f64,
    pub ce: f64,
    pub tv: f64,
    pub bn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub cluster: usize,
    /// Target labels, fixed for the whole trajectory.
    pub labels: Vec<usize>,
    /// Iteration number (1-based) of each snapshot.
    pub iterations: Vec<usize>,
    pub snapshots: Vec<Tensor>,
    /// `losses[t - 1]` is the loss evaluated at iterate `t - 1`.
    pub losses: Vec<SynthLoss>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Labels with every class count in `{floor(b/c), ceil(b/c)}`, shuffled.
pub fn balanced_labels<R: Rng + ?Sized>(batch: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut extra: Vec<usize> = (0..classes).collect();
    extra.shuffle(rng);
    let mut labels: Vec<usize> = (0..batch - batch % classes).map(|i| i % classes).collect();
    labels.extend(extra.into_iter().take(batch % classes));
    labels.shuffle(rng);
    labels
}

/// Cross-entropy of the ensemble on `x`, plus `alpha_tv` total variation and
/// `alpha_bn` batch-norm matching summed over every member's layers. The
/// returned gradient is with respect to `x`.
pub fn deep_inversion_loss(
    x: &Tensor,
    teacher: &EnsembleTeacher,
    labels: &[usize],
    alpha_tv: f64,
    alpha_bn: f64,
) -> Result<(LossValue, SynthLoss)> {
    if alpha_tv > 0.0 && x.shape().len() != 4 {
        return Err(Error::invalid(format!(
            "total variation needs image-shaped input, got {:?}",
            x.shape()
        )));
    }
    let members = teacher.members.len();
    let inv_m = 1.0 / members as f64;
    let traces = teacher
        .members
        .iter()
        .map(|m| m.forward_traced(x, BnMode::Running))
        .collect::<Result<Vec<_>>>()?;
    let batch = x.batch();
    let classes = teacher.num_classes();

    // gradient of the CE term with respect to each member's logits
    let (ce, member_grads): (f64, Vec<Tensor>) = match teacher.averaging {
        Averaging::Probabilities => {
            let probs: Vec<Tensor> = traces.iter().map(|t| softmax(t.logits(), 1.0)).collect();
            let mut mean = Tensor::zeros(vec![batch, classes]);
            for p in &probs {
                mean.axpy(inv_m, p)?;
            }
            if labels.len() != batch || labels.iter().any(|&y| y >= classes) {
                return Err(Error::invalid("labels do not match the batch"));
            }
            let mut ce = 0.0;
            for (b, &y) in labels.iter().enumerate() {
                ce -= mean.row(b)[y].ln();
            }
            ce /= batch as f64;
            let grads = probs
                .iter()
                .map(|p| {
                    let mut g = Tensor::zeros(vec![batch, classes]);
                    for (b, &y) in labels.iter().enumerate() {
                        let pr = p.row(b);
                        let scale = -pr[y] / (batch as f64 * members as f64 * mean.row(b)[y]);
                        for (c, gv) in g.row_mut(b).iter_mut().enumerate() {
                            let delta = if c == y { 1.0 } else { 0.0 };
                            *gv = scale * (delta - pr[c]);
                        }
                    }
                    g
                })
                .collect();
            (ce, grads)
        }
        Averaging::Logits => {
            let mut mean = Tensor::zeros(vec![batch, classes]);
            for t in &traces {
                mean.axpy(inv_m, t.logits())?;
            }
            let l = cross_entropy(&mean, labels)?;
            let g = l.grad_input.expect("ce has a gradient").scale(inv_m);
            (l.value, vec![g; members])
        }
    };

    let mut bn = 0.0;
    let mut grad_x = Tensor::zeros(x.shape().to_vec());
    for ((member, trace), g) in teacher.members.iter().zip(&traces).zip(&member_grads) {
        let reg = bn_regularizer(&trace.batch_stats(), member.bn_states())?;
        bn += reg.value;
        let scaled: Vec<BnStatGrad> = reg
            .stat_grads
            .into_iter()
            .map(|s| BnStatGrad {
                mean: s.mean.iter().map(|v| v * alpha_bn).collect(),
                var: s.var.iter().map(|v| v * alpha_bn).collect(),
            })
            .collect();
        let grads = member.backward(trace, g, Some(&scaled))?;
        grad_x.axpy(1.0, &grads.input)?;
    }

    let mut tv = 0.0;
    if alpha_tv > 0.0 {
        let l = total_variation(x)?;
        tv = l.value;
        grad_x.axpy(alpha_tv, l.grad_input.as_ref().expect("tv has a gradient"))?;
    }
    let total = ce + alpha_tv * tv + alpha_bn * bn;
    Ok((
        LossValue {
            value: total,
            grad_params: None,
            grad_input: Some(grad_x),
        },
        SynthLoss { total, ce, tv, bn },
    ))
}

/// Run `T` inversion steps from standard-normal noise.
pub fn synthesize_trajectory(teacher: &EnsembleTeacher, cfg: &SynthConfig, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = rng::from_seed(seed);
    let mut shape = vec![cfg.batch_size];
    shape.extend_from_slice(teacher.input_shape());
    let labels = balanced_labels(cfg.batch_size, teacher.num_classes(), &mut rng);
    let mut x = Tensor::randn(shape, &mut rng);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, 0.0);
    let mut traj = Trajectory {
        cluster: teacher.cluster,
        labels,
        iterations: Vec::new(),
        snapshots: Vec::new(),
        losses: Vec::with_capacity(cfg.iterations),
    };
    for t in 1..=cfg.iterations {
        let (loss, parts) = deep_inversion_loss(&x, teacher, &traj.labels, cfg.alpha_tv, cfg.alpha_bn)?;
        let grad = loss.grad_input.expect("inversion loss has an input gradient");
        if !parts.total.is_finite() || !grad.is_finite() {
            return Err(Error::SynthesisDivergence {
                cluster: teacher.cluster,
                iteration: t,
                detail: format!(
                    "loss {} (ce {}, tv {}, bn {})",
                    parts.total, parts.ce, parts.tv, parts.bn
                ),
            });
        }
        traj.losses.push(parts);
        opt.step(x.data_mut(), grad.data());
        if !x.is_finite() {
            return Err(Error::SynthesisDivergence {
                cluster: teacher.cluster,
                iteration: t,
                detail: "non-finite synthetic input".into(),
            });
        }
        if t % cfg.stride == 0 || t == cfg.iterations {
            traj.iterations.push(t);
            traj.snapshots.push(x.clone());
        }
    }
    Ok(traj)
}

/// An ensemble whose members carry batch-norm statistics re-estimated on a
/// synthesis trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAdaptedTeacher {
    pub teacher: EnsembleTeacher,
    pub momentum: f64,
}

/// Starting from each member's own running statistics, visit the snapshots
/// from last to first and blend in the batch statistics of every batch-norm
/// layer: `stat <- beta * stat + (1 - beta) * batch_stat`. The statistics are
/// observed with the member in batch-statistics mode. The input teacher is
/// left untouched.
pub fn adapt_teacher_bn(teacher: &EnsembleTeacher, trajectory: &Trajectory, beta: f64) -> Result<NoiseAdaptedTeacher> {
    if trajectory.is_empty() {
        return Err(Error::invalid("cannot adapt on an empty trajectory"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!("momentum must lie in (0, 1), got {beta}")));
    }
    let mut adapted = teacher.clone();
    for member in &mut adapted.members {
        if member.bn_states().is_empty() {
            continue;
        }
        let mut states = member.bn_states().to_vec();
        for snap in trajectory.snapshots.iter().rev() {
            let trace = member.forward_traced(snap, BnMode::Batch)?;
            for (s, b) in states.iter_mut().zip(trace.batch_stats()) {
                s.blend(&b, beta);
            }
        }
        member.set_bn_states(states)?;
    }
    Ok(NoiseAdaptedTeacher {
        teacher: adapted,
        momentum: beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::build_ensemble;
    use crate::numcore::{ArchSpec, BatchNormState, Model};

    fn teacher(seed: u64, image: bool, members: usize) -> EnsembleTeacher {
        let mut r = rng::from_seed(seed);
        let arch = if image {
            ArchSpec::small_cnn([1, 4, 4], 2, 4, 3)
        } else {
            ArchSpec::mlp(3, &[5], 3)
        };
        let ms = (0..members)
            .map(|_| Model::new(arch.clone(), &mut r).unwrap())
            .collect();
        build_ensemble(0, ms, Averaging::Probabilities).unwrap()
    }

    #[test]
    fn balanced_labels_invariant() {
        let mut r = rng::from_seed(0);
        for (b, c) in [(10, 3), (64, 4), (7, 7), (5, 8)] {
            let l = balanced_labels(b, c, &mut r);
            assert_eq!(l.len(), b);
            let mut counts = vec![0; c];
            for y in l {
                counts[y] += 1;
            }
            assert!(counts.iter().all(|&n| n == b / c || n == b.div_ceil(c)), "{counts:?}");
        }
    }

    #[test]
    fn zero_coefficients_reduce_to_cross_entropy() {
        let t = teacher(1, false, 1);
        let x = Tensor::randn(vec![6, 3], &mut rng::from_seed(2));
        let labels = vec![0, 1, 2, 0, 1, 2];
        let (di, _) = deep_inversion_loss(&x, &t, &labels, 0.0, 0.0).unwrap();
        let logits = t.members[0].forward(&x, BnMode::Running).unwrap();
        let ce = cross_entropy(&logits, &labels).unwrap();
        assert!((di.value - ce.value).abs() < 1e-14);
    }

    #[test]
    fn loss_is_sum_of_parts() {
        let t = teacher(3, true, 2);
        let x = Tensor::randn(vec![4, 1, 4, 4], &mut rng::from_seed(4));
        let labels = vec![0, 1, 2, 1];
        let (di, parts) = deep_inversion_loss(&x, &t, &labels, 0.3, 2.0).unwrap();
        let ce = -labels
            .iter()
            .enumerate()
            .map(|(b, &y)| t.evaluate(&x).unwrap().row(b)[y].ln())
            .sum::<f64>()
            / 4.0;
        let tv = total_variation(&x).unwrap().value;
        let bn: f64 = t
            .members
            .iter()
            .map(|m| {
                let tr = m.forward_traced(&x, BnMode::Running).unwrap();
                bn_regularizer(&tr.batch_stats(), m.bn_states()).unwrap().value
            })
            .sum();
        assert!((parts.ce - ce).abs() < 1e-12);
        assert!((parts.tv - tv).abs() < 1e-12);
        assert!((parts.bn - bn).abs() < 1e-12);
        assert!((di.value - (ce + 0.3 * tv + 2.0 * bn)).abs() < 1e-12);
    }

    #[test]
    fn tv_on_flat_input_is_rejected() {
        let t = teacher(1, false, 1);
        let x = Tensor::randn(vec![2, 3], &mut rng::from_seed(2));
        assert!(deep_inversion_loss(&x, &t, &[0, 1], 1e-3, 0.0).is_err());
    }

    #[test]
    fn zero_step_and_single_sgd_step() {
        let t = teacher(5, true, 2);
        let cfg = SynthConfig {
            iterations: 1,
            batch_size: 6,
            lr: 0.0,
            ..Default::default()
        };
        let tr = synthesize_trajectory(&t, &cfg, 11).unwrap();
        let mut r = rng::from_seed(11);
        let labels = balanced_labels(6, 3, &mut r);
        let x0 = Tensor::randn(vec![6, 1, 4, 4], &mut r);
        assert_eq!(tr.labels, labels);
        assert_eq!(tr.snapshots[0], x0);

        let sgd = SynthConfig {
            lr: 0.05,
            optimizer: OptimizerKind::Sgd,
            ..cfg
        };
        let tr = synthesize_trajectory(&t, &sgd, 11).unwrap();
        let (l, _) = deep_inversion_loss(&x0, &t, &labels, sgd.alpha_tv, sgd.alpha_bn).unwrap();
        let g = l.grad_input.unwrap();
        for i in 0..x0.numel() {
            assert_eq!(tr.snapshots[0].data()[i], x0.data()[i] - 0.05 * g.data()[i]);
        }
    }

    #[test]
    fn stride_and_determinism() {
        let t = teacher(6, false, 1);
        let cfg = SynthConfig {
            iterations: 7,
            batch_size: 4,
            alpha_tv: 0.0,
            stride: 3,
            ..Default::default()
        };
        let a = synthesize_trajectory(&t, &cfg, 1).unwrap();
        assert_eq!(a.iterations, vec![3, 6, 7]);
        assert_eq!(a.losses.len(), 7);
        assert_eq!(a, synthesize_trajectory(&t, &cfg, 1).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let mut t = teacher(7, false, 1);
        t.members[0].params_mut()[0] = f64::NAN;
        let cfg = SynthConfig {
            iterations: 2,
            batch_size: 4,
            alpha_tv: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            synthesize_trajectory(&t, &cfg, 0),
            Err(Error::SynthesisDivergence { iteration: 1, .. })
        ));
    }

    fn single_bn_teacher() -> EnsembleTeacher {
        // Dense(identity) -> BN -> head: BN input equals the raw input
        let arch = ArchSpec::mlp(2, &[2], 2);
        let mut m = Model::zeros(arch).unwrap();
        m.params_mut()[0] = 1.0;
        m.params_mut()[3] = 1.0;
        build_ensemble(0, vec![m], Averaging::Probabilities).unwrap()
    }

    fn traj_of(batches: Vec<Tensor>) -> Trajectory {
        Trajectory {
            cluster: 0,
            labels: vec![0; batches[0].batch()],
            iterations: (1..=batches.len()).collect(),
            snapshots: batches,
            losses: Vec::new(),
        }
    }

    #[test]
    fn adaptation_fixed_point_and_single_step() {
        let mut t = single_bn_teacher();
        // batch with mean (1, -1) and biased variance (1, 4)
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, -3.0]).unwrap();
        t.members[0]
            .set_bn_states(vec![BatchNormState {
                running_mean: vec![1.0, -1.0],
                running_var: vec![1.0, 4.0],
            }])
            .unwrap();
        let a = adapt_teacher_bn(&t, &traj_of(vec![x.clone(), x.clone()]), 0.9).unwrap();
        assert_eq!(a.teacher.members[0].bn_states(), t.members[0].bn_states());

        let mut t0 = single_bn_teacher();
        t0.members[0]
            .set_bn_states(vec![BatchNormState {
                running_mean: vec![0.0, 0.0],
                running_var: vec![1.0, 4.0],
            }])
            .unwrap();
        let xm = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let a = adapt_teacher_bn(&t0, &traj_of(vec![xm]), 0.9).unwrap();
        assert!((a.teacher.members[0].bn_states()[0].running_mean[0] - 0.1).abs() < 1e-15);
        // the original is not mutated
        assert_eq!(t0.members[0].bn_states()[0].running_mean[0], 0.0);
    }
}
