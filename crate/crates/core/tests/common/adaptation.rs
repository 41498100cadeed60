//! Teachers whose batch-norm layer sees the raw input, so running
//! statistics can be checked against hand-computed values.

use fedbicross::clustering::{build_ensemble, Averaging, EnsembleTeacher};
use fedbicross::numcore::{ArchSpec, BatchNormState, Model, Tensor};
use fedbicross::synthesis::{adapt_teacher_bn, Trajectory};

/// Identity dense layer into one batch-norm layer: the layer statistics are
/// the raw batch statistics.
pub fn identity_bn_teacher(mean: &[f64], var: &[f64]) -> EnsembleTeacher {
    let d = mean.len();
    let mut m = Model::zeros(ArchSpec::mlp(d, &[d], 2)).unwrap();
    for i in 0..d {
        m.params_mut()[i * d + i] = 1.0;
    }
    m.set_bn_states(vec![BatchNormState {
        running_mean: mean.to_vec(),
        running_var: var.to_vec(),
    }])
    .unwrap();
    build_ensemble(0, vec![m], Averaging::Probabilities).unwrap()
}

pub fn repeated(batch: &Tensor, n: usize) -> Trajectory {
    Trajectory {
        cluster: 0,
        labels: vec![0; batch.batch()],
        iterations: (1..=n).collect(),
        snapshots: vec![batch.clone(); n],
        losses: Vec::new(),
    }
}

/// Largest deviation from 0.9 of the per-step shrink ratio of the gap to
/// the batch statistics, over 12 repetitions of one batch.
pub fn worst_ratio_deviation() -> f64 {
    // batch mean (2, -1), biased variance (1, 0.25)
    let batch = Tensor::new(vec![2, 2], vec![1.0, -0.5, 3.0, -1.5]).unwrap();
    let teacher = identity_bn_teacher(&[0.0, 0.0], &[4.0, 1.0]);
    let target = [(2.0, 1.0), (-1.0, 0.25)];
    let mut prev: Option<Vec<f64>> = None;
    let mut worst: f64 = 0.0;
    for steps in 1..=12 {
        let a = adapt_teacher_bn(&teacher, &repeated(&batch, steps), 0.9).unwrap();
        let s = &a.teacher.members[0].bn_states()[0];
        let gaps: Vec<f64> = (0..2)
            .flat_map(|c| {
                [
                    (s.running_mean[c] - target[c].0).abs(),
                    (s.running_var[c] - target[c].1).abs(),
                ]
            })
            .collect();
        if let Some(p) = prev {
            for (g, q) in gaps.iter().zip(&p) {
                worst = worst.max((g / q - 0.9).abs());
            }
        }
        prev = Some(gaps);
    }
    worst
}

/// One step from (0, 1) on the batch {0, 2} gives mean 0.1 and variance
/// 0.9 + 0.1; statistics already equal to the batch's never move.
pub fn single_step_and_fixed_point_hold() -> bool {
    let batch = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
    let t0 = identity_bn_teacher(&[0.0], &[1.0]);
    let a = adapt_teacher_bn(&t0, &repeated(&batch, 1), 0.9).unwrap();
    let s = &a.teacher.members[0].bn_states()[0];
    let step = (s.running_mean[0] - 0.1).abs() < 1e-15 && (s.running_var[0] - 1.0).abs() < 1e-15;

    let fixed = identity_bn_teacher(&[1.0], &[1.0]);
    let a = adapt_teacher_bn(&fixed, &repeated(&batch, 7), 0.9).unwrap();
    step && a.teacher.members[0].bn_states() == fixed.members[0].bn_states()
}
