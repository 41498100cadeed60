//! Scripted multi-client scenarios with known ground truth.

use fedbicross::bilevel::{run_online_bilevel, BilevelConfig, ClusterInputs, WeightMode};
use fedbicross::clustering::{build_ensemble, Averaging, EnsembleTeacher};
use fedbicross::federation::{make_toy_dataset, train_local_from, Dataset, DatasetSpec, LocalTrainConfig};
use fedbicross::numcore::{ArchSpec, Model};
use fedbicross::optim::OptimizerKind;
use fedbicross::rng;
use fedbicross::synthesis::{adapt_teacher_bn, synthesize_trajectory, SynthConfig};
use rand::seq::SliceRandom;

pub const PAIR_CLASSES: usize = 6;

pub fn separable_blobs(classes: usize, per: usize, seed: u64) -> Dataset {
    let spec = DatasetSpec::Blobs {
        classes,
        dim: 4,
        samples_per_class: per,
        radius: 6.0,
        std: 0.5,
    };
    make_toy_dataset(&spec, seed).unwrap()
}

fn rows_of(data: &Dataset, classes: &[usize]) -> Vec<usize> {
    (0..data.len()).filter(|&i| classes.contains(&data.labels[i])).collect()
}

/// Six clients; clients `2p` and `2p + 1` hold disjoint halves of class pair
/// `{2p, 2p + 1}`. Returns the trained models and the true grouping.
pub fn class_pair_clients(seed: u64) -> (Vec<Model>, Vec<usize>) {
    let data = separable_blobs(PAIR_CLASSES, 60, rng::derive_seed(seed, "data", 0));
    let arch = ArchSpec::mlp(4, &[8], PAIR_CLASSES);
    let init = Model::new(arch, &mut rng::stream(seed, "init", 0)).unwrap();
    let cfg = LocalTrainConfig {
        epochs: 20,
        ..Default::default()
    };
    let mut models = Vec::new();
    let mut truth = Vec::new();
    for client in 0..6 {
        let pair = client / 2;
        let rows = rows_of(&data, &[2 * pair, 2 * pair + 1]);
        let half: Vec<usize> = rows.into_iter().skip(client % 2).step_by(2).collect();
        let shard = data.subset(&half);
        let trained =
            train_local_from(client, &shard, init.clone(), &cfg, rng::derive_seed(seed, "client", 0)).unwrap();
        models.push(trained.model);
        truth.push(pair);
    }
    (models, truth)
}

/// Fraction of clients whose cluster matches the truth under the best
/// one-to-one relabeling.
pub fn relabeled_accuracy(assignment: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits = assignment.iter().zip(truth).filter(|(a, t)| p[**a] == **t).count();
        best = best.max(hits);
    });
    best as f64 / truth.len() as f64
}

fn permute(p: &mut Vec<usize>, i: usize, f: &mut dyn FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}

pub struct NegativeTransfer {
    /// Weight the clean cluster puts on the adversarial one at the end.
    pub adversarial_weight: f64,
    pub val_learned: f64,
    pub val_uniform: f64,
}

fn teacher_on(data: &Dataset, init: &Model, cluster: usize, seed: u64) -> EnsembleTeacher {
    let cfg = LocalTrainConfig {
        epochs: 20,
        ..Default::default()
    };
    let m = train_local_from(cluster, data, init.clone(), &cfg, seed).unwrap();
    build_ensemble(cluster, vec![m.model], Averaging::Probabilities).unwrap()
}

/// Two clusters over the same three-class problem; the second cluster's
/// teacher was trained on shuffled labels. Runs stage 2 with learned and
/// with frozen-uniform weights.
pub fn negative_transfer(seed: u64) -> NegativeTransfer {
    let data = separable_blobs(3, 80, rng::derive_seed(seed, "data", 0));
    let arch = ArchSpec::mlp(4, &[8], 3);
    let init = Model::new(arch.clone(), &mut rng::stream(seed, "init", 0)).unwrap();
    let clean = teacher_on(&data, &init, 0, seed);
    let mut shuffled = data.clone();
    shuffled.labels.shuffle(&mut rng::stream(seed, "shuffle-labels", 0));
    let adversarial = teacher_on(&shuffled, &init, 1, seed);

    let synth = SynthConfig {
        iterations: 60,
        batch_size: 40,
        alpha_tv: 0.0,
        optimizer: OptimizerKind::Adam,
        ..SynthConfig::default()
    };
    let teachers = [clean, adversarial];
    let made: Vec<_> = teachers
        .iter()
        .map(|t| {
            let traj = synthesize_trajectory(t, &synth, rng::derive_seed(seed, "synthesis", t.cluster as u64)).unwrap();
            let adapted = adapt_teacher_bn(t, &traj, synth.momentum).unwrap();
            (traj, adapted)
        })
        .collect();
    let inputs: Vec<ClusterInputs> = teachers
        .iter()
        .zip(&made)
        .map(|(t, (traj, adapted))| ClusterInputs {
            trajectory: traj,
            teacher: t,
            adapted,
        })
        .collect();
    let run = |mode| {
        let cfg = BilevelConfig {
            weight_mode: mode,
            ..BilevelConfig::default()
        };
        run_online_bilevel(&inputs, &arch, &[], &cfg, seed).unwrap()
    };
    let learned = run(WeightMode::Learned);
    let uniform = run(WeightMode::Uniform);
    NegativeTransfer {
        adversarial_weight: learned[0].weights.as_slice()[1],
        val_learned: *learned[0].val_history.last().unwrap(),
        val_uniform: *uniform[0].val_history.last().unwrap(),
    }
}
