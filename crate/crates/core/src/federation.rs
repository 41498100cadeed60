//! Toy datasets, Dirichlet label-skew partitioning, local client training and
//! the single-round parameter-averaging baseline.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{cross_entropy, through_model, ArchSpec, BnMode, Model, Tensor};
use crate::optim::{minibatches, Optimizer};
use crate::rng::{self, StreamRng};

/// Labelled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Randomly hold out `fraction` of the samples (at least one, and at
    /// least one kept when there are two or more). Returns `(train, test)`.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n = self.len();
        let mut n_test = (fraction * n as f64).round() as usize;
        if n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        }
        let (test, train) = idx.split_at(n_test.min(n));
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }
}

/// Class-conditional generators for the toy problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic Gaussian blobs. Class means sit evenly on a circle of the
    /// given radius in the first two coordinates.
    Blobs {
        classes: usize,
        dim: usize,
        samples_per_class: usize,
        radius: f64,
        std: f64,
    },
    /// `1 x size x size` images: a class-specific stripe pattern (orientation
    /// and frequency depend on the class) with a random phase, plus noise.
    Images {
        classes: usize,
        size: usize,
        samples_per_class: usize,
        noise: f64,
    },
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Blobs { classes, .. } | DatasetSpec::Images { classes, .. } => *classes,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            DatasetSpec::Blobs { dim, .. } => vec![*dim],
            DatasetSpec::Images { size, .. } => vec![1, *size, *size],
        }
    }

    pub fn samples_per_class(&self) -> usize {
        match self {
            DatasetSpec::Blobs { samples_per_class, .. } | DatasetSpec::Images { samples_per_class, .. } => {
                *samples_per_class
            }
        }
    }
}

fn stripe(class: usize, classes: usize, size: usize, phase: f64, out: &mut [f64]) {
    let orientations = classes.min(4);
    let theta = PI * (class % orientations) as f64 / orientations as f64;
    let freq = 1.0 + (class / orientations) as f64;
    let (s, c) = theta.sin_cos();
    for i in 0..size {
        for j in 0..size {
            let u = (i as f64 * c + j as f64 * s) / size as f64;
            out[i * size + j] = (2.0 * PI * freq * u + phase).cos();
        }
    }
}

/// Generate a balanced dataset, deterministic under `seed`.
pub fn make_toy_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let classes = spec.classes();
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    let per = spec.samples_per_class();
    if per == 0 {
        return Err(Error::invalid("samples_per_class must be positive"));
    }
    let mut rng = rng::from_seed(seed);
    let width: usize = spec.input_shape().iter().product();
    if width == 0 {
        return Err(Error::invalid("input dimension must be positive"));
    }
    let n = classes * per;
    let mut order: Vec<usize> = (0..n).map(|i| i % classes).collect();
    order.shuffle(&mut rng);
    let mut data = vec![0.0; n * width];
    for (row, &y) in data.chunks_mut(width).zip(&order) {
        match *spec {
            DatasetSpec::Blobs { radius, std, dim, .. } => {
                let angle = 2.0 * PI * y as f64 / classes as f64;
                for (d, v) in row.iter_mut().enumerate() {
                    let mean = match d {
                        0 => radius * angle.cos(),
                        1 => radius * angle.sin(),
                        _ => 0.0,
                    };
                    let z: f64 = rng.sample(StandardNormal);
                    *v = mean + std * z;
                }
                debug_assert_eq!(row.len(), dim);
            }
            DatasetSpec::Images { size, noise, .. } => {
                let phase = rng.random_range(-0.5..0.5);
                stripe(y, classes, size, phase, row);
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += noise * z;
                }
            }
        }
    }
    let mut shape = vec![n];
    shape.extend(spec.input_shape());
    Dataset::new(Tensor::new(shape, data)?, order, classes)
}

/// Disjoint cover of a dataset's indices by clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    /// Mean over clients of the largest single-class share of the shard.
    pub fn mean_max_class_share(&self, dataset: &Dataset) -> f64 {
        let shares: Vec<f64> = self
            .client_indices
            .iter()
            .filter(|idx| !idx.is_empty())
            .map(|idx| {
                let mut counts = vec![0usize; dataset.num_classes];
                for &i in idx {
                    counts[dataset.labels[i]] += 1;
                }
                *counts.iter().max().expect("classes >= 1") as f64 / idx.len() as f64
            })
            .collect();
        shares.iter().sum::<f64>() / shares.len().max(1) as f64
    }
}

const PARTITION_RETRIES: usize = 100;

fn dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("Dirichlet concentration: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        // tiny concentrations can underflow every draw to zero
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|d| d / sum).collect());
        }
    }
}

/// Split each class across `clients` with proportions drawn from
/// `Dir(alpha * 1)`; every client ends with at least one sample.
pub fn dirichlet_partition(dataset: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    dirichlet_partition_min(dataset, clients, alpha, seed, 1)
}

/// [`dirichlet_partition`] with a configurable minimum shard size. Draws are
/// retried a bounded number of times, then samples are moved from the
/// largest shard into the deficient ones.
pub fn dirichlet_partition_min(
    dataset: &Dataset,
    clients: usize,
    alpha: f64,
    seed: u64,
    min_size: usize,
) -> Result<Partition> {
    if clients < 2 {
        return Err(Error::invalid(format!("need at least 2 clients, got {clients}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    if clients * min_size.max(1) > dataset.len() {
        return Err(Error::invalid(format!(
            "{} samples cannot give {clients} clients {} samples each",
            dataset.len(),
            min_size.max(1)
        )));
    }
    let mut rng = rng::from_seed(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let min_size = min_size.max(1);
    let mut shards = Vec::new();
    for _ in 0..PARTITION_RETRIES {
        shards = vec![Vec::new(); clients];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let props = dirichlet(alpha, clients, &mut rng)?;
            let mut start = 0;
            let mut cum = 0.0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == clients {
                    idx.len()
                } else {
                    ((cum * idx.len() as f64) as usize).min(idx.len())
                };
                shards[c].extend_from_slice(&idx[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if shards.iter().all(|s| s.len() >= min_size) {
            break;
        }
    }
    while let Some(small) = shards.iter().position(|s| s.len() < min_size) {
        let largest = (0..clients)
            .max_by_key(|&c| (shards[c].len(), usize::MAX - c))
            .expect("clients >= 2");
        let moved = shards[largest].pop().expect("largest shard holds spare samples");
        shards[small].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition {
        client_indices: shards,
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            epochs: 30,
            lr: 1e-2,
            batch_size: 32,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: usize,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub id: usize,
    pub model: Model,
    pub train_stats: TrainStats,
}

/// Train a fresh model (initialized from `seed`) on a client shard.
pub fn train_local(
    id: usize,
    shard: &Dataset,
    arch: &ArchSpec,
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<ClientModel> {
    let mut init_rng = rng::stream(seed, "init", 0);
    let init = Model::new(arch.clone(), &mut init_rng)?;
    train_local_from(id, shard, init, cfg, seed)
}

/// Train starting from a given model (e.g. a broadcast global init).
pub fn train_local_from(
    id: usize,
    shard: &Dataset,
    init: Model,
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<ClientModel> {
    if shard.is_empty() {
        return Err(Error::invalid(format!("client {id} has an empty shard")));
    }
    if shard.input_shape() != init.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: init.input_shape().to_vec(),
            actual: shard.input_shape().to_vec(),
        });
    }
    let mut model = init;
    let mut rng = rng::stream(seed, "shuffle", id as u64);
    let mut opt = Optimizer::sgd(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        history.push(ce_epoch(&mut model, shard, cfg.batch_size, &mut opt, &mut rng)?);
    }
    Ok(ClientModel {
        id,
        train_stats: TrainStats {
            epochs: cfg.epochs,
            final_loss: history.last().copied().unwrap_or(f64::NAN),
            loss_history: history,
        },
        model,
    })
}

/// One epoch of mini-batch cross-entropy training; returns the mean loss.
pub(crate) fn ce_epoch(
    model: &mut Model,
    data: &Dataset,
    batch_size: usize,
    opt: &mut Optimizer,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in minibatches(data.len(), batch_size, rng) {
        let x = data.inputs.select_rows(&batch);
        let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let mode = BnMode::training_for(batch.len());
        let trace = model.forward_traced(&x, mode)?;
        let loss = cross_entropy(trace.logits(), &y)?;
        let grads = model.backward(&trace, loss.grad_input.as_ref().expect("ce has a gradient"), None)?;
        opt.step(model.params_mut(), &grads.params);
        if mode == BnMode::Batch {
            model.update_running_stats(&trace.batch_stats());
        }
        total += loss.value * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Mean cross-entropy of a model over a dataset with running statistics.
pub fn dataset_loss(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(through_model(model, &data.inputs, BnMode::Running, |l| cross_entropy(l, &data.labels))?.value)
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let pred = model.predict(&data.inputs)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Single-round parameter averaging. Weights are shard sizes unless
/// `uniform`; running statistics are averaged with the same weights.
pub fn fedavg_one_shot(clients: &[&Model], shard_sizes: &[usize], uniform: bool) -> Result<Model> {
    let first = *clients
        .first()
        .ok_or_else(|| Error::invalid("no client models to average"))?;
    if clients.len() != shard_sizes.len() {
        return Err(Error::invalid("one shard size per client is required"));
    }
    if clients.iter().any(|m| !m.same_architecture(first)) {
        return Err(Error::invalid("client architectures differ"));
    }
    let weights: Vec<f64> = if uniform {
        vec![1.0 / clients.len() as f64; clients.len()]
    } else {
        let total: usize = shard_sizes.iter().sum();
        if total == 0 {
            return Err(Error::invalid("total shard size is zero"));
        }
        shard_sizes.iter().map(|&s| s as f64 / total as f64).collect()
    };
    let mut params = vec![0.0; first.num_params()];
    let mut states = first.bn_states().to_vec();
    for s in &mut states {
        s.running_mean.fill(0.0);
        s.running_var.fill(0.0);
    }
    for (m, &w) in clients.iter().zip(&weights) {
        for (a, p) in params.iter_mut().zip(m.params()) {
            *a += w * p;
        }
        for (acc, s) in states.iter_mut().zip(m.bn_states()) {
            for (a, v) in acc.running_mean.iter_mut().zip(&s.running_mean) {
                *a += w * v;
            }
            for (a, v) in acc.running_var.iter_mut().zip(&s.running_var) {
                *a += w * v;
            }
        }
    }
    Model::from_parts(first.arch().clone(), params, states)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(classes: usize, per: usize) -> DatasetSpec {
        DatasetSpec::Blobs {
            classes,
            dim: 2,
            samples_per_class: per,
            radius: 4.0,
            std: 0.5,
        }
    }

    #[test]
    fn toy_dataset_is_deterministic_and_balanced() {
        let a = make_toy_dataset(&blobs(4, 1000), 3).unwrap();
        let b = make_toy_dataset(&blobs(4, 1000), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![1000; 4]);
        let img = DatasetSpec::Images {
            classes: 6,
            size: 8,
            samples_per_class: 5,
            noise: 0.3,
        };
        let d = make_toy_dataset(&img, 1).unwrap();
        assert_eq!(d.inputs.shape(), &[30, 1, 8, 8]);
        assert!(make_toy_dataset(&blobs(1, 10), 0).is_err());
    }

    #[test]
    fn partition_is_a_cover_for_many_alphas() {
        let d = make_toy_dataset(&blobs(5, 40), 0).unwrap();
        for (i, alpha) in [0.05, 0.1, 0.5, 1.0, 10.0].into_iter().enumerate() {
            let p = dirichlet_partition(&d, 7, alpha, i as u64).unwrap();
            let mut all: Vec<usize> = p.client_indices.concat();
            all.sort_unstable();
            assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
            assert!(p.sizes().iter().all(|&s| s >= 1));
        }
        assert!(dirichlet_partition(&d, 3, 0.0, 0).is_err());
        assert!(dirichlet_partition(&d, 3, -0.1, 0).is_err());
        assert!(dirichlet_partition(&d, 1, 1.0, 0).is_err());
    }

    #[test]
    fn huge_alpha_matches_global_histogram() {
        let d = make_toy_dataset(&blobs(4, 500), 0).unwrap();
        let p = dirichlet_partition(&d, 4, 1e6, 9).unwrap();
        for idx in &p.client_indices {
            let counts = d.subset(idx).class_counts();
            for c in counts {
                let share = c as f64 / idx.len() as f64;
                assert!((share - 0.25).abs() < 0.05, "{share}");
            }
        }
    }

    #[test]
    fn min_size_is_enforced() {
        let d = make_toy_dataset(&blobs(3, 20), 0).unwrap();
        let p = dirichlet_partition_min(&d, 6, 0.01, 4, 8).unwrap();
        assert!(p.sizes().iter().all(|&s| s >= 8), "{:?}", p.sizes());
        assert!(dirichlet_partition_min(&d, 6, 1.0, 4, 11).is_err());
    }

    #[test]
    fn one_class_shard_is_fit_perfectly() {
        let d = make_toy_dataset(&blobs(3, 30), 0).unwrap();
        let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == 2).collect();
        let shard = d.subset(&idx);
        let c = train_local(0, &shard, &ArchSpec::mlp(2, &[8], 3), &LocalTrainConfig::default(), 1).unwrap();
        assert_eq!(accuracy(&c.model, &shard).unwrap(), 1.0);
    }

    #[test]
    fn train_local_is_reproducible_and_rejects_empty() {
        let d = make_toy_dataset(&blobs(3, 20), 0).unwrap();
        let cfg = LocalTrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let arch = ArchSpec::mlp(2, &[4], 3);
        let a = train_local(1, &d, &arch, &cfg, 5).unwrap();
        let b = train_local(1, &d, &arch, &cfg, 5).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert!(train_local(1, &d.subset(&[]), &arch, &cfg, 5).is_err());
    }

    #[test]
    fn fedavg_examples() {
        let arch = ArchSpec::mlp(2, &[3], 2);
        let mut rng = rng::from_seed(0);
        let m = Model::new(arch.clone(), &mut rng).unwrap();
        let same = fedavg_one_shot(&[&m, &m, &m], &[3, 1, 7], false).unwrap();
        for (a, b) in same.params().iter().zip(m.params()) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut neg = m.clone();
        for p in neg.params_mut() {
            *p = -*p;
        }
        let z = fedavg_one_shot(&[&m, &neg], &[5, 5], false).unwrap();
        assert!(z.params().iter().all(|&p| p == 0.0));

        let ms: Vec<Model> = (0..3).map(|_| Model::new(arch.clone(), &mut rng).unwrap()).collect();
        let avg = fedavg_one_shot(&[&ms[0], &ms[1], &ms[2]], &[1, 2, 3], false).unwrap();
        for i in 0..m.num_params() {
            let expect = (ms[0].params()[i] + 2.0 * ms[1].params()[i] + 3.0 * ms[2].params()[i]) / 6.0;
            assert!((avg.params()[i] - expect).abs() < 1e-14);
        }
        let uni = fedavg_one_shot(&[&ms[0], &ms[1]], &[1, 100], true).unwrap();
        assert!((uni.params()[0] - 0.5 * (ms[0].params()[0] + ms[1].params()[0])).abs() < 1e-15);

        let other = Model::new(ArchSpec::mlp(2, &[4], 2), &mut rng).unwrap();
        assert!(fedavg_one_shot(&[&m, &other], &[1, 1], false).is_err());
    }
}
