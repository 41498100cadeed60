//! Grouping clients by how their models answer shared noise probes, and the
//! per-cluster ensemble teachers.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{entropy, softmax, BnMode, Model, Tensor};
use crate::rng;

/// Softmax outputs of one client model on the shared probe batch, `[M, C]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub client: usize,
    pub probs: Tensor,
}

/// Standard-normal probe batch `[m, input_shape...]`.
pub fn probe_batch(m: usize, input_shape: &[usize], seed: u64) -> Tensor {
    let mut shape = vec![m];
    shape.extend_from_slice(input_shape);
    Tensor::randn(shape, &mut rng::from_seed(seed))
}

/// Evaluate every client on the same probe batch (running statistics).
pub fn probe_predictions(
    clients: &[&Model],
    m: usize,
    input_shape: &[usize],
    seed: u64,
) -> Result<Vec<PredictionMatrix>> {
    if m == 0 {
        return Err(Error::invalid("need at least one probe"));
    }
    if let Some(bad) = clients.iter().find(|c| c.input_shape() != input_shape) {
        return Err(Error::ShapeMismatch {
            expected: input_shape.to_vec(),
            actual: bad.input_shape().to_vec(),
        });
    }
    let probes = probe_batch(m, input_shape, seed);
    clients
        .par_iter()
        .enumerate()
        .map(|(client, model)| {
            let logits = model.forward(&probes, BnMode::Running)?;
            Ok(PredictionMatrix {
                client,
                probs: softmax(&logits, 1.0),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Cluster of each client. Labels are canonical: cluster ids appear in
    /// order of their first client.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Total squared Frobenius distance to assigned centroids.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub restart: usize,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }

    /// All clients in a single cluster.
    pub fn single(points: &[Vec<f64>]) -> Self {
        let dim = points.first().map_or(0, Vec::len);
        let mut c = vec![0.0; dim];
        for p in points {
            for (a, v) in c.iter_mut().zip(p) {
                *a += v / points.len() as f64;
            }
        }
        let inertia = points.iter().map(|p| sq_dist(p, &c)).sum();
        Clustering {
            k: 1,
            assignment: vec![0; points.len()],
            centroids: vec![c],
            inertia,
            inertia_trace: vec![inertia],
            restart: 0,
        }
    }
}

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-8;

/// K-means on flattened prediction matrices.
pub fn kmeans_cluster(matrices: &[PredictionMatrix], k: usize, seed: u64) -> Result<Clustering> {
    let points: Vec<Vec<f64>> = matrices.iter().map(|m| m.probs.data().to_vec()).collect();
    kmeans(&points, k, seed)
}

/// Lloyd's algorithm with k-means++ seeding; best of [`KMEANS_RESTARTS`]
/// restarts by inertia (ties go to the earlier restart).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("K must satisfy 1 <= K <= N, got K={k}, N={n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points have different dimensions"));
    }
    let runs: Vec<Clustering> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|r| lloyd(points, k, &mut rng::stream(seed, rng::streams::KMEANS, r as u64), r))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|best, c| if c.inertia < best.inertia { c } else { best })
        .expect("at least one restart");
    Ok(canonicalize(best))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Move the point farthest from its centroid (in a cluster with spare
/// members) into each empty cluster, centring that cluster on it.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignment: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let victim = (0..points.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&i, &j| {
                let di = sq_dist(&points[i], &centroids[assignment[i]]);
                let dj = sq_dist(&points[j], &centroids[assignment[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("k <= n leaves a cluster with spare members");
        assignment[victim] = empty;
        centroids[empty] = points[victim].clone();
    }
}

fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn lloyd<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R, restart: usize) -> Clustering {
    let dim = points[0].len();
    let mut centroids = plus_plus(points, k, rng);
    let mut assignment = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        assignment = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut assignment);
        trace.push(inertia(points, &centroids, &assignment));
        let mut next = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in next[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, &cnt) in next.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= cnt as f64;
            }
        }
        let shift: f64 = next.iter().zip(&centroids).map(|(a, b)| sq_dist(a, b)).sum();
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    let final_inertia = inertia(points, &centroids, &assignment);
    trace.push(final_inertia);
    Clustering {
        k,
        assignment,
        centroids,
        inertia: final_inertia,
        inertia_trace: trace,
        restart,
    }
}

fn canonicalize(mut c: Clustering) -> Clustering {
    let mut map = vec![usize::MAX; c.k];
    let mut next = 0;
    for &a in &c.assignment {
        if map[a] == usize::MAX {
            map[a] = next;
            next += 1;
        }
    }
    let mut centroids = vec![Vec::new(); c.k];
    for (old, &new) in map.iter().enumerate() {
        centroids[new] = std::mem::take(&mut c.centroids[old]);
    }
    for a in &mut c.assignment {
        *a = map[*a];
    }
    c.centroids = centroids;
    c
}

/// How an ensemble combines its members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of member softmax outputs.
    #[default]
    Probabilities,
    /// Softmax of the mean member logits.
    Logits,
}

/// Uniform average of member classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTeacher {
    pub cluster: usize,
    pub members: Vec<Model>,
    pub averaging: Averaging,
}

pub fn build_ensemble(cluster: usize, members: Vec<Model>, averaging: Averaging) -> Result<EnsembleTeacher> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid(format!("cluster {cluster} has no members")))?;
    if members
        .iter()
        .any(|m| m.num_classes() != first.num_classes() || m.input_shape() != first.input_shape())
    {
        return Err(Error::invalid(
            "ensemble members disagree on input shape or class count",
        ));
    }
    Ok(EnsembleTeacher {
        cluster,
        members,
        averaging,
    })
}

impl EnsembleTeacher {
    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.members[0].input_shape()
    }

    /// Ensemble output at temperature `tau`, running statistics.
    pub fn probabilities(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        let inv = 1.0 / self.members.len() as f64;
        match self.averaging {
            Averaging::Probabilities => {
                let mut acc: Option<Tensor> = None;
                for m in &self.members {
                    let p = softmax(&m.forward(x, BnMode::Running)?, tau);
                    match acc.as_mut() {
                        Some(a) => a.axpy(1.0, &p)?,
                        None => acc = Some(p),
                    }
                }
                Ok(acc.expect("non-empty ensemble").scale(inv))
            }
            Averaging::Logits => {
                let mut acc: Option<Tensor> = None;
                for m in &self.members {
                    let l = m.forward(x, BnMode::Running)?;
                    match acc.as_mut() {
                        Some(a) => a.axpy(1.0, &l)?,
                        None => acc = Some(l),
                    }
                }
                Ok(softmax(&acc.expect("non-empty ensemble").scale(inv), tau))
            }
        }
    }

    pub fn evaluate(&self, x: &Tensor) -> Result<Tensor> {
        self.probabilities(x, 1.0)
    }

    /// Mean per-sample entropy (nats) of the soft labels on `x`.
    pub fn mean_entropy(&self, x: &Tensor) -> Result<f64> {
        let p = self.evaluate(x)?;
        Ok(p.rows().map(entropy).sum::<f64>() / p.batch() as f64)
    }
}

/// Soft-label entropy of the all-clients ensemble versus each cluster's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDiagnostics {
    pub all_clients: f64,
    pub clusters: Vec<f64>,
}

pub fn entropy_diagnostics(clients: &[Model], clustering: &Clustering, probes: &Tensor) -> Result<EntropyDiagnostics> {
    let all = build_ensemble(0, clients.to_vec(), Averaging::Probabilities)?;
    let clusters = (0..clustering.k)
        .map(|k| {
            let members = clustering.members(k).into_iter().map(|i| clients[i].clone()).collect();
            build_ensemble(k, members, Averaging::Probabilities)?.mean_entropy(probes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyDiagnostics {
        all_clients: all.mean_entropy(probes)?,
        clusters,
    })
}
