use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::report::{
    emit_report, save_model, write_atomic, ClientRecord, ClusteringRecord, ErrorRecord, RunReport, WeightTrajectory,
};
use crate::bilevel::{run_online_bilevel, BilevelConfig, ClusterInputs, ClusterTrainState, WeightMode};
use crate::clustering::{
    build_ensemble, entropy_diagnostics, kmeans_cluster, probe_batch, probe_predictions, Averaging, Clustering,
    EnsembleTeacher, EntropyDiagnostics,
};
use crate::error::{Error, Result};
use crate::federation::{
    accuracy, dirichlet_partition_min, fedavg_one_shot, make_toy_dataset, train_local_from, ClientModel, Dataset,
    Partition,
};
use crate::numcore::Model;
use crate::personalization::{personalize, PersonalizedModel};
use crate::rng::{self, streams};
use crate::synthesis::{adapt_teacher_bn, synthesize_trajectory, NoiseAdaptedTeacher, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    LocalTraining,
    Clustering,
    Synthesis,
    Distillation,
    Personalization,
    Evaluation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::LocalTraining => "local_training",
            Stage::Clustering => "clustering",
            Stage::Synthesis => "synthesis",
            Stage::Distillation => "distillation",
            Stage::Personalization => "personalization",
            Stage::Evaluation => "evaluation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub stage: Stage,
    pub client: usize,
    pub test: bool,
}

/// Client shards behind an access log. Stages only see a shard by asking
/// for it here, so tests can check which stage touched which client.
#[derive(Debug)]
pub struct ShardStore {
    train: Vec<Dataset>,
    test: Vec<Dataset>,
    log: Mutex<Vec<Access>>,
}

impl ShardStore {
    pub fn new(train: Vec<Dataset>, test: Vec<Dataset>) -> Self {
        ShardStore {
            train,
            test,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn clients(&self) -> usize {
        self.train.len()
    }

    fn record(&self, stage: Stage, client: usize, test: bool) {
        self.log
            .lock()
            .expect("access log poisoned")
            .push(Access { stage, client, test });
    }

    pub fn train(&self, stage: Stage, client: usize) -> &Dataset {
        self.record(stage, client, false);
        &self.train[client]
    }

    pub fn test(&self, stage: Stage, client: usize) -> &Dataset {
        self.record(stage, client, true);
        &self.test[client]
    }

    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .zip(&self.test)
            .map(|(a, b)| (a.len(), b.len()))
            .collect()
    }

    pub fn accesses(&self) -> Vec<Access> {
        let mut v = self.log.lock().expect("access log poisoned").clone();
        // parallel stages log in scheduling order
        v.sort_by_key(|a| (a.stage as u8, a.client, a.test));
        v
    }
}

fn stage_seed(cfg: &ExperimentConfig, name: &str) -> u64 {
    rng::derive_seed(cfg.seed, name, 0)
}

/// Generate the dataset, split it across clients and hold out each
/// client's test part.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Partition, ShardStore)> {
    let data = make_toy_dataset(&cfg.dataset, stage_seed(cfg, streams::DATA))?;
    let partition = dirichlet_partition_min(
        &data,
        cfg.clients,
        cfg.alpha,
        stage_seed(cfg, streams::PARTITION),
        cfg.min_shard,
    )?;
    let (train, test) = partition
        .client_indices
        .iter()
        .enumerate()
        .map(|(i, idx)| {
            data.subset(idx)
                .split(cfg.test_fraction, &mut rng::stream(cfg.seed, streams::SPLIT, i as u64))
        })
        .unzip();
    Ok((partition, ShardStore::new(train, test)))
}

/// Every client trains from the same broadcast initialization on its own shard.
pub fn train_clients(cfg: &ExperimentConfig, store: &ShardStore) -> Result<Vec<ClientModel>> {
    let init = Model::new(cfg.arch.clone(), &mut rng::stream(cfg.seed, streams::INIT, 0))?;
    let seed = stage_seed(cfg, streams::CLIENT);
    (0..store.clients())
        .into_par_iter()
        .map(|i| train_local_from(i, store.train(Stage::LocalTraining, i), init.clone(), &cfg.local, seed))
        .collect()
}

/// Probe-based clustering of the uploaded models. Only the models are used.
pub fn cluster_clients(cfg: &ExperimentConfig, models: &[Model]) -> Result<(Clustering, EntropyDiagnostics)> {
    let refs: Vec<&Model> = models.iter().collect();
    let probe_seed = stage_seed(cfg, streams::PROBE);
    let matrices = probe_predictions(&refs, cfg.probes, &cfg.arch.input_shape, probe_seed)?;
    let clustering = if cfg.effective_clusters() == 1 {
        let points: Vec<Vec<f64>> = matrices.iter().map(|m| m.probs.data().to_vec()).collect();
        Clustering::single(&points)
    } else {
        kmeans_cluster(&matrices, cfg.clusters, stage_seed(cfg, streams::KMEANS))?
    };
    let probes = probe_batch(cfg.probes, &cfg.arch.input_shape, probe_seed);
    let entropy = entropy_diagnostics(models, &clustering, &probes)?;
    Ok((clustering, entropy))
}

pub fn build_teachers(models: &[Model], clustering: &Clustering) -> Result<Vec<EnsembleTeacher>> {
    (0..clustering.k)
        .map(|k| {
            let members = clustering.members(k).into_iter().map(|i| models[i].clone()).collect();
            build_ensemble(k, members, Averaging::Probabilities)
        })
        .collect()
}

/// One trajectory and one noise-adapted teacher per cluster.
pub fn synthesize_all(
    cfg: &ExperimentConfig,
    teachers: &[EnsembleTeacher],
) -> Result<Vec<(Trajectory, NoiseAdaptedTeacher)>> {
    teachers
        .par_iter()
        .map(|t| {
            let seed = rng::derive_seed(cfg.seed, streams::SYNTHESIS, t.cluster as u64);
            let traj = synthesize_trajectory(t, &cfg.synthesis, seed)?;
            let adapted = adapt_teacher_bn(t, &traj, cfg.synthesis.momentum)?;
            Ok((traj, adapted))
        })
        .collect()
}

pub fn bilevel_config(cfg: &ExperimentConfig) -> BilevelConfig {
    let weight_mode = match cfg.mode {
        Mode::UniformCross => WeightMode::Uniform,
        Mode::IntraCluster => WeightMode::IntraCluster,
        Mode::SimWeighted => WeightMode::SimWeighted,
        _ => cfg.bilevel.weight_mode,
    };
    BilevelConfig {
        weight_mode,
        ..cfg.bilevel
    }
}

/// Stage 2 sees trajectories and teachers only.
pub fn distill(
    cfg: &ExperimentConfig,
    teachers: &[EnsembleTeacher],
    synth: &[(Trajectory, NoiseAdaptedTeacher)],
    centroids: &[Vec<f64>],
) -> Result<Vec<ClusterTrainState>> {
    let inputs: Vec<ClusterInputs> = teachers
        .iter()
        .zip(synth)
        .map(|(t, (traj, adapted))| ClusterInputs {
            trajectory: traj,
            teacher: t,
            adapted,
        })
        .collect();
    run_online_bilevel(
        &inputs,
        &cfg.arch,
        centroids,
        &bilevel_config(cfg),
        stage_seed(cfg, streams::BILEVEL),
    )
}

/// Stage 3: each client fine-tunes its cluster's model on its own shard.
pub fn personalize_clients(
    cfg: &ExperimentConfig,
    store: &ShardStore,
    clients: &[ClientModel],
    clustering: &Clustering,
    cluster_models: &[Model],
) -> Result<Vec<PersonalizedModel>> {
    let seed = stage_seed(cfg, streams::PERSONALIZE);
    clients
        .par_iter()
        .map(|c| {
            let k = clustering.assignment[c.id];
            personalize(
                c,
                store.train(Stage::Personalization, c.id),
                k,
                &cluster_models[k],
                &cfg.personalization,
                seed,
            )
        })
        .collect()
}

/// Everything a run produced, including models for checkpointing.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub partition: Option<Partition>,
    pub clients: Vec<ClientModel>,
    pub global: Option<Model>,
    pub cluster_models: Vec<Model>,
    pub personalized: Vec<Model>,
    pub trajectories: Vec<Trajectory>,
    pub accesses: Vec<Access>,
}

#[derive(Default)]
struct Timer {
    timings: BTreeMap<String, f64>,
}

impl Timer {
    /// Run `f`, adding its wall-clock time to the stage's total.
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T, (Stage, Error)> {
        let start = Instant::now();
        let out = f().map_err(|e| (stage, e));
        *self.timings.entry(stage.name().into()).or_default() += start.elapsed().as_secs_f64();
        out
    }
}

/// Run the configured mode end to end without touching the disk. Invalid
/// configurations fail before any work; failures after that come back as a
/// partial report with an error record.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut out = RunOutcome {
        report: RunReport::new(cfg),
        partition: None,
        clients: Vec::new(),
        global: None,
        cluster_models: Vec::new(),
        personalized: Vec::new(),
        trajectories: Vec::new(),
        accesses: Vec::new(),
    };
    let mut store = None;
    let mut timer = Timer::default();
    let result = stages(cfg, &mut out, &mut store, &mut timer);
    out.report.timings = timer.timings;
    if let Err((stage, e)) = result {
        out.report.error = Some(ErrorRecord {
            class: e.class().into(),
            stage: stage.name().into(),
            message: e.to_string(),
        });
    }
    if let Some(s) = store {
        out.accesses = s.accesses();
    }
    Ok(out)
}

fn stages(
    cfg: &ExperimentConfig,
    out: &mut RunOutcome,
    store_slot: &mut Option<ShardStore>,
    timer: &mut Timer,
) -> Result<(), (Stage, Error)> {
    let (partition, store) = timer.time(Stage::Data, || prepare_data(cfg))?;
    out.partition = Some(partition);
    let store = store_slot.insert(store);
    let clients = timer.time(Stage::LocalTraining, || train_clients(cfg, store))?;
    let models: Vec<Model> = clients.iter().map(|c| c.model.clone()).collect();
    let local_acc = timer.time(Stage::Evaluation, || {
        (0..store.clients())
            .map(|i| accuracy(&models[i], store.test(Stage::Evaluation, i)))
            .collect::<Result<Vec<_>>>()
    })?;
    let sizes = store.sizes();
    let record = |i: usize, cluster: Option<usize>, acc: f64| ClientRecord {
        client: i,
        train_size: sizes[i].0,
        test_size: sizes[i].1,
        cluster,
        local_accuracy: local_acc[i],
        accuracy: acc,
    };

    if cfg.mode == Mode::Fedavg1 {
        let refs: Vec<&Model> = models.iter().collect();
        let train_sizes: Vec<usize> = sizes.iter().map(|s| s.0).collect();
        let global = timer.time(Stage::Distillation, || fedavg_one_shot(&refs, &train_sizes, false))?;
        let acc = timer.time(Stage::Evaluation, || {
            (0..store.clients())
                .map(|i| accuracy(&global, store.test(Stage::Evaluation, i)))
                .collect::<Result<Vec<_>>>()
        })?;
        out.report.clients = acc.iter().enumerate().map(|(i, &a)| record(i, None, a)).collect();
        out.report.mean_accuracy = Some(acc.iter().sum::<f64>() / acc.len() as f64);
        out.global = Some(global);
        out.clients = clients;
        return Ok(());
    }
    out.clients = clients;

    let (clustering, entropy) = timer.time(Stage::Clustering, || cluster_clients(cfg, &models))?;
    out.report.clustering = Some(ClusteringRecord {
        k: clustering.k,
        assignment: clustering.assignment.clone(),
        inertia: clustering.inertia,
    });
    out.report.entropy = Some(entropy);
    let teachers = timer.time(Stage::Clustering, || build_teachers(&models, &clustering))?;

    let synth = timer.time(Stage::Synthesis, || synthesize_all(cfg, &teachers))?;
    let states = timer.time(Stage::Distillation, || {
        distill(cfg, &teachers, &synth, &clustering.centroids)
    })?;
    let iterations = synth[0].0.iterations.clone();
    out.trajectories = synth.into_iter().map(|(t, _)| t).collect();
    out.report.weights = states
        .iter()
        .map(|s| WeightTrajectory {
            cluster: s.cluster,
            iterations: iterations.clone(),
            weights: s.weight_history.iter().map(|w| w.as_slice().to_vec()).collect(),
            val_loss: s.val_history.clone(),
        })
        .collect();
    out.cluster_models = states.into_iter().map(|s| s.model).collect();

    let delivered: Vec<Model> = if cfg.mode == Mode::NoPkd {
        clustering
            .assignment
            .iter()
            .map(|&k| out.cluster_models[k].clone())
            .collect()
    } else {
        let p = timer.time(Stage::Personalization, || {
            personalize_clients(cfg, store, &out.clients, &clustering, &out.cluster_models)
        })?;
        p.into_iter().map(|p| p.model).collect()
    };
    let acc = timer.time(Stage::Evaluation, || {
        delivered
            .iter()
            .enumerate()
            .map(|(i, m)| accuracy(m, store.test(Stage::Evaluation, i)))
            .collect::<Result<Vec<_>>>()
    })?;
    out.report.clients = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| record(i, Some(clustering.assignment[i]), a))
        .collect();
    out.report.mean_accuracy = Some(acc.iter().sum::<f64>() / acc.len() as f64);
    if cfg.mode != Mode::NoPkd {
        out.personalized = delivered;
    }
    Ok(())
}

/// Write the report files plus `checkpoints/` into `dir`.
pub fn persist(out: &RunOutcome, dir: &Path, dump_trajectories: bool) -> Result<()> {
    let ck = dir.join("checkpoints");
    fs::create_dir_all(&ck)?;
    if let Some(p) = &out.partition {
        write_atomic(&ck.join("partition.json"), serde_json::to_string(p)?.as_bytes())?;
    }
    for c in &out.clients {
        save_model(&ck.join(format!("client_{}.json", c.id)), "client", c.id, &c.model)?;
    }
    if let Some(g) = &out.global {
        save_model(&ck.join("global.json"), "global", 0, g)?;
    }
    for (k, m) in out.cluster_models.iter().enumerate() {
        save_model(&ck.join(format!("cluster_{k}.json")), "cluster", k, m)?;
    }
    for (i, m) in out.personalized.iter().enumerate() {
        save_model(&ck.join(format!("personalized_{i}.json")), "personalized", i, m)?;
    }
    if dump_trajectories {
        for t in &out.trajectories {
            write_atomic(
                &ck.join(format!("trajectory_{}.json", t.cluster)),
                serde_json::to_string(t)?.as_bytes(),
            )?;
        }
    }
    emit_report(&out.report, dir)?;
    Ok(())
}

/// Run and, when the config names an output directory, persist everything.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let out = run_pipeline(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        persist(&out, dir, cfg.dump_trajectories)?;
    }
    Ok(out.report)
}
