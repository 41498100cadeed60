//! Benchmark fixtures shared by the criterion targets.

use fedbicross::clustering::{build_ensemble, Averaging, EnsembleTeacher};
use fedbicross::numcore::{ArchSpec, Model, Tensor};
use fedbicross::rng;

/// The desk preset classifier.
pub fn preset_arch() -> ArchSpec {
    ArchSpec::small_cnn([1, 8, 8], 4, 16, 4)
}

pub fn model(arch: &ArchSpec, seed: u64) -> Model {
    Model::new(arch.clone(), &mut rng::from_seed(seed)).expect("valid architecture")
}

pub fn batch(arch: &ArchSpec, rows: usize, seed: u64) -> Tensor {
    let mut shape = vec![rows];
    shape.extend_from_slice(&arch.input_shape);
    Tensor::randn(shape, &mut rng::from_seed(seed))
}

pub fn teacher(arch: &ArchSpec, members: usize) -> EnsembleTeacher {
    let models = (0..members).map(|i| model(arch, 100 + i as u64)).collect();
    build_ensemble(0, models, Averaging::Probabilities).expect("non-empty ensemble")
}
