//! Finite-difference harness shared by the gradient tests and the
//! acceptance suite. Every check returns a summary instead of panicking.
#![allow(dead_code)]

pub mod adaptation;
pub mod scenario;

use fedbicross::bilevel::{hypergradient, inner_step, kd_loss_on, BilevelConfig, KdBatch};
use fedbicross::clustering::{build_ensemble, Averaging, EnsembleTeacher};
use fedbicross::numcore::{
    bn_regularizer_loss, cross_entropy, grad_check, kl_divergence, softmax, through_model, total_variation, ArchSpec,
    BnMode, LayerSpec, Model, Tensor, FD_STEP,
};
use fedbicross::personalization::personalization_loss;
use fedbicross::rng::{self, StreamRng};
use fedbicross::synthesis::deep_inversion_loss;
use fedbicross::LossValue;
use rand::Rng;

pub const CASES: usize = 100;
pub const TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct FdSummary {
    pub name: String,
    pub cases: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl FdSummary {
    fn new(name: &str) -> Self {
        FdSummary {
            name: name.to_string(),
            cases: 0,
            skipped: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, errs: &[f64]) {
        for &e in errs {
            self.worst = self.worst.max(e);
        }
        if errs.iter().any(|e| e.is_nan() || *e >= TOL) {
            self.failures.push(format!("case {}: errors {errs:?}", self.cases));
        }
        self.cases += 1;
    }

    /// All cases within tolerance and fewer than 10% of draws discarded.
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.skipped * 10 < self.cases
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {} cases, worst rel. error {:.2e}, {} kink draws skipped, {} failures",
            self.name,
            self.cases,
            self.worst,
            self.skipped,
            self.failures.len()
        )
    }
}

pub fn random_arch(rng: &mut StreamRng) -> ArchSpec {
    if rng.random_bool(0.5) {
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..6)).collect();
        ArchSpec::mlp(rng.random_range(1..5), &hidden, rng.random_range(2..5))
    } else {
        let mut a = ArchSpec::small_cnn(
            [rng.random_range(1..3), 4, 4],
            rng.random_range(1..3),
            3,
            rng.random_range(2..4),
        );
        if rng.random_bool(0.5) {
            a.layers[2] = LayerSpec::Tanh;
        }
        a
    }
}

/// A model of `arch` with perturbed parameters and random running stats.
pub fn random_model(arch: &ArchSpec, rng: &mut StreamRng) -> Model {
    let mut model = Model::new(arch.clone(), rng).unwrap();
    for p in model.params_mut().iter_mut() {
        *p += 0.1 * rng.random_range(-1.0..1.0);
    }
    let mut states = model.bn_states().to_vec();
    for s in &mut states {
        for m in &mut s.running_mean {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in &mut s.running_var {
            *v = rng.random_range(0.5..2.0);
        }
    }
    model.set_bn_states(states).unwrap();
    model
}

pub fn random_input(model: &Model, batch: usize, rng: &mut StreamRng) -> Tensor {
    let mut shape = vec![batch];
    shape.extend_from_slice(model.input_shape());
    Tensor::randn(shape, rng)
}

pub fn random_case(seed: u64) -> (StreamRng, Model, Tensor, BnMode) {
    let mut rng = rng::from_seed(seed);
    let arch = random_arch(&mut rng);
    let model = random_model(&arch, &mut rng);
    let batch = rng.random_range(2..6);
    let x = random_input(&model, batch, &mut rng);
    let mode = if rng.random_bool(0.5) {
        BnMode::Batch
    } else {
        BnMode::Running
    };
    (rng, model, x, mode)
}

pub fn direction(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Sign pattern of every ReLU input; finite differences are only valid when
/// the perturbation does not change it.
pub fn relu_pattern(model: &Model, x: &Tensor, mode: BnMode) -> Vec<bool> {
    let trace = model.forward_traced(x, mode).unwrap();
    let mut pattern = Vec::new();
    for (l, spec) in model.arch().layers.iter().enumerate() {
        if *spec == LayerSpec::Relu {
            pattern.extend(trace.activations()[l].data().iter().map(|&v| v > 0.0));
        }
    }
    pattern
}

pub fn smooth_along(model: &Model, x: &Tensor, mode: BnMode, dp: Option<&[f64]>, dx: Option<&[f64]>) -> bool {
    let base = relu_pattern(model, x, mode);
    let h = 2.0 * FD_STEP;
    [-h, h].iter().all(|&s| {
        let p_ok = dp.is_none_or(|dp| {
            let mut m = model.clone();
            let p: Vec<f64> = model.params().iter().zip(dp).map(|(p, d)| p + s * d).collect();
            m.set_params(&p).unwrap();
            relu_pattern(&m, x, mode) == base
        });
        let x_ok = dx.is_none_or(|dx| {
            let xs: Vec<f64> = x.data().iter().zip(dx).map(|(v, d)| v + s * d).collect();
            relu_pattern(model, &Tensor::new(x.shape().to_vec(), xs).unwrap(), mode) == base
        });
        p_ok && x_ok
    })
}

fn param_err(model: &Model, dp: &[f64], f: &dyn Fn(&Model) -> LossValue) -> f64 {
    grad_check(
        |p| {
            let mut m = model.clone();
            m.set_params(p).unwrap();
            let l = f(&m);
            (l.value, l.grad_params.unwrap())
        },
        model.params(),
        dp,
    )
}

fn input_err(x: &Tensor, dx: &[f64], f: &dyn Fn(&Tensor) -> LossValue) -> f64 {
    grad_check(
        |v| {
            let l = f(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap());
            (l.value, l.grad_input.unwrap().into_data())
        },
        x.data(),
        dx,
    )
}

/// Loss factory: given a random case, the loss as a function of (model, input).
pub type LossFactory<'a> =
    dyn Fn(&Model, &Tensor, BnMode, &mut StreamRng) -> Box<dyn Fn(&Model, &Tensor) -> LossValue> + 'a;

/// Parameter and input gradients of a loss through one random model.
pub fn fd_model_loss(name: &str, seed_base: u64, with_input: bool, loss: &LossFactory) -> FdSummary {
    let mut s = FdSummary::new(name);
    let mut draw = 0u64;
    while s.cases < CASES {
        let (mut rng, model, x, mode) = random_case(seed_base + draw);
        draw += 1;
        let f = loss(&model, &x, mode, &mut rng);
        let dp = direction(&mut rng, model.num_params());
        let dx = direction(&mut rng, x.numel());
        if !smooth_along(&model, &x, mode, Some(&dp), with_input.then_some(dx.as_slice())) {
            s.skipped += 1;
            continue;
        }
        let mut errs = vec![param_err(&model, &dp, &|m| f(m, &x))];
        if with_input {
            errs.push(input_err(&x, &dx, &|xi| f(&model, xi)));
        }
        s.record(&errs);
    }
    s
}

pub fn fd_cross_entropy(seed_base: u64) -> FdSummary {
    fd_model_loss("cross entropy", seed_base, true, &|model, x, mode, rng| {
        let labels: Vec<usize> = (0..x.batch())
            .map(|_| rng.random_range(0..model.num_classes()))
            .collect();
        Box::new(move |m, x| through_model(m, x, mode, |l| cross_entropy(l, &labels)).unwrap())
    })
}

pub fn fd_kl(tau: f64, seed_base: u64) -> FdSummary {
    fd_model_loss(&format!("kl tau={tau}"), seed_base, true, &|model, x, mode, rng| {
        let teacher = Tensor::randn(vec![x.batch(), model.num_classes()], rng).scale(3.0);
        Box::new(move |m, x| through_model(m, x, mode, |l| kl_divergence(&teacher, l, tau)).unwrap())
    })
}

pub fn fd_bn_regularizer(seed_base: u64) -> FdSummary {
    fd_model_loss("bn regularizer", seed_base, true, &|_, _, mode, _| {
        Box::new(move |m, x| bn_regularizer_loss(m, x, mode).unwrap())
    })
}

/// Total variation of random image batches with respect to the pixels.
pub fn fd_total_variation(seed_base: u64) -> FdSummary {
    let mut s = FdSummary::new("total variation");
    for case in 0..CASES {
        let mut rng = rng::from_seed(seed_base + case as u64);
        let shape = vec![
            rng.random_range(1..4),
            rng.random_range(1..3),
            rng.random_range(2..6),
            rng.random_range(2..6),
        ];
        let x = Tensor::randn(shape.clone(), &mut rng);
        let d = direction(&mut rng, x.numel());
        let err = grad_check(
            |v| {
                let l = total_variation(&Tensor::new(shape.clone(), v.to_vec()).unwrap()).unwrap();
                (l.value, l.grad_input.unwrap().into_data())
            },
            x.data(),
            &d,
        );
        s.record(&[err]);
    }
    s
}

fn random_teacher(arch: &ArchSpec, rng: &mut StreamRng) -> EnsembleTeacher {
    let members = (0..rng.random_range(1..=3)).map(|_| random_model(arch, rng)).collect();
    let averaging = if rng.random_bool(0.7) {
        Averaging::Probabilities
    } else {
        Averaging::Logits
    };
    build_ensemble(0, members, averaging).unwrap()
}

/// Inversion loss (cross-entropy through the ensemble, total variation on
/// images, batch-norm matching on every member) with respect to the input.
pub fn fd_deep_inversion(seed_base: u64) -> FdSummary {
    let mut s = FdSummary::new("deep inversion (input)");
    let mut draw = 0u64;
    while s.cases < CASES {
        let mut rng = rng::from_seed(seed_base + draw);
        draw += 1;
        let arch = random_arch(&mut rng);
        let teacher = random_teacher(&arch, &mut rng);
        let batch = rng.random_range(2..6);
        let x = random_input(&teacher.members[0], batch, &mut rng);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..teacher.num_classes())).collect();
        let alpha_tv = if arch.is_image() {
            rng.random_range(0.0..0.5)
        } else {
            0.0
        };
        let alpha_bn = rng.random_range(0.0..2.0);
        let dx = direction(&mut rng, x.numel());
        if !teacher
            .members
            .iter()
            .all(|m| smooth_along(m, &x, BnMode::Running, None, Some(&dx)))
        {
            s.skipped += 1;
            continue;
        }
        let err = input_err(&x, &dx, &|xi| {
            deep_inversion_loss(xi, &teacher, &labels, alpha_tv, alpha_bn)
                .unwrap()
                .0
        });
        s.record(&[err]);
    }
    s
}

fn random_probs(rows: usize, classes: usize, rng: &mut StreamRng) -> Tensor {
    let logits = Tensor::new(
        vec![rows, classes],
        (0..rows * classes).map(|_| rng.random_range(-3.0..3.0)).collect(),
    )
    .unwrap();
    softmax(&logits, 1.0)
}

/// Blended distillation loss with respect to the student's parameters.
pub fn fd_kd(seed_base: u64) -> FdSummary {
    let mut s = FdSummary::new("distillation (params)");
    let mut draw = 0u64;
    while s.cases < CASES {
        let (mut rng, g, x, _) = random_case(seed_base + draw);
        draw += 1;
        let c = g.num_classes();
        let tau = if rng.random_bool(0.5) { 1.0 } else { 20.0 };
        let batch = KdBatch {
            original: random_probs(x.batch(), c, &mut rng),
            adapted: random_probs(x.batch(), c, &mut rng),
            lambda: rng.random_range(0.0..1.0),
            x: x.clone(),
        };
        let dp = direction(&mut rng, g.num_params());
        if !smooth_along(&g, &x, BnMode::Batch, Some(&dp), None) {
            s.skipped += 1;
            continue;
        }
        s.record(&[param_err(&g, &dp, &|m| kd_loss_on(m, &batch, tau).unwrap().0)]);
    }
    s
}

/// Personalization loss with respect to the fine-tuned model's parameters.
pub fn fd_personalization(seed_base: u64) -> FdSummary {
    let mut s = FdSummary::new("personalization (params)");
    let mut draw = 0u64;
    while s.cases < CASES {
        let (mut rng, f, x, _) = random_case(seed_base + draw);
        draw += 1;
        let g = random_model(f.arch(), &mut rng);
        let local = random_model(f.arch(), &mut rng);
        let labels: Vec<usize> = (0..x.batch()).map(|_| rng.random_range(0..f.num_classes())).collect();
        let (gamma, delta) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let tau = if rng.random_bool(0.5) { 1.0 } else { 20.0 };
        let dp = direction(&mut rng, f.num_params());
        if !smooth_along(&f, &x, BnMode::Batch, Some(&dp), None) {
            s.skipped += 1;
            continue;
        }
        let err = param_err(&f, &dp, &|m| {
            personalization_loss(m, &g, &local, &x, &labels, gamma, delta, tau)
                .unwrap()
                .0
        });
        s.record(&[err]);
    }
    s
}

/// A small smooth student (tanh, under 100 parameters) for hypergradients.
pub fn toy_student(rng: &mut StreamRng, input: usize, classes: usize) -> Model {
    let mut arch = ArchSpec::mlp(input, &[4], classes);
    arch.layers[2] = LayerSpec::Tanh;
    let m = random_model(&arch, rng);
    assert!(m.num_params() <= 100);
    m
}

/// Derivative of the validation loss after one inner step with respect to
/// the weights, against central differences of the composed map.
pub fn fd_hypergradient(seed_base: u64, cases: usize) -> FdSummary {
    let mut s = FdSummary::new("hypergradient through the inner step");
    for case in 0..cases as u64 {
        let mut rng = rng::from_seed(seed_base + case);
        let (input, classes) = (rng.random_range(2..5), rng.random_range(2..4));
        let k = rng.random_range(1..=4);
        let g0 = toy_student(&mut rng, input, classes);
        let make = |rng: &mut StreamRng, rows: usize| KdBatch {
            x: random_input(&g0, rows, rng),
            original: random_probs(rows, classes, rng),
            adapted: random_probs(rows, classes, rng),
            lambda: rng.random_range(0.0..1.0),
        };
        let train: Vec<KdBatch> = (0..k)
            .map(|_| {
                let rows = rng.random_range(2..6);
                make(&mut rng, rows)
            })
            .collect();
        let rows = rng.random_range(2..5);
        let val = make(&mut rng, rows);
        let cfg = BilevelConfig {
            lr_model: rng.random_range(0.01..0.5),
            tau: if rng.random_bool(0.5) { 1.0 } else { 20.0 },
            ..BilevelConfig::default()
        };
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);

        let (g1, grads) = inner_step(&g0, &train, &w, &cfg).unwrap();
        let (_, h) = hypergradient(&g1, &grads, &val, &cfg).unwrap();
        let d = direction(&mut rng, k);
        let analytic: f64 = h.iter().zip(&d).map(|(a, b)| a * b).sum();
        let val_at = |step: f64| {
            let wv: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let (g, _) = inner_step(&g0, &train, &wv, &cfg).unwrap();
            kd_loss_on(&g, &val, cfg.tau).unwrap().0.value
        };
        let numeric = (val_at(FD_STEP) - val_at(-FD_STEP)) / (2.0 * FD_STEP);
        // hypergradients can be small, so scale by the value itself
        let err = (analytic - numeric).abs() / analytic.abs().max(1e-6);
        s.record(&[err]);
    }
    s
}
