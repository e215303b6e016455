//! Central finite-difference check of a layer's backward pass.
//!
//! The scalar probed is `sum(y ⊙ r)` for a fixed random projection `r`, so
//! the upstream gradient handed to `backward` is simply `r`. Every forward
//! reseeds the dropout generator, which keeps training-mode masks fixed
//! across perturbations.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::layers::{Layer, Pass};
use crate::nn::params::{Grads, ParamRole, ParamStore};

pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-4;
/// Elements probed per tensor; larger tensors are sampled at a fixed stride.
const MAX_PROBES: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Name of the tensor (or `input`) where the worst error occurred.
    pub worst: String,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_PROBES {
        return (0..len).collect();
    }
    let offset = rng.random_range(0..len / MAX_PROBES);
    (0..MAX_PROBES).map(|k| offset + k * len / MAX_PROBES).collect()
}

/// Checks input and parameter gradients of `layer` on a random input of `input_shape`.
pub fn check_layer(
    layer: Box<dyn Layer>,
    store: ParamStore,
    input_shape: &[usize],
    train: bool,
    seed: u64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = ArrayD::from_shape_fn(IxDyn(input_shape), |_| rng.random_range(-1.5..1.5));
    check_layer_at(layer, store, &x, train, seed)
}

/// As [`check_layer`], at a caller-chosen input.
pub fn check_layer_at(
    mut layer: Box<dyn Layer>,
    mut store: ParamStore,
    x: &ArrayD<f64>,
    train: bool,
    seed: u64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let dropout_seed = seed.wrapping_add(1);

    let eval = |layer: &mut Box<dyn Layer>, store: &ParamStore, x: &ArrayD<f64>| -> ArrayD<f64> {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut pass = if train { Pass::Train(&mut drop_rng) } else { Pass::Infer };
        layer.forward(store, x, &mut pass).expect("forward")
    };

    let y = eval(&mut layer, &store, x);
    let r = ArrayD::from_shape_fn(y.raw_dim(), |_| rng.random_range(-1.0..1.0));
    let mut grads = Grads::zeros_like(&store);
    let dx = layer.backward(&store, &r, &mut grads);
    let objective = |y: &ArrayD<f64>| (y * &r).sum();

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: &str, analytic: f64, numeric: f64| {
        let e = rel_error(analytic, numeric);
        report.checked += 1;
        if report.checked == 1 || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = name.to_string();
        }
    };

    let mut xp = x.clone();
    for i in probe_indices(x.len(), &mut rng) {
        let orig = xp.as_slice_mut().expect("standard layout")[i];
        xp.as_slice_mut().unwrap()[i] = orig + FD_STEP;
        let up = objective(&eval(&mut layer, &store, &xp));
        xp.as_slice_mut().unwrap()[i] = orig - FD_STEP;
        let down = objective(&eval(&mut layer, &store, &xp));
        xp.as_slice_mut().unwrap()[i] = orig;
        record("input", dx.as_slice().expect("standard layout")[i], (up - down) / (2.0 * FD_STEP));
    }

    for t in 0..store.tensors().len() {
        if store.tensors()[t].role != ParamRole::Trainable {
            continue;
        }
        let name = store.tensors()[t].name.clone();
        let analytic: Vec<f64> = grads.iter().nth(t).expect("grad slot").to_vec();
        for i in probe_indices(analytic.len(), &mut rng) {
            let orig = store.tensors()[t].data[i];
            store.tensors_mut()[t].data[i] = orig + FD_STEP;
            let up = objective(&eval(&mut layer, &store, x));
            store.tensors_mut()[t].data[i] = orig - FD_STEP;
            let down = objective(&eval(&mut layer, &store, x));
            store.tensors_mut()[t].data[i] = orig;
            record(&name, analytic[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}
