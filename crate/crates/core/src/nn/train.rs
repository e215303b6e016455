//! Loss, ADAM and the early-stopping training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayD, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{shape_err, Layer, Pass};
use crate::nn::model::Network;
use crate::nn::params::{Grads, ParamRole, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    /// Floor inside the log of the loss.
    pub floor_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 5,
            min_delta: 1e-4,
            max_epochs: 100,
            floor_eps: 1e-12,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.min_delta >= 0.0
            && self.floor_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Training examples: normalized context windows with the masks and coded
/// magnitudes of their current frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, context, bins]`.
    pub inputs: Array3<f64>,
    /// Modified (or plain) target masks, `[N, bins]`.
    pub target_mask: Array2<f64>,
    /// Coded magnitudes, `[N, bins]`.
    pub coded_mag: Array2<f64>,
}

impl Dataset {
    pub fn new(inputs: Array3<f64>, target_mask: Array2<f64>, coded_mag: Array2<f64>) -> Result<Self> {
        let (n, _, bins) = inputs.dim();
        for m in [&target_mask, &coded_mag] {
            if m.dim() != (n, bins) {
                return Err(shape_err(format!("[{n}, {bins}]"), m.shape()));
            }
        }
        Ok(Self {
            inputs,
            target_mask,
            coded_mag,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates datasets with identical row shapes.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Empty("no datasets to concatenate".into()));
        }
        let cat2 = |f: fn(&Dataset) -> &Array2<f64>| {
            ndarray::concatenate(Axis(0), &parts.iter().map(|p| f(p).view()).collect::<Vec<_>>())
        };
        let inputs = ndarray::concatenate(Axis(0), &parts.iter().map(|p| p.inputs.view()).collect::<Vec<_>>())
            .map_err(|_| shape_err("matching context windows", parts[0].inputs.shape()))?;
        let target = cat2(|p| &p.target_mask).map_err(|_| shape_err("matching masks", parts[0].target_mask.shape()))?;
        let coded = cat2(|p| &p.coded_mag).map_err(|_| shape_err("matching magnitudes", parts[0].coded_mag.shape()))?;
        Self::new(inputs, target, coded)
    }

    fn select(&self, idx: &[usize]) -> (ArrayD<f64>, Array2<f64>, Array2<f64>) {
        (
            self.inputs.select(Axis(0), idx).into_dyn(),
            self.target_mask.select(Axis(0), idx),
            self.coded_mag.select(Axis(0), idx),
        )
    }
}

fn floored_ln(v: f64, eps: f64) -> f64 {
    v.max(eps).ln()
}

/// Mean over batch and bins of `(ln max(M̃·|X̃|, ε) − ln max(M̂·|X̃|, ε))²`.
pub fn loss_log_mse(predicted: &Array2<f64>, target_mask: &Array2<f64>, coded_mag: &Array2<f64>, floor_eps: f64) -> f64 {
    loss_sum(predicted, target_mask, coded_mag, floor_eps, None) / predicted.len().max(1) as f64
}

/// Loss and its gradient with respect to the predicted mask.
pub fn loss_and_grad(
    predicted: &Array2<f64>,
    target_mask: &Array2<f64>,
    coded_mag: &Array2<f64>,
    floor_eps: f64,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(predicted.raw_dim());
    let n = predicted.len().max(1) as f64;
    let total = loss_sum(predicted, target_mask, coded_mag, floor_eps, Some(&mut grad));
    grad /= n;
    (total / n, grad)
}

fn loss_sum(
    predicted: &Array2<f64>,
    target_mask: &Array2<f64>,
    coded_mag: &Array2<f64>,
    eps: f64,
    mut grad: Option<&mut Array2<f64>>,
) -> f64 {
    assert_eq!(predicted.dim(), target_mask.dim(), "mask shapes");
    assert_eq!(predicted.dim(), coded_mag.dim(), "magnitude shape");
    let mut total = 0.0;
    for ((idx, &p), (&t, &c)) in predicted.indexed_iter().zip(target_mask.iter().zip(coded_mag)) {
        let enhanced = p * c;
        let d = floored_ln(t * c, eps) - floored_ln(enhanced, eps);
        total += d * d;
        if let Some(g) = grad.as_deref_mut() {
            // d/dp of −ln(p·c) is −1/p above the floor, zero on it
            g[idx] = if enhanced > eps { -2.0 * d / p } else { 0.0 };
        }
    }
    total
}

/// One bias-corrected ADAM update of every trainable tensor. Nothing is
/// modified when any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, cfg: &TrainConfig) -> Result<()> {
    for (t, g) in store.tensors().iter().zip(grads.iter()) {
        if t.role == ParamRole::Trainable && g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in tensor {}", t.name)));
        }
    }
    if store.first_moment.len() != store.tensors().len() {
        store.first_moment = store.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        store.second_moment = store.first_moment.clone();
        store.adam_steps = 0;
    }
    store.adam_steps += 1;
    let step = store.adam_steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(step);
    let c2 = 1.0 - cfg.beta2.powi(step);
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.adam_eps);
    let mut first_moment = std::mem::take(&mut store.first_moment);
    let mut second_moment = std::mem::take(&mut store.second_moment);
    for (k, g) in grads.iter().enumerate() {
        let t = &mut store.tensors_mut()[k];
        if t.role != ParamRole::Trainable {
            continue;
        }
        let (m, v) = (&mut first_moment[k], &mut second_moment[k]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            t.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    store.first_moment = first_moment;
    store.second_moment = second_moment;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_s: f64,
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,elapsed_s\n");
    for e in log {
        out.push_str(&format!("{},{:.9},{:.9},{:.3}\n", e.epoch, e.train_loss, e.val_loss, e.elapsed_s));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    /// 0 means the initial parameters were never improved upon.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

const EVAL_BATCH: usize = 256;

/// Mean loss over a dataset in inference mode.
pub fn evaluate_loss(net: &mut Network, store: &ParamStore, data: &Dataset, floor_eps: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, target, coded) = data.select(chunk);
        let y = net.forward(store, &x, &mut Pass::Infer)?;
        let y = y.into_dimensionality::<Ix2>().expect("[N, bins]");
        total += loss_sum(&y, &target, &coded, floor_eps, None);
    }
    Ok(total / (data.len() * data.target_mask.ncols()) as f64)
}

/// Trains from `store` with seeded shuffling and dropout, early stopping on
/// validation loss. The initial validation loss counts as the first
/// evaluation.
pub fn train(
    net: &mut Network,
    store: ParamStore,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = store;

    let check = |loss: f64, what: &str| -> Result<f64> {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::Numeric(format!("{what} loss is not finite")))
        }
    };
    let train0 = check(evaluate_loss(net, &store, train_set, cfg.floor_eps)?, "training")?;
    let val0 = check(evaluate_loss(net, &store, val_set, cfg.floor_eps)?, "validation")?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: train0,
        val_loss: val0,
        elapsed_s: start.elapsed().as_secs_f64(),
    }];
    log::info!("epoch 0: train {train0:.6} val {val0:.6}");
    let mut best = (0usize, val0, store.clone());
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, target, coded) = train_set.select(batch);
            let y = net.forward(&store, &x, &mut Pass::Train(&mut rng))?;
            let y = y.into_dimensionality::<Ix2>().expect("[N, bins]");
            let (loss, dy) = loss_and_grad(&y, &target, &coded, cfg.floor_eps);
            check(loss, "training")?;
            weighted += loss * batch.len() as f64;
            let mut grads = Grads::zeros_like(&store);
            net.backward(&store, &dy.into_dyn(), &mut grads);
            adam_step(&mut store, &grads, cfg)?;
            net.update_moving_stats(&mut store);
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = check(evaluate_loss(net, &store, val_set, cfg.floor_eps)?, "validation")?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if val_loss < best.1 - cfg.min_delta {
            best = (epoch, val_loss, store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", best.0);
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, best_store) = best;
    Ok(TrainOutcome {
        store: best_store.without_optimizer_state(),
        log,
        best_epoch,
        best_val_loss,
    })
}

/// Predicted masks for a batch of context windows, in inference mode.
pub fn predict(net: &mut Network, store: &ParamStore, inputs: &Array3<f64>) -> Result<Array2<f64>> {
    let n = inputs.len_of(Axis(0));
    let mut out = Array2::zeros((n, net.spec.output_bins));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let x = inputs.slice(s![start..end, .., ..]).to_owned().into_dyn();
        let y = net.forward(store, &x, &mut Pass::Infer)?;
        out.slice_mut(s![start..end, ..]).assign(&y.into_dimensionality::<Ix2>().expect("[N, bins]"));
        start = end;
    }
    Ok(out)
}
