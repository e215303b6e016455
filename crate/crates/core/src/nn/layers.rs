//! Layers with hand-written backward passes.
//!
//! Each layer keeps whatever it needs from its last `forward` call and
//! consumes it in `backward`. Parameters live in a shared [`ParamStore`];
//! gradients accumulate into a [`Grads`] of the same layout.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::{glorot_uniform, Grads, ParamId, ParamRole, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const ELU_ALPHA: f64 = 1.0;

/// Training passes draw dropout masks from the generator; inference is deterministic.
pub enum Pass<'a> {
    Train(&'a mut ChaCha8Rng),
    Infer,
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

pub trait Layer: Send {
    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, pass: &mut Pass<'_>) -> Result<ArrayD<f64>>;

    /// Gradient with respect to the input of the last `forward`; parameter
    /// gradients are added into `grads`.
    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64>;

    /// Folds the statistics of the last training batch into moving averages.
    fn update_moving_stats(&self, _store: &mut ParamStore) {}
}

pub(crate) fn shape_err(expected: impl Into<String>, actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: expected.into(),
        actual: format!("{actual:?}"),
    }
}

fn as2(x: &ArrayD<f64>, cols: usize, what: &str) -> Result<Array2<f64>> {
    if x.ndim() != 2 || x.shape()[1] != cols {
        return Err(shape_err(format!("{what}: [batch, {cols}]"), x.shape()));
    }
    Ok(x.view().into_dimensionality::<Ix2>().expect("2-d").to_owned())
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    cache: Option<Array2<f64>>,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            &[inputs, outputs],
            glorot_uniform(rng, inputs, outputs, inputs * outputs),
            ParamRole::Trainable,
        );
        let b = store.add(format!("{name}.bias"), &[outputs], vec![0.0; outputs], ParamRole::Trainable);
        Self {
            w,
            b,
            inputs,
            outputs,
            cache: None,
        }
    }
}

impl Layer for Dense {
    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, _pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        let x = as2(x, self.inputs, "dense input")?;
        let w = store.matrix(self.w, self.inputs, self.outputs);
        let y = x.dot(&w) + &store.vector(self.b);
        self.cache = Some(x);
        Ok(y.into_dyn())
    }

    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64> {
        let x = self.cache.take().expect("dense backward before forward");
        let dy = dy.view().into_dimensionality::<Ix2>().expect("2-d gradient");
        let dw = x.t().dot(&dy);
        for (g, v) in grads.get_mut(self.w).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.b).iter_mut().zip(dy.sum_axis(Axis(0))) {
            *g += v;
        }
        let w = store.matrix(self.w, self.inputs, self.outputs);
        dy.dot(&w.t()).into_dyn()
    }
}

/// Batch normalization over axis 1 (features of `[N, C]` or channels of
/// `[N, C, T, F]`).
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub moving_mean: ParamId,
    pub moving_var: ParamId,
    pub channels: usize,
    cache: Option<BnCache>,
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

struct BnCache {
    shape: Vec<usize>,
    xhat: Array3<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let c = channels;
        Self {
            gamma: store.add(format!("{name}.gamma"), &[c], vec![1.0; c], ParamRole::Trainable),
            beta: store.add(format!("{name}.beta"), &[c], vec![0.0; c], ParamRole::Trainable),
            moving_mean: store.add(format!("{name}.moving_mean"), &[c], vec![0.0; c], ParamRole::MovingStat),
            moving_var: store.add(format!("{name}.moving_var"), &[c], vec![1.0; c], ParamRole::MovingStat),
            channels,
            cache: None,
            batch_stats: None,
        }
    }

    /// `[N, C, S]` view where `S` folds any trailing axes.
    fn fold(x: &ArrayD<f64>, channels: usize) -> Result<Array3<f64>> {
        if x.ndim() < 2 || x.shape()[1] != channels {
            return Err(shape_err(format!("batch norm: [batch, {channels}, ...]"), x.shape()));
        }
        let n = x.shape()[0];
        let s: usize = x.shape()[2..].iter().product();
        Ok(x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, channels, s))
            .expect("fold"))
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        let x3 = Self::fold(x, self.channels)?;
        let (n, c, s) = x3.dim();
        let train = pass.is_train();
        let (mean, var) = if train {
            let count = (n * s) as f64;
            let mean = x3.sum_axis(Axis(2)).sum_axis(Axis(0)) / count;
            let mut var = Array1::<f64>::zeros(c);
            for ((_, ch, _), v) in x3.indexed_iter() {
                let d = v - mean[ch];
                var[ch] += d * d;
            }
            var /= count;
            self.batch_stats = Some((mean.clone(), var.clone()));
            (mean, var)
        } else {
            self.batch_stats = None;
            (
                store.vector(self.moving_mean).to_owned(),
                store.vector(self.moving_var).to_owned(),
            )
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let gamma = store.vector(self.gamma);
        let beta = store.vector(self.beta);
        let mut xhat = x3;
        let mut y = Array3::<f64>::zeros((n, c, s));
        for ((i, ch, j), v) in xhat.indexed_iter_mut() {
            *v = (*v - mean[ch]) * inv_std[ch];
            y[[i, ch, j]] = gamma[ch] * *v + beta[ch];
        }
        self.cache = Some(BnCache {
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            train,
        });
        Ok(y.into_shape_with_order(IxDyn(x.shape())).expect("unfold"))
    }

    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64> {
        let cache = self.cache.take().expect("batch norm backward before forward");
        let dy3 = Self::fold(dy, self.channels).expect("gradient shape");
        let (n, c, s) = dy3.dim();
        let count = (n * s) as f64;
        let gamma = store.vector(self.gamma);
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ((i, ch, j), g) in dy3.indexed_iter() {
            dgamma[ch] += g * cache.xhat[[i, ch, j]];
            dbeta[ch] += g;
        }
        for (g, v) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *g += v;
        }
        let mut dx = Array3::<f64>::zeros((n, c, s));
        for ((i, ch, j), d) in dx.indexed_iter_mut() {
            let g = dy3[[i, ch, j]];
            *d = if cache.train {
                gamma[ch] * cache.inv_std[ch] / count
                    * (count * g - dbeta[ch] - cache.xhat[[i, ch, j]] * dgamma[ch])
            } else {
                gamma[ch] * cache.inv_std[ch] * g
            };
        }
        dx.into_shape_with_order(IxDyn(&cache.shape)).expect("unfold")
    }

    fn update_moving_stats(&self, store: &mut ParamStore) {
        if let Some((mean, var)) = &self.batch_stats {
            for (m, b) in store.data_mut(self.moving_mean).iter_mut().zip(mean) {
                *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
            }
            for (m, b) in store.data_mut(self.moving_var).iter_mut().zip(var) {
                *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Elu,
    /// `2 * sigmoid(z)`, kept strictly inside (0, 2).
    Sigmoid2,
}

pub struct Activation {
    pub kind: ActivationKind,
    cache: Option<(ArrayD<f64>, ArrayD<f64>)>,
}

/// Largest value below 2; `2 * sigmoid(z)` rounds to 2.0 for large `z`.
const SIGMOID2_MAX: f64 = 2.0 - 2.0 * f64::EPSILON;

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn apply(kind: ActivationKind, z: f64) -> f64 {
        match kind {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::Elu => {
                if z > 0.0 {
                    z
                } else {
                    ELU_ALPHA * z.exp_m1()
                }
            }
            ActivationKind::Sigmoid2 => {
                let s = 2.0 / (1.0 + (-z).exp());
                s.clamp(f64::MIN_POSITIVE, SIGMOID2_MAX)
            }
        }
    }

    fn derivative(kind: ActivationKind, z: f64, y: f64) -> f64 {
        match kind {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    y + ELU_ALPHA
                }
            }
            ActivationKind::Sigmoid2 => {
                let s = 1.0 / (1.0 + (-z).exp());
                2.0 * s * (1.0 - s)
            }
        }
    }
}

impl Layer for Activation {
    fn forward(&mut self, _store: &ParamStore, x: &ArrayD<f64>, _pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        let kind = self.kind;
        let y = x.mapv(|z| Self::apply(kind, z));
        self.cache = Some((x.clone(), y.clone()));
        Ok(y)
    }

    fn backward(&mut self, _store: &ParamStore, dy: &ArrayD<f64>, _grads: &mut Grads) -> ArrayD<f64> {
        let (z, y) = self.cache.take().expect("activation backward before forward");
        let kind = self.kind;
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx)
            .and(&z)
            .and(&y)
            .for_each(|d, &z, &y| *d *= Self::derivative(kind, z, y));
        dx
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` during training.
pub struct Dropout {
    pub rate: f64,
    mask: Option<ArrayD<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: None }
    }
}

/// Draws an inverted-dropout mask of the given shape.
pub fn dropout_mask(rng: &mut ChaCha8Rng, shape: &[usize], rate: f64) -> ArrayD<f64> {
    let keep = 1.0 - rate;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

impl Layer for Dropout {
    fn forward(&mut self, _store: &ParamStore, x: &ArrayD<f64>, pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        match pass {
            Pass::Train(rng) if self.rate > 0.0 => {
                let mask = dropout_mask(rng, x.shape(), self.rate);
                let y = x * &mask;
                self.mask = Some(mask);
                Ok(y)
            }
            _ => {
                self.mask = None;
                Ok(x.clone())
            }
        }
    }

    fn backward(&mut self, _store: &ParamStore, dy: &ArrayD<f64>, _grads: &mut Grads) -> ArrayD<f64> {
        match self.mask.take() {
            Some(mask) => dy * &mask,
            None => dy.clone(),
        }
    }
}

/// Applies layers in order.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Layer for Sequential {
    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        let mut h = x.clone();
        for layer in self.layers.iter_mut() {
            h = layer.forward(store, &h, pass)?;
        }
        Ok(h)
    }

    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64> {
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(store, &g, grads);
        }
        g
    }

    fn update_moving_stats(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            layer.update_moving_stats(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;

    #[test]
    fn dense_param_count_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let dense = Dense::new(&mut store, "d", 2, 3, &mut rng);
        assert_eq!(store.param_count(), 9);
        let report = check_layer(Box::new(dense), store, &[4, 2], true, 7);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn batch_norm_gradients_in_both_modes() {
        for train in [true, false] {
            let mut store = ParamStore::new();
            let bn = BatchNorm::new(&mut store, "bn", 3);
            // non-trivial affine parameters and moving statistics
            for (i, v) in store.data_mut(bn.gamma).iter_mut().enumerate() {
                *v = 0.5 + i as f64 * 0.3;
            }
            for (i, v) in store.data_mut(bn.beta).iter_mut().enumerate() {
                *v = -0.2 + i as f64 * 0.1;
            }
            for (i, v) in store.data_mut(bn.moving_var).iter_mut().enumerate() {
                *v = 0.5 + i as f64;
            }
            let r = check_layer(Box::new(bn), store, &[5, 3], train, 3);
            assert!(r.max_rel_error <= 1e-4, "{r:?}");

            let mut store = ParamStore::new();
            let bn = BatchNorm::new(&mut store, "bn", 3);
            let r = check_layer(Box::new(bn), store, &[2, 3, 2, 4], train, 4);
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn activations_gradients() {
        for kind in [ActivationKind::Relu, ActivationKind::Elu, ActivationKind::Sigmoid2] {
            let r = check_layer(Box::new(Activation::new(kind)), ParamStore::new(), &[3, 7], true, 11);
            assert!(r.max_rel_error <= 1e-4, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn dropout_gradient_with_fixed_mask() {
        let r = check_layer(Box::new(Dropout::new(0.3)), ParamStore::new(), &[4, 6], true, 2);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn sigmoid2_range_and_slope() {
        for z in [-1e4, -50.0, -1.0, 0.0, 1.0, 50.0, 1e4] {
            let y = Activation::apply(ActivationKind::Sigmoid2, z);
            assert!(y > 0.0 && y < 2.0, "{z} -> {y}");
        }
        assert_eq!(Activation::apply(ActivationKind::Sigmoid2, 0.0), 1.0);
        assert_eq!(Activation::derivative(ActivationKind::Sigmoid2, 0.0, 1.0), 0.5);
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut d = Dropout::new(0.5);
        let x = ArrayD::from_elem(IxDyn(&[2, 3]), 1.5);
        let y = d.forward(&ParamStore::new(), &x, &mut Pass::Infer).unwrap();
        assert_eq!(x, y);
    }
}
