//! LSTM layer over `[N, T, D]` with gate order input, forget, cell, output.
//!
//! Input and recurrent dropout masks are drawn once per sequence and shared
//! across time steps and gates.

use ndarray::{s, Array2, Array3, ArrayD, Axis, Ix3};
use rand::Rng;

use crate::error::Result;
use crate::nn::layers::{dropout_mask, shape_err, Layer, Pass};
use crate::nn::params::{glorot_uniform, Grads, ParamId, ParamRole, ParamStore};

pub struct Lstm {
    pub kernel: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub units: usize,
    pub dropout: f64,
    pub recurrent_dropout: f64,
    /// Emit every step (`[N, T, H]`) or only the last one (`[N, H]`).
    pub return_sequences: bool,
    cache: Option<LstmCache>,
}

struct Step {
    x_in: Array2<f64>,
    h_in: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

struct LstmCache {
    steps: Vec<Step>,
    x_mask: Option<Array2<f64>>,
    h_mask: Option<Array2<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, units: usize, rng: &mut R) -> Self {
        let h4 = 4 * units;
        let kernel = glorot_uniform(rng, inputs, h4, inputs * h4);
        let recurrent = glorot_uniform(rng, units, h4, units * h4);
        let mut bias = vec![0.0; h4];
        bias[units..2 * units].fill(1.0);
        Self {
            kernel: store.add(format!("{name}.kernel"), &[inputs, h4], kernel, ParamRole::Trainable),
            recurrent: store.add(format!("{name}.recurrent"), &[units, h4], recurrent, ParamRole::Trainable),
            bias: store.add(format!("{name}.bias"), &[h4], bias, ParamRole::Trainable),
            inputs,
            units,
            dropout: 0.0,
            recurrent_dropout: 0.0,
            return_sequences: false,
            cache: None,
        }
    }

    pub fn with_dropout(mut self, dropout: f64, recurrent_dropout: f64) -> Self {
        self.dropout = dropout;
        self.recurrent_dropout = recurrent_dropout;
        self
    }

    pub fn returning_sequences(mut self, yes: bool) -> Self {
        self.return_sequences = yes;
        self
    }
}

fn mask2(pass: &mut Pass<'_>, n: usize, d: usize, rate: f64) -> Option<Array2<f64>> {
    match pass {
        Pass::Train(rng) if rate > 0.0 => Some(
            dropout_mask(rng, &[n, d], rate)
                .into_dimensionality()
                .expect("2-d mask"),
        ),
        _ => None,
    }
}

impl Layer for Lstm {
    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        if x.ndim() != 3 || x.shape()[2] != self.inputs || x.shape()[1] == 0 {
            return Err(shape_err(format!("lstm: [batch, time, {}]", self.inputs), x.shape()));
        }
        let x3 = x.view().into_dimensionality::<Ix3>().expect("3-d");
        let (n, t_len, _) = x3.dim();
        let h = self.units;
        let w = store.matrix(self.kernel, self.inputs, 4 * h);
        let u = store.matrix(self.recurrent, h, 4 * h);
        let b = store.vector(self.bias);
        let x_mask = mask2(pass, n, self.inputs, self.dropout);
        let h_mask = mask2(pass, n, h, self.recurrent_dropout);

        let mut h_prev = Array2::<f64>::zeros((n, h));
        let mut c_prev = Array2::<f64>::zeros((n, h));
        let mut outputs = Array3::<f64>::zeros((n, t_len, h));
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut x_in = x3.slice(s![.., t, ..]).to_owned();
            if let Some(m) = &x_mask {
                x_in *= m;
            }
            let mut h_in = h_prev.clone();
            if let Some(m) = &h_mask {
                h_in *= m;
            }
            let z = x_in.dot(&w) + h_in.dot(&u) + &b;
            let i = z.slice(s![.., 0..h]).mapv(sigmoid);
            let f = z.slice(s![.., h..2 * h]).mapv(sigmoid);
            let g = z.slice(s![.., 2 * h..3 * h]).mapv(f64::tanh);
            let o = z.slice(s![.., 3 * h..]).mapv(sigmoid);
            let c = &f * &c_prev + &i * &g;
            let tanh_c = c.mapv(f64::tanh);
            let h_t = &o * &tanh_c;
            outputs.slice_mut(s![.., t, ..]).assign(&h_t);
            steps.push(Step {
                x_in,
                h_in,
                c_prev: std::mem::replace(&mut c_prev, c),
                i,
                f,
                g,
                o,
                tanh_c,
            });
            h_prev = h_t;
        }
        self.cache = Some(LstmCache { steps, x_mask, h_mask });
        Ok(if self.return_sequences {
            outputs.into_dyn()
        } else {
            h_prev.into_dyn()
        })
    }

    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64> {
        let cache = self.cache.take().expect("lstm backward before forward");
        let t_len = cache.steps.len();
        let n = cache.steps[0].x_in.nrows();
        let h = self.units;
        let w = store.matrix(self.kernel, self.inputs, 4 * h);
        let u = store.matrix(self.recurrent, h, 4 * h);

        let dy_at = |t: usize| -> Option<Array2<f64>> {
            if self.return_sequences {
                Some(dy.slice(s![.., t, ..]).to_owned())
            } else if t + 1 == t_len {
                Some(dy.view().into_dimensionality().expect("[N, H]").to_owned())
            } else {
                None
            }
        };

        let mut dw = Array2::<f64>::zeros((self.inputs, 4 * h));
        let mut du = Array2::<f64>::zeros((h, 4 * h));
        let mut dx = Array3::<f64>::zeros((n, t_len, self.inputs));
        let mut dh_next = Array2::<f64>::zeros((n, h));
        let mut dc_next = Array2::<f64>::zeros((n, h));
        let mut dz = Array2::<f64>::zeros((n, 4 * h));
        for t in (0..t_len).rev() {
            let st = &cache.steps[t];
            let mut dh = dh_next.clone();
            if let Some(d) = dy_at(t) {
                dh += &d;
            }
            let dc = &dh * &st.o * &st.tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
            let d_o = &dh * &st.tanh_c * &st.o.mapv(|v| v * (1.0 - v));
            let d_i = &dc * &st.g * &st.i.mapv(|v| v * (1.0 - v));
            let d_f = &dc * &st.c_prev * &st.f.mapv(|v| v * (1.0 - v));
            let d_g = &dc * &st.i * &st.g.mapv(|v| 1.0 - v * v);
            dz.slice_mut(s![.., 0..h]).assign(&d_i);
            dz.slice_mut(s![.., h..2 * h]).assign(&d_f);
            dz.slice_mut(s![.., 2 * h..3 * h]).assign(&d_g);
            dz.slice_mut(s![.., 3 * h..]).assign(&d_o);
            dc_next = dc * &st.f;

            dw += &st.x_in.t().dot(&dz);
            du += &st.h_in.t().dot(&dz);
            for (g, v) in grads.get_mut(self.bias).iter_mut().zip(dz.sum_axis(Axis(0)).iter()) {
                *g += v;
            }
            let mut dxt = dz.dot(&w.t());
            if let Some(m) = &cache.x_mask {
                dxt *= m;
            }
            dx.slice_mut(s![.., t, ..]).assign(&dxt);
            dh_next = dz.dot(&u.t());
            if let Some(m) = &cache.h_mask {
                dh_next *= m;
            }
        }
        for (g, v) in grads.get_mut(self.kernel).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.recurrent).iter_mut().zip(du.iter()) {
            *g += v;
        }
        dx.into_dyn()
    }
}
