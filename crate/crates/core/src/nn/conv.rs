//! 2-D convolution and transposed convolution over `[N, C, T, F]` tensors,
//! both lowered to a single matrix product.

use ndarray::{s, Array2, Array4, ArrayD, Axis, Ix4, IxDyn};
use rand::Rng;

use crate::error::Result;
use crate::nn::layers::{shape_err, Layer, Pass};
use crate::nn::params::{glorot_uniform, Grads, ParamId, ParamRole, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvGeometry {
    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Output size of a valid (unpadded) convolution.
    pub fn conv_out(&self, t: usize, f: usize) -> Option<(usize, usize)> {
        let (kt, kf) = self.kernel;
        (t >= kt && f >= kf).then(|| ((t - kt) / self.stride.0 + 1, (f - kf) / self.stride.1 + 1))
    }

    pub fn transposed_out(&self, t: usize, f: usize) -> (usize, usize) {
        (
            (t - 1) * self.stride.0 + self.kernel.0,
            (f - 1) * self.stride.1 + self.kernel.1,
        )
    }
}

fn as4(x: &ArrayD<f64>, channels: usize, what: &str) -> Result<Array4<f64>> {
    if x.ndim() != 4 || x.shape()[1] != channels {
        return Err(shape_err(format!("{what}: [batch, {channels}, time, freq]"), x.shape()));
    }
    Ok(x.view().into_dimensionality::<Ix4>().expect("4-d").to_owned())
}

/// `[N, C, T, F]` → `[N·T·F, C]`.
fn channels_last(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, t, f) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * t * f, c))
        .expect("channels last")
}

/// `[N·T·F, C]` → `[N, C, T, F]`.
fn channels_first(m: Array2<f64>, n: usize, t: usize, f: usize) -> Array4<f64> {
    let c = m.ncols();
    m.into_shape_with_order((n, t, f, c))
        .expect("channels first")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

/// Valid convolution; weight laid out as `[kt·kf·C_in, C_out]` with the
/// input channel varying fastest.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeometry,
    cache: Option<(Array2<f64>, [usize; 4])>,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, geom: ConvGeometry, rng: &mut R) -> Self {
        let rows = geom.taps() * geom.in_channels;
        let w = glorot_uniform(
            rng,
            geom.in_channels * geom.taps(),
            geom.out_channels * geom.taps(),
            rows * geom.out_channels,
        );
        Self {
            w: store.add(
                format!("{name}.weight"),
                &[geom.kernel.0, geom.kernel.1, geom.in_channels, geom.out_channels],
                w,
                ParamRole::Trainable,
            ),
            b: store.add(
                format!("{name}.bias"),
                &[geom.out_channels],
                vec![0.0; geom.out_channels],
                ParamRole::Trainable,
            ),
            geom,
            cache: None,
        }
    }

    fn im2col(&self, x: &Array4<f64>, to: usize, fo: usize) -> Array2<f64> {
        let (n, c, _, _) = x.dim();
        let (kt, kf) = self.geom.kernel;
        let (st, sf) = self.geom.stride;
        let mut cols = Array2::<f64>::zeros((n * to * fo, kt * kf * c));
        for (row, mut out) in cols.outer_iter_mut().enumerate() {
            let (b, rest) = (row / (to * fo), row % (to * fo));
            let (t, f) = (rest / fo, rest % fo);
            let mut k = 0;
            for dt in 0..kt {
                for df in 0..kf {
                    for ch in 0..c {
                        out[k] = x[[b, ch, t * st + dt, f * sf + df]];
                        k += 1;
                    }
                }
            }
        }
        cols
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, _pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        let x4 = as4(x, self.geom.in_channels, "conv2d")?;
        let (n, _, t, f) = x4.dim();
        let (to, fo) = self
            .geom
            .conv_out(t, f)
            .ok_or_else(|| shape_err(format!("conv2d: at least {:?} in time/freq", self.geom.kernel), x.shape()))?;
        let cols = self.im2col(&x4, to, fo);
        let w = store.matrix(self.w, self.geom.taps() * self.geom.in_channels, self.geom.out_channels);
        let mut y = cols.dot(&w);
        y += &store.vector(self.b);
        self.cache = Some((cols, [n, self.geom.in_channels, t, f]));
        Ok(channels_first(y, n, to, fo).into_dyn())
    }

    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64> {
        let (cols, in_shape) = self.cache.take().expect("conv2d backward before forward");
        let dy4 = as4(dy, self.geom.out_channels, "conv2d gradient").expect("gradient shape");
        let (n, _, to, fo) = dy4.dim();
        let dy2 = channels_last(&dy4);
        let rows = self.geom.taps() * self.geom.in_channels;
        let dw = cols.t().dot(&dy2);
        for (g, v) in grads.get_mut(self.w).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.b).iter_mut().zip(dy2.sum_axis(Axis(0)).iter()) {
            *g += v;
        }
        let w = store.matrix(self.w, rows, self.geom.out_channels);
        let dcols = dy2.dot(&w.t());

        let [_, c, t, f] = in_shape;
        let (kt, kf) = self.geom.kernel;
        let (st, sf) = self.geom.stride;
        let mut dx = Array4::<f64>::zeros((n, c, t, f));
        for (row, g) in dcols.outer_iter().enumerate() {
            let (b, rest) = (row / (to * fo), row % (to * fo));
            let (ti, fi) = (rest / fo, rest % fo);
            let mut k = 0;
            for dt in 0..kt {
                for df in 0..kf {
                    for ch in 0..c {
                        dx[[b, ch, ti * st + dt, fi * sf + df]] += g[k];
                        k += 1;
                    }
                }
            }
        }
        dx.into_dyn()
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]'s input map); weight
/// laid out as `[C_in, kt·kf·C_out]` with the output channel varying fastest.
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeometry,
    cache: Option<(Array2<f64>, [usize; 4])>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, geom: ConvGeometry, rng: &mut R) -> Self {
        let cols = geom.taps() * geom.out_channels;
        let w = glorot_uniform(
            rng,
            geom.in_channels * geom.taps(),
            geom.out_channels * geom.taps(),
            geom.in_channels * cols,
        );
        Self {
            w: store.add(
                format!("{name}.weight"),
                &[geom.in_channels, geom.kernel.0, geom.kernel.1, geom.out_channels],
                w,
                ParamRole::Trainable,
            ),
            b: store.add(
                format!("{name}.bias"),
                &[geom.out_channels],
                vec![0.0; geom.out_channels],
                ParamRole::Trainable,
            ),
            geom,
            cache: None,
        }
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, _pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        let x4 = as4(x, self.geom.in_channels, "transposed conv2d")?;
        let (n, c, t, f) = x4.dim();
        let co = self.geom.out_channels;
        let (to, fo) = self.geom.transposed_out(t, f);
        let (kt, kf) = self.geom.kernel;
        let (st, sf) = self.geom.stride;
        let x2 = channels_last(&x4);
        let w = store.matrix(self.w, c, self.geom.taps() * co);
        let cols = x2.dot(&w);
        let bias = store.vector(self.b);
        let mut y = Array4::<f64>::zeros((n, co, to, fo));
        for (b, mut yb) in y.outer_iter_mut().enumerate() {
            for (ch, mut plane) in yb.outer_iter_mut().enumerate() {
                plane.fill(bias[ch]);
            }
            for ti in 0..t {
                for fi in 0..f {
                    let row = cols.row((b * t + ti) * f + fi);
                    let mut k = 0;
                    for dt in 0..kt {
                        for df in 0..kf {
                            for ch in 0..co {
                                yb[[ch, ti * st + dt, fi * sf + df]] += row[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        self.cache = Some((x2, [n, c, t, f]));
        Ok(y.into_dyn())
    }

    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64> {
        let (x2, [n, c, t, f]) = self.cache.take().expect("transposed conv backward before forward");
        let co = self.geom.out_channels;
        let dy4 = as4(dy, co, "transposed conv2d gradient").expect("gradient shape");
        let (kt, kf) = self.geom.kernel;
        let (st, sf) = self.geom.stride;
        let mut dcols = Array2::<f64>::zeros((n * t * f, self.geom.taps() * co));
        for (row, mut out) in dcols.outer_iter_mut().enumerate() {
            let (b, rest) = (row / (t * f), row % (t * f));
            let (ti, fi) = (rest / f, rest % f);
            let mut k = 0;
            for dt in 0..kt {
                for df in 0..kf {
                    for ch in 0..co {
                        out[k] = dy4[[b, ch, ti * st + dt, fi * sf + df]];
                        k += 1;
                    }
                }
            }
        }
        let dw = x2.t().dot(&dcols);
        for (g, v) in grads.get_mut(self.w).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        let db = dy4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        for (g, v) in grads.get_mut(self.b).iter_mut().zip(db.iter()) {
            *g += v;
        }
        let w = store.matrix(self.w, c, self.geom.taps() * co);
        channels_first(dcols.dot(&w.t()), n, t, f).into_dyn()
    }
}

/// Appends zeros on the high-frequency edge so the last axis has `width` bins.
pub fn pad_freq(x: &ArrayD<f64>, width: usize) -> ArrayD<f64> {
    let mut shape = x.shape().to_vec();
    let f = shape[3];
    debug_assert!(width >= f);
    shape[3] = width;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    out.slice_mut(s![.., .., .., ..f]).assign(x);
    out
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .map_err(|_| shape_err(format!("channel concat with {:?}", a.shape()), b.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(cin: usize, cout: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: (2, 3),
            stride: (1, 2),
        }
    }

    #[test]
    fn conv_output_sizes() {
        let g = geom(1, 16);
        assert_eq!(g.conv_out(6, 205), Some((5, 102)));
        assert_eq!(g.conv_out(5, 102), Some((4, 50)));
        assert_eq!(g.conv_out(1, 205), None);
        assert_eq!(g.transposed_out(2, 11), (3, 23));
        assert_eq!(g.transposed_out(5, 102), (6, 205));
    }

    /// Direct nested-loop convolution as an independent reference.
    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let g = geom(2, 3);
        let mut conv = Conv2d::new(&mut store, "c", g, &mut rng);
        for (i, v) in store.data_mut(conv.b).iter_mut().enumerate() {
            *v = 0.1 * i as f64;
        }
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 4, 9]), |d| (d[0] + 2 * d[1] + 3 * d[2]) as f64 * 0.1 - (d[3] as f64).sin());
        let y = conv.forward(&store, &x, &mut Pass::Infer).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 4]);
        let w = store.data(conv.w);
        for b in 0..2 {
            for co in 0..3 {
                for t in 0..3 {
                    for f in 0..4 {
                        let mut acc = store.data(conv.b)[co];
                        for dt in 0..2 {
                            for df in 0..3 {
                                for ci in 0..2 {
                                    acc += w[((dt * 3 + df) * 2 + ci) * 3 + co] * x[[b, ci, t + dt, 2 * f + df]];
                                }
                            }
                        }
                        assert!((acc - y[[b, co, t, f]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    /// <conv(x), y> == <x, convT(y)> when the two share a weight tensor.
    #[test]
    fn transposed_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = geom(3, 2);
        let mut s1 = ParamStore::new();
        let mut conv = Conv2d::new(&mut s1, "c", g, &mut rng);
        let gt = ConvGeometry {
            in_channels: 2,
            out_channels: 3,
            ..g
        };
        let mut s2 = ParamStore::new();
        let mut convt = ConvTranspose2d::new(&mut s2, "t", gt, &mut rng);
        // conv weight [kt, kf, cin=3, cout=2] → transposed [cin=2, kt, kf, cout=3]
        let wc = s1.data(conv.w).to_vec();
        for dt in 0..2 {
            for df in 0..3 {
                for a in 0..3 {
                    for b in 0..2 {
                        s2.data_mut(convt.w)[((b * 2 + dt) * 3 + df) * 3 + a] = wc[((dt * 3 + df) * 3 + a) * 2 + b];
                    }
                }
            }
        }
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4, 11]), |_| rng.random_range(-1.0..1.0));
        let y = ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 5]), |_| rng.random_range(-1.0..1.0));
        let cx = conv.forward(&s1, &x, &mut Pass::Infer).unwrap();
        let ty = convt.forward(&s2, &y, &mut Pass::Infer).unwrap();
        assert_eq!(ty.shape(), &[1, 3, 4, 11]);
        let lhs = (&cx * &y).sum();
        let rhs = (&x * &ty).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", geom(2, 3), &mut rng);
        let r = check_layer(Box::new(conv), store, &[2, 2, 4, 9], true, 6);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");

        let mut store = ParamStore::new();
        let g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 1),
            stride: (1, 1),
        };
        let conv = Conv2d::new(&mut store, "c5", g, &mut rng);
        let r = check_layer(Box::new(conv), store, &[3, 1, 3, 7], true, 7);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let convt = ConvTranspose2d::new(&mut store, "t", geom(3, 2), &mut rng);
        let r = check_layer(Box::new(convt), store, &[2, 3, 2, 5], true, 9);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn padding_and_concat() {
        let x = ArrayD::from_elem(IxDyn(&[1, 2, 3, 4]), 1.0);
        let p = pad_freq(&x, 6);
        assert_eq!(p.shape(), &[1, 2, 3, 6]);
        assert_eq!(p.sum(), 24.0);
        assert_eq!(p[[0, 1, 2, 5]], 0.0);
        let c = concat_channels(&p, &p).unwrap();
        assert_eq!(c.shape(), &[1, 4, 3, 6]);
        assert!(concat_channels(&x, &p).is_err());
    }
}
