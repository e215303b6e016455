//! The three mask estimators and their shared wrapper.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::N_PROCESSED;
use crate::error::{Error, Result};
use crate::nn::conv::{concat_channels, pad_freq, Conv2d, ConvGeometry, ConvTranspose2d};
use crate::nn::layers::{shape_err, Activation, ActivationKind, BatchNorm, Dense, Dropout, Layer, Pass, Sequential};
use crate::nn::lstm::Lstm;
use crate::nn::params::{Grads, ParamStore};

pub const FCNN_DROPOUT: f64 = 0.2;
pub const LSTM_DROPOUT: f64 = 0.1;
pub const LSTM_RECURRENT_DROPOUT: f64 = 0.2;
const CED_KERNEL: (usize, usize) = (2, 3);
const CED_STRIDE: (usize, usize) = (1, 2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fcnn,
    Lstm,
    Ced,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Fcnn => "fcnn",
            ModelKind::Lstm => "lstm",
            ModelKind::Ced => "ced",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcnn" => Ok(ModelKind::Fcnn),
            "lstm" => Ok(ModelKind::Lstm),
            "ced" => Ok(ModelKind::Ced),
            other => Err(Error::InvalidConfig(format!(
                "unsupported model kind {other:?} (expected fcnn, lstm or ced)"
            ))),
        }
    }
}

/// Network topology. `widths` holds hidden sizes (fcnn), LSTM units, or
/// encoder channels (ced).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Past frames plus the current one.
    pub context_frames: usize,
    pub input_bins: usize,
    pub output_bins: usize,
    pub widths: Vec<usize>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        let (context_frames, widths) = match kind {
            ModelKind::Fcnn => (4, vec![1024, 1024]),
            ModelKind::Lstm => (10, vec![400, 205]),
            ModelKind::Ced => (6, vec![16, 32, 64, 128]),
        };
        Self {
            kind,
            context_frames,
            input_bins: N_PROCESSED,
            output_bins: N_PROCESSED,
            widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_bins == 0 || self.input_bins != self.output_bins {
            return bad(format!(
                "input and output bins must be equal and positive, got {} and {}",
                self.input_bins, self.output_bins
            ));
        }
        if self.context_frames == 0 || self.widths.iter().any(|&w| w == 0) {
            return bad("context and layer widths must be positive".into());
        }
        match self.kind {
            ModelKind::Fcnn if self.widths.is_empty() => bad("fcnn needs at least one hidden layer".into()),
            ModelKind::Lstm if self.widths.is_empty() => bad("lstm needs at least one recurrent layer".into()),
            ModelKind::Ced => {
                let depth = self.widths.len();
                if depth == 0 {
                    return bad("ced needs at least one encoder stage".into());
                }
                let mut f = self.input_bins;
                for _ in 0..depth {
                    if f < CED_KERNEL.1 {
                        return bad(format!("{} bins too narrow for {depth} encoder stages", self.input_bins));
                    }
                    f = (f - CED_KERNEL.1) / CED_STRIDE.1 + 1;
                }
                if self.context_frames < depth + 1 {
                    return bad(format!("ced with {depth} stages needs at least {} context frames", depth + 1));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A built network; maps `[N, context, bins]` to masks `[N, bins]`.
pub struct Network {
    pub spec: ModelSpec,
    body: Body,
}

enum Body {
    Stack(Sequential),
    Ced(Box<Ced>),
}

/// Builds the network and its freshly initialized parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<(Network, ParamStore)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bins = spec.input_bins;
    let body = match spec.kind {
        ModelKind::Fcnn => {
            let mut layers: Vec<Box<dyn Layer>> = Vec::new();
            let mut width = spec.context_frames * bins;
            for (i, &h) in spec.widths.iter().enumerate() {
                let n = i + 1;
                layers.push(Box::new(Dense::new(&mut store, &format!("dense{n}"), width, h, &mut rng)));
                layers.push(Box::new(Activation::new(ActivationKind::Relu)));
                layers.push(Box::new(BatchNorm::new(&mut store, &format!("bn{n}"), h)));
                layers.push(Box::new(Dropout::new(FCNN_DROPOUT)));
                width = h;
            }
            layers.push(Box::new(Dense::new(&mut store, "out", width, spec.output_bins, &mut rng)));
            layers.push(Box::new(Activation::new(ActivationKind::Sigmoid2)));
            Body::Stack(Sequential { layers })
        }
        ModelKind::Lstm => {
            let mut layers: Vec<Box<dyn Layer>> = Vec::new();
            let mut width = bins;
            let last = spec.widths.len() - 1;
            for (i, &h) in spec.widths.iter().enumerate() {
                let lstm = Lstm::new(&mut store, &format!("lstm{}", i + 1), width, h, &mut rng)
                    .with_dropout(LSTM_DROPOUT, LSTM_RECURRENT_DROPOUT)
                    .returning_sequences(i < last);
                layers.push(Box::new(lstm));
                width = h;
            }
            layers.push(Box::new(Dense::new(&mut store, "out", width, spec.output_bins, &mut rng)));
            layers.push(Box::new(Activation::new(ActivationKind::Sigmoid2)));
            Body::Stack(Sequential { layers })
        }
        ModelKind::Ced => Body::Ced(Box::new(Ced::new(spec, &mut store, &mut rng))),
    };
    Ok((
        Network {
            spec: spec.clone(),
            body,
        },
        store,
    ))
}

impl Network {
    /// Intermediate CED activations from the last forward, as
    /// `(layer, [channels, time, freq])`; empty for the other kinds.
    pub fn shape_trace(&self) -> Vec<(String, Vec<usize>)> {
        match &self.body {
            Body::Ced(c) => c.trace.clone(),
            Body::Stack(_) => Vec::new(),
        }
    }
}

impl Layer for Network {
    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        let (ctx, bins) = (self.spec.context_frames, self.spec.input_bins);
        if x.ndim() != 3 || x.shape()[1] != ctx || x.shape()[2] != bins {
            return Err(shape_err(format!("[batch, {ctx}, {bins}]"), x.shape()));
        }
        let n = x.shape()[0];
        let x = x.as_standard_layout();
        match (&mut self.body, self.spec.kind) {
            (Body::Stack(s), ModelKind::Fcnn) => {
                // frame-major: oldest frame's bins first
                let flat = x.to_owned().into_shape_with_order(IxDyn(&[n, ctx * bins])).expect("flatten");
                s.forward(store, &flat, pass)
            }
            (Body::Stack(s), _) => s.forward(store, &x.to_owned(), pass),
            (Body::Ced(c), _) => {
                let img = x.to_owned().into_shape_with_order(IxDyn(&[n, 1, ctx, bins])).expect("image");
                c.forward(store, &img, pass)
            }
        }
    }

    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64> {
        let (ctx, bins) = (self.spec.context_frames, self.spec.input_bins);
        let n = dy.shape()[0];
        let dx = match &mut self.body {
            Body::Stack(s) => s.backward(store, dy, grads),
            Body::Ced(c) => c.backward(store, dy, grads),
        };
        dx.as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[n, ctx, bins]))
            .expect("input gradient shape")
    }

    fn update_moving_stats(&self, store: &mut ParamStore) {
        match &self.body {
            Body::Stack(s) => s.update_moving_stats(store),
            Body::Ced(c) => c.update_moving_stats(store),
        }
    }
}

fn block(layers: Vec<Box<dyn Layer>>) -> Sequential {
    Sequential { layers }
}

/// Convolutional encoder-decoder. Each decoder output is zero-padded on the
/// high-frequency edge to its mirrored encoder output and concatenated as
/// `[decoder, encoder]` before the next stage; a final `context × 1`
/// convolution collapses time.
struct Ced {
    encoder: Vec<Sequential>,
    decoder: Vec<Sequential>,
    head: Sequential,
    /// Per decoder stage: (unpadded width, channels of the decoder part).
    skip_geometry: Vec<(usize, usize)>,
    trace: Vec<(String, Vec<usize>)>,
}

impl Ced {
    fn new(spec: &ModelSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let geom = |cin, cout| ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: CED_KERNEL,
            stride: CED_STRIDE,
        };
        let chans = &spec.widths;
        let depth = chans.len();
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = 1;
        for (i, &c) in chans.iter().enumerate() {
            let n = i + 1;
            encoder.push(block(vec![
                Box::new(Conv2d::new(store, &format!("conv{n}"), geom(cin, c), rng)),
                Box::new(BatchNorm::new(store, &format!("conv{n}_bn"), c)),
                Box::new(Activation::new(ActivationKind::Elu)),
            ]));
            cin = c;
        }
        // decoder stage k outputs the channel count of encoder stage depth-1-k
        // (1 for the last), and takes twice that of its predecessor's output
        // because of the skip concatenation
        let mut decoder = Vec::with_capacity(depth);
        let mut cin = chans[depth - 1];
        for k in 0..depth {
            let cout = if k + 1 < depth { chans[depth - 2 - k] } else { 1 };
            let n = k + 1;
            decoder.push(block(vec![
                Box::new(ConvTranspose2d::new(store, &format!("deconv{n}"), geom(cin, cout), rng)),
                Box::new(BatchNorm::new(store, &format!("deconv{n}_bn"), cout)),
                Box::new(Activation::new(ActivationKind::Elu)),
            ]));
            cin = 2 * cout;
        }
        let head_geom = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            kernel: (spec.context_frames, 1),
            stride: (1, 1),
        };
        let head = block(vec![
            Box::new(Conv2d::new(store, &format!("conv{}", depth + 1), head_geom, rng)),
            Box::new(Activation::new(ActivationKind::Sigmoid2)),
        ]);
        Self {
            encoder,
            decoder,
            head,
            skip_geometry: Vec::new(),
            trace: Vec::new(),
        }
    }

    fn forward(&mut self, store: &ParamStore, x: &ArrayD<f64>, pass: &mut Pass<'_>) -> Result<ArrayD<f64>> {
        let depth = self.encoder.len();
        self.trace.clear();
        self.skip_geometry.clear();
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            h = stage.forward(store, &h, pass)?;
            self.trace.push((format!("conv{}", i + 1), h.shape()[1..].to_vec()));
            skips.push(h.clone());
        }
        for k in 0..depth {
            h = self.decoder[k].forward(store, &h, pass)?;
            self.trace.push((format!("deconv{}", k + 1), h.shape()[1..].to_vec()));
            if k + 1 < depth {
                let skip = &skips[depth - 2 - k];
                let (width, target) = (h.shape()[3], skip.shape()[3]);
                if width > target || h.shape()[2] != skip.shape()[2] {
                    return Err(shape_err(format!("decoder stage fitting {:?}", skip.shape()), h.shape()));
                }
                self.skip_geometry.push((width, h.shape()[1]));
                h = concat_channels(&pad_freq(&h, target), skip)?;
            }
        }
        let y = self.head.forward(store, &h, pass)?;
        self.trace.push((format!("conv{}", depth + 1), y.shape()[1..].to_vec()));
        let n = y.shape()[0];
        let bins = y.shape()[3];
        if y.shape()[1] != 1 || y.shape()[2] != 1 {
            return Err(shape_err(format!("[batch, 1, 1, {bins}]"), y.shape()));
        }
        Ok(y.into_shape_with_order(IxDyn(&[n, bins])).expect("flatten"))
    }

    fn backward(&mut self, store: &ParamStore, dy: &ArrayD<f64>, grads: &mut Grads) -> ArrayD<f64> {
        let depth = self.encoder.len();
        let (n, bins) = (dy.shape()[0], dy.shape()[1]);
        let dy4 = dy.to_owned().into_shape_with_order(IxDyn(&[n, 1, 1, bins])).expect("unflatten");
        let mut g = self.head.backward(store, &dy4, grads);
        // gradients reaching each encoder output through its skip
        let mut skip_grads: Vec<Option<ArrayD<f64>>> = vec![None; depth];
        for k in (0..depth).rev() {
            if k + 1 < depth {
                let (width, ch) = self.skip_geometry[k];
                let from_skip = g.slice(s![.., ch.., .., ..]).to_owned().into_dyn();
                skip_grads[depth - 2 - k] = Some(from_skip);
                g = g.slice(s![.., ..ch, .., ..width]).to_owned().into_dyn();
            }
            g = self.decoder[k].backward(store, &g, grads);
        }
        for i in (0..depth).rev() {
            if let Some(sg) = skip_grads[i].take() {
                g += &sg;
            }
            g = self.encoder[i].backward(store, &g, grads);
        }
        g
    }

    fn update_moving_stats(&self, store: &mut ParamStore) {
        for stage in self.encoder.iter().chain(&self.decoder).chain(std::iter::once(&self.head)) {
            stage.update_moving_stats(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;

    fn small(kind: ModelKind) -> ModelSpec {
        let (ctx, widths) = match kind {
            ModelKind::Fcnn => (3, vec![6, 5]),
            ModelKind::Lstm => (4, vec![5, 4]),
            ModelKind::Ced => (4, vec![2, 3, 4]),
        };
        ModelSpec {
            kind,
            context_frames: ctx,
            input_bins: 19,
            output_bins: 19,
            widths,
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("CED".parse::<ModelKind>().unwrap(), ModelKind::Ced);
        assert!(matches!("rnn".parse::<ModelKind>(), Err(Error::InvalidConfig(_))));
        assert_eq!(ModelKind::Lstm.to_string(), "lstm");
    }

    #[test]
    fn spec_validation() {
        for kind in [ModelKind::Fcnn, ModelKind::Lstm, ModelKind::Ced] {
            ModelSpec::new(kind).validate().unwrap();
        }
        let mut s = ModelSpec::new(ModelKind::Ced);
        s.context_frames = 4;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(ModelKind::Fcnn);
        s.output_bins = 100;
        assert!(s.validate().is_err());
    }

    #[test]
    fn small_models_have_correct_gradients() {
        for kind in [ModelKind::Fcnn, ModelKind::Lstm, ModelKind::Ced] {
            let spec = small(kind);
            for train in [true, false] {
                let (net, store) = build_model(&spec, 3).unwrap();
                let shape = [3, spec.context_frames, spec.input_bins];
                let r = check_layer(Box::new(net), store, &shape, train, 5);
                assert!(r.max_rel_error <= 1e-4, "{kind} train={train}: {r:?}");
            }
        }
    }

    #[test]
    fn small_ced_shape_chain() {
        let spec = small(ModelKind::Ced);
        let (mut net, store) = build_model(&spec, 1).unwrap();
        let x = ArrayD::zeros(IxDyn(&[2, 4, 19]));
        let y = net.forward(&store, &x, &mut Pass::Infer).unwrap();
        assert_eq!(y.shape(), &[2, 19]);
        let shapes: Vec<Vec<usize>> = net.shape_trace().into_iter().map(|(_, s)| s).collect();
        assert_eq!(shapes[0], vec![2, 3, 9]);
        assert_eq!(shapes[2], vec![4, 1, 1]);
        assert_eq!(shapes[3], vec![3, 2, 3]);
        assert_eq!(shapes[5], vec![1, 4, 19]);
    }

    #[test]
    fn outputs_in_open_interval_and_repeatable() {
        for kind in [ModelKind::Fcnn, ModelKind::Lstm, ModelKind::Ced] {
            let spec = small(kind);
            let (mut net, mut store) = build_model(&spec, 9).unwrap();
            // push pre-activations to extremes
            for t in store.tensors_mut() {
                for v in t.data.iter_mut() {
                    *v *= 50.0;
                }
            }
            let x = ArrayD::from_shape_fn(IxDyn(&[4, spec.context_frames, 19]), |d| (d[0] * 7 + d[2]) as f64 - 10.0);
            let a = net.forward(&store, &x, &mut Pass::Infer).unwrap();
            let b = net.forward(&store, &x, &mut Pass::Infer).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|&v| v > 0.0 && v < 2.0), "{kind}");
        }
    }
}
