//! Small-tensor neural stack: layers with explicit backward passes, the
//! three mask estimators, ADAM with early stopping, and model files.

pub mod conv;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod params;
pub mod train;

use ndarray::{Array2, Array3};

pub use io::SavedModel;
pub use layers::{Layer, Pass};
pub use model::{build_model, ModelKind, ModelSpec, Network};
pub use params::{Grads, ParamRole, ParamStore};
pub use train::{
    adam_step, evaluate_loss, loss_and_grad, loss_log_mse, predict, train, write_training_log, Dataset, EpochLog,
    TrainConfig, TrainOutcome,
};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::mask::{MaskKind, MaskMatrix};

/// Every stored element, batch-norm moving statistics included.
pub fn param_count(store: &ParamStore) -> usize {
    store.param_count()
}

/// `[T, context, bins]` causal windows, oldest frame first. Frames before
/// the start replicate frame 0.
pub fn context_windows(features: &Array2<f64>, context: usize) -> Array3<f64> {
    let (t_len, bins) = features.dim();
    Array3::from_shape_fn((t_len, context, bins), |(t, c, k)| {
        let src = (t + c + 1).saturating_sub(context);
        features[[src, k]]
    })
}

/// One predicted mask row per frame of normalized coded features.
pub fn infer_masks(net: &mut Network, store: &ParamStore, features: &FeatureMatrix) -> Result<MaskMatrix> {
    if features.stats.is_none() {
        return Err(Error::MissingStats);
    }
    if features.values.nrows() == 0 {
        return Err(Error::Empty("no frames to enhance".into()));
    }
    let windows = context_windows(&features.values, net.spec.context_frames);
    Ok(MaskMatrix {
        values: predict(net, store, &windows)?,
        kind: MaskKind::Predicted,
    })
}
