//! Trainable encoder-decoder mapping a one-channel multi-scale tensor map to
//! per-pixel category probabilities.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model_io;
pub mod net;
pub mod optim;
pub mod spec;
pub mod tensor;
pub mod train;

pub use loss::{focal_loss, FocalLoss};
pub use model_io::{read_model, write_model, Model, ModelMetadata, MODEL_VERSION};
pub use net::{backward, build_net, forward, forward_pass, Gradients, LayerParams, Mode, NetParams};
pub use optim::{adadelta_step, AdadeltaSlot, AdadeltaState};
pub use spec::{desk_reference, Census, NetBuilder, NetSpec, Node, NodeKind, DESK_WIDTHS};
pub use tensor::{FeatureTensor, Real, Shape};
pub use train::{
    mean_dice, predict, predict_batch, train, train_with, EpochStats, TrainOutcome, TrainSample,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            batch_size: 4,
            validation_fraction: 0.10,
            alpha: 0.25,
            gamma: 2.0,
            rho: optim::DEFAULT_RHO,
            epsilon: optim::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::contract(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::contract(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::contract(format!("gamma {} must be nonnegative", self.gamma)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.epsilon > 0.0) {
            return Err(Error::contract("adadelta rho must lie in (0, 1) and epsilon be positive"));
        }
        Ok(())
    }
}
