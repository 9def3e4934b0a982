//! Experiment recipes: the toy stability study, binarized MNIST, and MIMO detection.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flowcore::TimeSampler;
use crate::objectives::{LossSpace, ObjectiveConfig, Prediction};

pub mod bmnist;
pub mod mimo;
pub mod toy;

/// One (prediction, loss, time sampler) configuration of a recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCell {
    pub objective: ObjectiveConfig,
    pub sampler: TimeSampler,
}

impl ObjectiveCell {
    pub fn new(prediction: Prediction, loss: LossSpace, sampler: TimeSampler) -> Result<Self> {
        Ok(Self {
            objective: ObjectiveConfig::new(prediction, loss)?,
            sampler,
        })
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.objective.label(), self.sampler.label())
    }
}
