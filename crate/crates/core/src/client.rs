//! Per-client state held by the simulator.

use serde::{Deserialize, Serialize};

use crate::adversary::{Behavior, FabricationPolicy};
use crate::data::ClientData;
use crate::detection::LocalDetector;
use crate::error::Result;
use crate::model::{Model, ParamVector};
use crate::recovery::inference_model;

/// What a client uploads at the end of its local update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub updated_params: ParamVector,
    pub beta_hat: f64,
    pub n_i: usize,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    /// Local view of the data. Attackers hold a label-flipped copy.
    pub data: ClientData,
    pub private_model: ParamVector,
    /// Test accuracy of the private model.
    pub private_score: f64,
    pub adapted: Option<ParamVector>,
    pub behavior: Behavior,
    pub fabrication: FabricationPolicy,
    pub local: LocalDetector,
}

impl ClientState {
    /// Training-sample count reported to the server.
    pub fn sample_count(&self) -> usize {
        self.data.train.len()
    }

    pub fn inference_model<'a>(&'a self, global: &'a ParamVector) -> &'a ParamVector {
        inference_model(self, global)
    }

    /// Accuracy of the inference model on the full local test set.
    pub fn test_accuracy(&self, model: &Model, global: &ParamVector) -> Result<f64> {
        model.accuracy(self.inference_model(global), &self.data.test.to_batch())
    }
}
