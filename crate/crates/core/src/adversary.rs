//! Client behaviors: guard clients that run recovery, vanilla FedAvg clients, and
//! label-flipping attackers that may also fabricate their gain estimates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::{ClientReport, ClientState};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Model, ParamVector};
use crate::protocol::{client_update, LocalTraining, RecoveryControl, UpdateOutcome};
use crate::recovery::AdaptationConfig;
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Follows the full protocol including recovery.
    #[default]
    HonestGuard,
    /// Follows plain FedAvg and never adapts.
    Vanilla,
    /// Trains on label-flipped data.
    Attacker,
}

impl Behavior {
    pub fn as_str(&self) -> &'static str {
        match self {
            Behavior::HonestGuard => "honest_guard",
            Behavior::Vanilla => "vanilla",
            Behavior::Attacker => "attacker",
        }
    }
}

/// What an attacker reports in place of its computed gain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FabricationPolicy {
    #[default]
    Honest,
    Constant(f64),
    UniformRandom((f64, f64)),
}

impl FabricationPolicy {
    pub fn apply<R: Rng + ?Sized>(&self, computed: f64, rng: &mut R) -> f64 {
        match *self {
            FabricationPolicy::Honest => computed,
            FabricationPolicy::Constant(v) => v,
            FabricationPolicy::UniformRandom((lo, hi)) if lo < hi => rng.random_range(lo..hi),
            FabricationPolicy::UniformRandom((lo, _)) => lo,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (-1.0..=1.0).contains(&v);
        match *self {
            FabricationPolicy::Honest => Ok(()),
            FabricationPolicy::Constant(v) if ok(v) => Ok(()),
            FabricationPolicy::UniformRandom((lo, hi)) if ok(lo) && ok(hi) && lo <= hi => Ok(()),
            _ => Err(Error::config("behavior.fabrication", "values must lie in [-1, 1] with lo <= hi")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorAssignment {
    pub attacker_fraction: f64,
    pub vanilla_fraction: f64,
    pub fabrication: FabricationPolicy,
}

impl BehaviorAssignment {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("behavior.attacker_fraction", self.attacker_fraction),
            ("behavior.vanilla_fraction", self.vanilla_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        if self.attacker_fraction + self.vanilla_fraction > 1.0 + 1e-12 {
            return Err(Error::config("behavior", "attacker and vanilla fractions exceed 1"));
        }
        self.fabrication.validate()
    }
}

/// `y -> C - 1 - y` on every label.
pub fn flip_labels(data: &LabeledDataset) -> LabeledDataset {
    let c = data.class_count;
    LabeledDataset {
        features: data.features.clone(),
        labels: data.labels.iter().map(|&y| c - 1 - y).collect(),
        class_count: c,
    }
}

/// Fixed per-run roles: `round(N * fraction)` attackers and vanilla clients,
/// drawn without replacement; everyone else follows the full protocol.
pub fn assign_behaviors<R: Rng + ?Sized>(
    clients: usize,
    assignment: &BehaviorAssignment,
    rng: &mut R,
) -> Vec<Behavior> {
    let attackers = ((clients as f64 * assignment.attacker_fraction).round() as usize).min(clients);
    let vanilla = ((clients as f64 * assignment.vanilla_fraction).round() as usize).min(clients - attackers);
    let mut ids: Vec<usize> = (0..clients).collect();
    ids.shuffle(rng);
    let mut roles = vec![Behavior::HonestGuard; clients];
    for &id in &ids[..attackers] {
        roles[id] = Behavior::Attacker;
    }
    for &id in &ids[attackers..attackers + vanilla] {
        roles[id] = Behavior::Vanilla;
    }
    roles
}

/// Runs the ordinary update on the attacker's flipped data and swaps in the
/// fabricated gain.
#[allow(clippy::too_many_arguments)]
pub fn attacker_report(
    model: &Model,
    client: &mut ClientState,
    w_prev: &ParamVector,
    control: RecoveryControl,
    training: &LocalTraining,
    adaptation: &AdaptationConfig,
    rng: &mut SimRng,
    fabrication_rng: &mut SimRng,
) -> Result<UpdateOutcome> {
    if client.behavior != Behavior::Attacker {
        return Err(Error::Protocol(format!("client {} is not an attacker", client.id)));
    }
    let mut outcome = client_update(model, client, w_prev, control, training, adaptation, rng)?;
    outcome.report.beta_hat = client.fabrication.apply(outcome.report.beta_hat, fabrication_rng);
    Ok(outcome)
}

/// A FedAvg client: the system flag is ignored, so it never creates or trains
/// an adapted model.
pub fn vanilla_client_report(
    model: &Model,
    client: &mut ClientState,
    w_prev: &ParamVector,
    training: &LocalTraining,
    rng: &mut SimRng,
) -> Result<UpdateOutcome> {
    if client.behavior != Behavior::Vanilla {
        return Err(Error::Protocol(format!("client {} is not a vanilla client", client.id)));
    }
    client_update(
        model,
        client,
        w_prev,
        RecoveryControl::off(),
        training,
        &AdaptationConfig::default(),
        rng,
    )
}

/// Dispatches on the client's behavior.
#[allow(clippy::too_many_arguments)]
pub fn behave(
    model: &Model,
    client: &mut ClientState,
    w_prev: &ParamVector,
    control: RecoveryControl,
    training: &LocalTraining,
    adaptation: &AdaptationConfig,
    rng: &mut SimRng,
    fabrication_rng: &mut SimRng,
) -> Result<UpdateOutcome> {
    match client.behavior {
        Behavior::HonestGuard => client_update(model, client, w_prev, control, training, adaptation, rng),
        Behavior::Vanilla => vanilla_client_report(model, client, w_prev, training, rng),
        Behavior::Attacker => attacker_report(
            model,
            client,
            w_prev,
            control,
            training,
            adaptation,
            rng,
            fabrication_rng,
        ),
    }
}

/// Reports keyed by id, for callers that only need the uploads.
pub fn reports_of(outcomes: &[UpdateOutcome]) -> Vec<ClientReport> {
    outcomes.iter().map(|o| o.report.clone()).collect()
}
