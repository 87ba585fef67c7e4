//! One round of the protocol, client side and server side.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::client::{ClientReport, ClientState};
use crate::detection::{client_local_policy, estimate_client_gain, LocalAction};
use crate::error::{Error, Result};
use crate::model::{batches, sgd_step, Model, ParamVector};
use crate::recovery::{adapt_step, AdaptationConfig};
use crate::robust::{self, mean_of, AggregatorChoice};

/// Local SGD settings shared by all clients (E, B, eta).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Individual-level thresholds a client applies to its own estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalMeasures {
    pub negative_rounds: u32,
    pub window: usize,
}

/// What the server and run mode allow a client to do this round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecoveryControl {
    /// System-wide NFL indicator as received from the server.
    pub nfl_flag: bool,
    /// Whether adapted-model training is permitted at all.
    pub adapt: bool,
    pub local_measures: Option<LocalMeasures>,
}

impl RecoveryControl {
    /// Plain FedAvg: no flag, no adaptation, no local measures.
    pub fn off() -> Self {
        RecoveryControl {
            nfl_flag: false,
            adapt: false,
            local_measures: None,
        }
    }

    pub fn with_flag(nfl_flag: bool) -> Self {
        RecoveryControl {
            nfl_flag,
            adapt: true,
            local_measures: None,
        }
    }
}

/// A client's report plus side information for the event log.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub report: ClientReport,
    /// Adapted-model SGD steps taken this round.
    pub adapt_steps: usize,
    /// The adapted model was created this round.
    pub initialized_adapted: bool,
    pub local_action: LocalAction,
}

/// `K` distinct client ids drawn uniformly, sorted ascending.
pub fn sample_active<R: Rng + ?Sized>(clients: usize, active: usize, rng: &mut R) -> Result<Vec<usize>> {
    if active == 0 || active > clients {
        return Err(Error::config(
            "active_clients",
            format!("K = {active} must lie in [1, N = {clients}]"),
        ));
    }
    let mut ids = index::sample(rng, clients, active).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Local update for one client, including the optional adapted-model steps.
///
/// The gain estimate is taken on the first batch before any training: on the
/// adapted model when the system flag is set and one exists, otherwise on the
/// received global model.
pub fn client_update<R: Rng + ?Sized>(
    model: &Model,
    client: &mut ClientState,
    w_prev: &ParamVector,
    control: RecoveryControl,
    training: &LocalTraining,
    adaptation: &AdaptationConfig,
    rng: &mut R,
) -> Result<UpdateOutcome> {
    let train = &client.data.train;
    if train.is_empty() {
        return Err(Error::EmptyClient(client.id));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let local_batches = batches(train, &order, training.batch_size);
    let first = &local_batches[0];

    let system_adapt = control.nfl_flag && control.adapt;
    let mut initialized_adapted = false;
    if system_adapt && client.adapted.is_none() {
        client.adapted = Some(w_prev.clone());
        initialized_adapted = true;
    }

    let eval_model = match (&client.adapted, control.nfl_flag) {
        (Some(v), true) => v,
        _ => w_prev,
    };
    let beta_hat = estimate_client_gain(model, eval_model, first, client.private_score)?;

    let mut local_action = LocalAction::None;
    if let Some(measures) = control.local_measures {
        let own = client.adapted.as_ref().filter(|_| client.local.active).unwrap_or(w_prev);
        let own_gain = estimate_client_gain(model, own, first, client.private_score)?;
        local_action = client_local_policy(
            &mut client.local,
            own_gain,
            control.nfl_flag,
            measures.negative_rounds,
            measures.window,
        );
    }
    let locally_adapting = !control.nfl_flag && control.adapt && client.local.active;
    if locally_adapting && client.adapted.is_none() {
        client.adapted = Some(w_prev.clone());
        initialized_adapted = true;
    }
    let adapting = system_adapt || locally_adapting;

    let mut local = w_prev.clone();
    let mut adapt_steps = 0;
    for _ in 0..training.epochs {
        for batch in &local_batches {
            let g = model.grad(&local, batch)?;
            local = sgd_step(&local, &g, training.learning_rate)?;
            if adapting {
                let v = client.adapted.as_ref().expect("adapted model initialized");
                let (next, diag) = adapt_step(model, v, &local, batch, training.learning_rate, adaptation)?;
                log::trace!(
                    "client {} lambda {:.6} loss_div {:.6} grad_div {:.6}",
                    client.id,
                    diag.lambda,
                    diag.loss_div,
                    diag.grad_div
                );
                client.adapted = Some(next);
                adapt_steps += 1;
            }
        }
    }

    Ok(UpdateOutcome {
        report: ClientReport {
            client_id: client.id,
            updated_params: local,
            beta_hat,
            n_i: train.len(),
        },
        adapt_steps,
        initialized_adapted,
        local_action,
    })
}

/// Reports in ascending client-id order.
pub(crate) fn canonical(reports: &[ClientReport]) -> Result<Vec<&ClientReport>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Protocol("no reports to aggregate".into()))?;
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    for r in &sorted {
        r.updated_params
            .ensure_same_layout(&first.updated_params, "aggregation")
            .map_err(|e| Error::Protocol(e.to_string()))?;
    }
    Ok(sorted)
}

/// `n_i / sum(n)` for each report, in ascending client-id order.
pub fn fedavg_weights(reports: &[ClientReport]) -> Result<Vec<f64>> {
    let sorted = canonical(reports)?;
    let total: usize = sorted.iter().map(|r| r.n_i).sum();
    if total == 0 {
        return Err(Error::Protocol("reports carry no samples".into()));
    }
    Ok(sorted.iter().map(|r| r.n_i as f64 / total as f64).collect())
}

/// Sample-weighted mean of the reported parameters, over the reporting clients.
pub fn aggregate_fedavg(reports: &[ClientReport]) -> Result<ParamVector> {
    let sorted = canonical(reports)?;
    let weights = fedavg_weights(reports)?;
    // Accumulate offsets from the first report so identical inputs come back exactly.
    let base = &sorted[0].updated_params;
    let mut out = base.clone();
    for (r, w) in sorted.iter().zip(&weights).skip(1) {
        for ((o, x), b) in out
            .as_mut_slice()
            .iter_mut()
            .zip(r.updated_params.as_slice())
            .zip(base.as_slice())
        {
            *o += w * (x - b);
        }
    }
    Ok(out)
}

/// Scales `delta` down to norm `bound` when it is longer.
pub fn clip_update(delta: &ParamVector, bound: f64) -> ParamVector {
    let norm = delta.norm();
    if norm <= bound {
        delta.clone()
    } else {
        delta.scale(bound / norm)
    }
}

/// Adds `N(0, sigma^2)` to every coordinate.
pub fn add_gaussian_noise<R: Rng + ?Sized>(params: &mut ParamVector, sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        for v in params.as_mut_slice() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
}

/// `w_prev + (1/K) sum clip(w_i - w_prev, S) + N(0, sigma^2 I)`.
pub fn aggregate_dp<R: Rng + ?Sized>(
    w_prev: &ParamVector,
    reports: &[ClientReport],
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    let sorted = canonical(reports)?;
    w_prev
        .ensure_same_layout(&sorted[0].updated_params, "aggregate_dp")
        .map_err(|e| Error::Protocol(e.to_string()))?;
    let k = sorted.len() as f64;
    let mut sum = ParamVector::zeros(w_prev.len());
    for r in &sorted {
        let delta = clip_update(&r.updated_params.sub(w_prev), clip);
        sum = sum.add(&delta);
    }
    let mut out = w_prev.add(&sum.scale(1.0 / k));
    add_gaussian_noise(&mut out, sigma, rng);
    Ok(out)
}

/// Clipping and Gaussian noise applied around the aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Upper bound S on each update's L2 norm.
    pub clip: f64,
    /// Standard deviation of the per-coordinate noise.
    pub sigma: f64,
}

/// Full server-side pipeline: clip (if DP) -> aggregator -> noise (if DP).
///
/// Under DP the FedAvg aggregator becomes the unweighted clipped-delta mean.
pub fn aggregate_round<R: Rng + ?Sized>(
    choice: &AggregatorChoice,
    w_prev: &ParamVector,
    reports: &[ClientReport],
    dp: Option<&DpConfig>,
    rng: &mut R,
) -> Result<ParamVector> {
    match (choice, dp) {
        (AggregatorChoice::Fedavg, None) => aggregate_fedavg(reports),
        (AggregatorChoice::Fedavg, Some(dp)) => aggregate_dp(w_prev, reports, dp.clip, dp.sigma, rng),
        (robust_choice, None) => robust::aggregate(robust_choice, w_prev, reports),
        (robust_choice, Some(dp)) => {
            let clipped: Vec<ClientReport> = reports
                .iter()
                .map(|r| ClientReport {
                    updated_params: w_prev.add(&clip_update(&r.updated_params.sub(w_prev), dp.clip)),
                    ..r.clone()
                })
                .collect();
            let mut out = robust::aggregate(robust_choice, w_prev, &clipped)?;
            add_gaussian_noise(&mut out, dp.sigma, rng);
            Ok(out)
        }
    }
}

/// Unweighted mean of the reported parameters.
pub fn aggregate_mean(reports: &[ClientReport]) -> Result<ParamVector> {
    let sorted = canonical(reports)?;
    let params: Vec<&ParamVector> = sorted.iter().map(|r| &r.updated_params).collect();
    Ok(mean_of(&params))
}
