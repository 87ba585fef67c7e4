//! Performance-gain estimation and the negative-FL detector.
//!
//! Clients estimate their gain on the first training batch of a round. The
//! server takes the median over the round's reports, smooths it over a window
//! of `c` rounds, and counts rounds where the smoothed value is negative. Once
//! that count reaches `NR` it reports NFL; a report is cancelled once more than
//! `c` rounds have passed since the last negative per-round median.

use serde::{Deserialize, Serialize};

use crate::client::ClientState;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ParamVector};

/// `accuracy(eval_model, first_batch) - private_score`.
pub fn estimate_client_gain(
    model: &Model,
    eval_model: &ParamVector,
    first_batch: &Batch,
    private_score: f64,
) -> Result<f64> {
    if first_batch.is_empty() {
        return Err(Error::Estimation("first batch is empty".into()));
    }
    if !(0.0..=1.0).contains(&private_score) {
        return Err(Error::Estimation(format!(
            "private score {private_score} outside [0, 1]"
        )));
    }
    Ok(model.accuracy(eval_model, first_batch)? - private_score)
}

/// Median of the round's gains; an even count averages the middle pair.
pub fn round_median(gains: &[f64]) -> Result<f64> {
    if gains.is_empty() {
        return Err(Error::Protocol("median of an empty round".into()));
    }
    let mut sorted = gains.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

/// Mean of the last `min(window, len)` entries, or `None` for an empty history.
pub fn windowed_gain(history: &[f64], window: usize) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let take = window.max(1).min(history.len());
    let tail = &history[history.len() - take..];
    Some(tail.iter().sum::<f64>() / take as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Negative smoothed rounds needed before reporting (NR).
    pub negative_rounds: u32,
    /// Smoothing window and cancellation horizon (c).
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorEvent {
    Report,
    Cancel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorState {
    pub config: DetectorConfig,
    /// Per-round medians, one per completed round.
    pub history: Vec<f64>,
    pub cnt: u32,
    pub nfl_flag: bool,
    /// Latest round (1-based) whose per-round median was negative.
    pub last_negative_round: Option<u64>,
}

impl DetectorState {
    pub fn new(config: DetectorConfig) -> Self {
        DetectorState {
            config,
            history: Vec::new(),
            cnt: 0,
            nfl_flag: false,
            last_negative_round: None,
        }
    }

    pub fn round(&self) -> u64 {
        self.history.len() as u64
    }

    pub fn windowed(&self) -> Option<f64> {
        windowed_gain(&self.history, self.config.window)
    }

    /// Records a round without running the report/cancel rules.
    pub fn observe(&mut self, beta_round: f64) -> f64 {
        self.history.push(beta_round);
        if beta_round < 0.0 {
            self.last_negative_round = Some(self.round());
        }
        self.windowed().expect("history just grew")
    }

    /// Appends the previous median again (round with no reports). Counters,
    /// flag and last-negative round are left as they were.
    pub fn carry_forward(&mut self) -> f64 {
        let last = self.history.last().copied().unwrap_or(0.0);
        self.history.push(last);
        self.windowed().expect("history just grew")
    }

    /// One full detector transition for the round's median gain.
    pub fn step(&mut self, beta_round: f64) -> Option<DetectorEvent> {
        let windowed = self.observe(beta_round);
        let negative_now = windowed < 0.0;
        if negative_now {
            self.cnt += 1;
        }
        // A report needs a negative smoothed value in the current round, so a
        // cancelled report only comes back on fresh evidence.
        if negative_now && !self.nfl_flag && self.cnt >= self.config.negative_rounds {
            self.nfl_flag = true;
            return Some(DetectorEvent::Report);
        }
        let since_negative = self.round() - self.last_negative_round.unwrap_or(0);
        if self.nfl_flag && since_negative > self.config.window as u64 {
            self.nfl_flag = false;
            return Some(DetectorEvent::Cancel);
        }
        None
    }
}

/// Client-side bookkeeping for individual-level measures.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LocalDetector {
    pub negative_rounds: u32,
    pub consecutive_nonnegative: u32,
    pub active: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalAction {
    None,
    ActivateAdaptation,
    StopAdaptation,
}

/// Feeds one of the client's own gain estimates into its local policy.
///
/// Activates once the estimate has been negative in more than `nr` rounds while
/// the system flag is off; stops after `c` consecutive nonnegative estimates.
/// Stopping clears the negative count.
pub fn client_local_policy(
    local: &mut LocalDetector,
    beta_hat: f64,
    system_flag: bool,
    nr: u32,
    c: usize,
) -> LocalAction {
    if beta_hat < 0.0 {
        local.negative_rounds += 1;
        local.consecutive_nonnegative = 0;
    } else {
        local.consecutive_nonnegative += 1;
    }
    if local.active {
        if local.consecutive_nonnegative as usize >= c {
            local.active = false;
            local.negative_rounds = 0;
            return LocalAction::StopAdaptation;
        }
    } else if !system_flag && local.negative_rounds > nr {
        local.active = true;
        local.consecutive_nonnegative = 0;
        return LocalAction::ActivateAdaptation;
    }
    LocalAction::None
}

/// Weights for the overall gain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    /// `1/N` per client.
    #[default]
    Equal,
    /// Proportional to each client's sample count.
    Size,
}

/// True per-client gains on full test sets, with their weighted overall value.
#[derive(Clone, Debug, PartialEq)]
pub struct GainRecord {
    pub accuracy: Vec<f64>,
    pub per_client: Vec<f64>,
    pub overall: f64,
}

/// Combines per-client gains with the chosen weights.
pub fn weighted_gain(gains: &[f64], sizes: &[usize], mode: WeightsMode) -> f64 {
    match mode {
        WeightsMode::Equal => gains.iter().sum::<f64>() / gains.len() as f64,
        WeightsMode::Size => {
            let total: usize = sizes.iter().sum();
            gains
                .iter()
                .zip(sizes)
                .map(|(g, &n)| g * n as f64 / total as f64)
                .sum()
        }
    }
}

/// Evaluates each client's inference model on its full test set.
pub fn true_beta(
    model: &Model,
    clients: &[ClientState],
    global: &ParamVector,
    mode: WeightsMode,
) -> Result<GainRecord> {
    if clients.is_empty() {
        return Err(Error::Protocol("no clients to evaluate".into()));
    }
    let mut accuracy = Vec::with_capacity(clients.len());
    let mut per_client = Vec::with_capacity(clients.len());
    for client in clients {
        let acc = client.test_accuracy(model, global)?;
        accuracy.push(acc);
        per_client.push(acc - client.private_score);
    }
    let sizes: Vec<usize> = clients.iter().map(|c| c.sample_count()).collect();
    let overall = weighted_gain(&per_client, &sizes, mode);
    Ok(GainRecord {
        accuracy,
        per_client,
        overall,
    })
}
