//! Simulation configuration, TOML loading, and named scenario presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::BehaviorAssignment;
use crate::data::{PartitionPlan, PartitionScheme};
use crate::detection::{DetectorConfig, WeightsMode};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, PrivateBudget};
use crate::protocol::{DpConfig, LocalTraining};
use crate::recovery::AdaptationConfig;
use crate::robust::AggregatorChoice;

/// How recovery is driven over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain FedAvg: detector silent, no adaptation.
    Fedavg,
    /// Detect NFL, adapt while it is reported.
    #[default]
    DetectRecover,
    /// Adaptation from round 1, detector rules disabled.
    AllTime,
    /// Like `DetectRecover`, but the first cancellation stops adaptation for good.
    ShortTerm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Fedavg, Mode::DetectRecover, Mode::AllTime, Mode::ShortTerm];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Fedavg => "fedavg",
            Mode::DetectRecover => "detect_recover",
            Mode::AllTime => "all_time",
            Mode::ShortTerm => "short_term",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}` (expected fedavg, detect_recover, all_time or short_term)")))
    }
}

/// Where the examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        class_count: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    /// Delimiter-separated rows, label in the last column.
    File {
        path: PathBuf,
        #[serde(default = "default_delimiter")]
        delimiter: char,
    },
}

fn default_delimiter() -> char {
    ','
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            class_count: 10,
            dim: 32,
            per_class: 2000,
            spread: 0.7,
        }
    }
}

/// Every knob of a run. Together with `seed` it fully determines the outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    /// N
    pub num_clients: usize,
    /// K; derived from `active_fraction` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_clients: Option<usize>,
    pub active_fraction: f64,
    /// R
    pub rounds: usize,
    /// E
    pub local_epochs: usize,
    /// B
    pub batch_size: usize,
    /// eta
    pub learning_rate: f64,
    pub mode: Mode,
    /// NR
    pub negative_rounds: u32,
    /// c
    pub window: usize,
    /// Rounds between full test-set evaluations (the last 10 rounds are always evaluated).
    pub eval_every: usize,
    pub weights_mode: WeightsMode,
    /// Clients may start/stop adaptation on their own estimates.
    pub individual_measures: bool,
    pub model: ModelSpec,
    pub data: DataSource,
    pub partition: PartitionPlan,
    pub private: PrivateBudget,
    pub aggregator: AggregatorChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpConfig>,
    pub adaptation: AdaptationConfig,
    pub behavior: BehaviorAssignment,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            num_clients: 100,
            active_clients: None,
            active_fraction: 0.1,
            rounds: 400,
            local_epochs: 1,
            batch_size: 10,
            learning_rate: 0.1,
            mode: Mode::DetectRecover,
            negative_rounds: 50,
            window: 50,
            eval_every: 5,
            weights_mode: WeightsMode::Equal,
            individual_measures: false,
            model: ModelSpec::softmax_regression(32, 10),
            data: DataSource::default(),
            partition: PartitionPlan::default(),
            private: PrivateBudget::default(),
            aggregator: AggregatorChoice::Fedavg,
            dp: None,
            adaptation: AdaptationConfig::default(),
            behavior: BehaviorAssignment::default(),
        }
    }
}

/// Rounds at the end of a run that are always evaluated and summarized.
pub const SUMMARY_ROUNDS: usize = 10;

impl SimConfig {
    /// K, from `active_clients` or `round(N * active_fraction)` (at least 1).
    pub fn active(&self) -> usize {
        self.active_clients
            .unwrap_or_else(|| ((self.num_clients as f64 * self.active_fraction).round() as usize).max(1))
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            negative_rounds: self.negative_rounds,
            window: self.window,
        }
    }

    /// Copy with derived values written out, as echoed into run directories.
    pub fn resolved(&self) -> SimConfig {
        SimConfig {
            active_clients: Some(self.active()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients (N)", "must be at least 1"));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(Error::config("active_fraction", "must lie in (0, 1]"));
        }
        let k = self.active();
        if k == 0 || k > self.num_clients {
            return Err(Error::config(
                "active_clients (K)",
                format!("K = {k} must lie in [1, N = {}]", self.num_clients),
            ));
        }
        for (key, v) in [
            ("rounds (R)", self.rounds),
            ("local_epochs (E)", self.local_epochs),
            ("batch_size (B)", self.batch_size),
            ("window (c)", self.window),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate (eta)", "must be finite and >= 0"));
        }
        if self.negative_rounds == 0 {
            return Err(Error::config("negative_rounds (NR)", "must be at least 1"));
        }
        let model = Model::new(self.model.clone())?;
        if let DataSource::Synthetic {
            class_count,
            dim,
            per_class,
            spread,
        } = self.data
        {
            if class_count < 2 || dim == 0 || per_class == 0 {
                return Err(Error::config("data", "need class_count >= 2, dim >= 1, per_class >= 1"));
            }
            if !(spread >= 0.0 && spread.is_finite()) {
                return Err(Error::config("data.spread", "must be finite and >= 0"));
            }
            if dim != self.model.input_dim() {
                return Err(Error::config("model.layer_sizes", format!("input size must equal data.dim = {dim}")));
            }
            if class_count != self.model.class_count() {
                return Err(Error::config(
                    "model.layer_sizes",
                    format!("output size must equal data.class_count = {class_count}"),
                ));
            }
        }
        self.partition.validate()?;
        if self.private.epochs == 0 || self.private.batch_size == 0 {
            return Err(Error::config("private", "epochs and batch_size must be at least 1"));
        }
        if !(self.private.learning_rate > 0.0 && self.private.learning_rate.is_finite()) {
            return Err(Error::config("private.learning_rate", "must be positive"));
        }
        self.aggregator.validate(k)?;
        if let Some(dp) = &self.dp {
            if dp.clip.is_nan() || dp.clip <= 0.0 {
                return Err(Error::config("dp.clip", "must be positive"));
            }
            if !(dp.sigma >= 0.0 && dp.sigma.is_finite()) {
                return Err(Error::config("dp.sigma", "must be finite and >= 0"));
            }
        }
        self.adaptation.validate(&model)?;
        self.behavior.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses and validates a TOML config. Unknown keys are rejected.
pub fn parse_config(text: &str, origin: &Path) -> Result<SimConfig> {
    let config: SimConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        reason: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, path)
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 4] = ["ideal", "nfl_default", "vanilla_mix(p)", "partial_adapt(L)"];

/// Hidden width of the two-layer model used by the partial-adaptation preset.
pub const PARTIAL_ADAPT_HIDDEN: usize = 64;

/// IID data, no attackers, no DP.
pub fn ideal() -> SimConfig {
    SimConfig {
        partition: PartitionPlan {
            scheme: PartitionScheme::Iid,
            ..PartitionPlan::default()
        },
        ..SimConfig::default()
    }
}

/// Non-IID mixed allocation, 30% attackers, 10% active, clipped and noised aggregation.
pub fn nfl_default() -> SimConfig {
    SimConfig {
        partition: PartitionPlan::noniid_mixed(),
        behavior: BehaviorAssignment {
            attacker_fraction: 0.3,
            ..BehaviorAssignment::default()
        },
        dp: Some(DpConfig { clip: 15.0, sigma: 0.001 }),
        ..SimConfig::default()
    }
}

/// The adversarial scenario with a share of clients that never adapt.
pub fn vanilla_mix(fraction: f64) -> SimConfig {
    let mut c = nfl_default();
    c.behavior.vanilla_fraction = fraction;
    c
}

/// The adversarial scenario on a two-layer MLP with the lowest layers frozen.
pub fn partial_adapt(frozen: usize) -> SimConfig {
    let mut c = nfl_default();
    let (dim, classes) = (c.model.input_dim(), c.model.class_count());
    c.model = ModelSpec::mlp(dim, PARTIAL_ADAPT_HIDDEN, classes);
    c.adaptation.frozen_lower_layers = frozen;
    c
}

fn call_argument<'a>(name: &'a str, func: &str) -> Option<&'a str> {
    name.strip_prefix(func)?.strip_prefix('(')?.strip_suffix(')').map(str::trim)
}

/// Looks up a preset: `ideal`, `nfl_default`, `vanilla_mix(p)`, `partial_adapt(L)`.
pub fn preset(name: &str) -> Result<SimConfig> {
    let name = name.trim();
    let bad = |reason: String| Error::config("preset", reason);
    match name {
        "ideal" => return Ok(ideal()),
        "nfl_default" => return Ok(nfl_default()),
        _ => {}
    }
    if let Some(arg) = call_argument(name, "vanilla_mix") {
        let p: f64 = arg.parse().map_err(|_| bad(format!("bad fraction `{arg}`")))?;
        let c = vanilla_mix(p);
        c.validate()?;
        return Ok(c);
    }
    if let Some(arg) = call_argument(name, "partial_adapt") {
        let l: usize = arg.parse().map_err(|_| bad(format!("bad layer count `{arg}`")))?;
        let c = partial_adapt(l);
        c.validate()?;
        return Ok(c);
    }
    Err(bad(format!("unknown preset `{name}` (known: {})", PRESET_NAMES.join(", "))))
}
