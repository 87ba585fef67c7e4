//! The round loop: sampling, local updates, aggregation, detection, evaluation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{assign_behaviors, behave, flip_labels, Behavior};
use crate::client::ClientState;
use crate::config::{DataSource, Mode, SimConfig, SUMMARY_ROUNDS};
use crate::data::{gen_synthetic, load_delimited, partition, ClientData, LabeledDataset};
use crate::detection::{round_median, weighted_gain, DetectorEvent, DetectorState, LocalAction, LocalDetector};
use crate::error::{Error, Result};
use crate::model::{train_private, Model, ParamVector};
use crate::protocol::{aggregate_round, sample_active, LocalMeasures, RecoveryControl, UpdateOutcome};
use crate::rng::Seeds;

/// Server-side state carried between rounds.
#[derive(Clone, Debug)]
pub struct ServerState {
    /// Last completed round (0 before the first).
    pub round: u64,
    pub global: ParamVector,
    pub detector: DetectorState,
}

impl ServerState {
    pub fn nfl_flag(&self) -> bool {
        self.detector.nfl_flag
    }

    pub fn cnt(&self) -> u32 {
        self.detector.cnt
    }

    /// Per-round median gains so far.
    pub fn beta_history(&self) -> &[f64] {
        &self.detector.history
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Role given to a client at setup (round 0).
    Behavior,
    Report,
    Cancel,
    /// Short-term mode: adaptation disabled for the rest of the run.
    RecoveryStopped,
    /// A client created its adapted model.
    AdaptationStarted,
    LocalActivate,
    LocalStop,
    /// Adapted-model SGD steps taken by one client in one round.
    AdaptSteps,
    /// No sampled client could train.
    EmptyRound,
    /// A sampled client without training data sat the round out.
    SkippedClient,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Behavior => "behavior",
            EventKind::Report => "report",
            EventKind::Cancel => "cancel",
            EventKind::RecoveryStopped => "recovery_stopped",
            EventKind::AdaptationStarted => "adaptation_started",
            EventKind::LocalActivate => "local_activate",
            EventKind::LocalStop => "local_stop",
            EventKind::AdaptSteps => "adapt_steps",
            EventKind::EmptyRound => "empty_round",
            EventKind::SkippedClient => "skipped_client",
        }
    }

    /// Round-level events that also appear in the metrics `event` column.
    pub fn is_round_level(&self) -> bool {
        matches!(
            self,
            EventKind::Report | EventKind::Cancel | EventKind::RecoveryStopped | EventKind::EmptyRound
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub round: u64,
    pub kind: EventKind,
    pub client: Option<usize>,
    pub value: String,
}

impl Event {
    fn round_level(round: u64, kind: EventKind) -> Self {
        Event {
            round,
            kind,
            client: None,
            value: String::new(),
        }
    }

    fn client(round: u64, kind: EventKind, client: usize, value: impl Into<String>) -> Self {
        Event {
            round,
            kind,
            client: Some(client),
            value: value.into(),
        }
    }
}

/// One row of `metrics.csv`. Evaluation columns are empty on rounds without a
/// full test-set pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub beta_r: f64,
    pub beta_win: f64,
    pub beta_true: Option<f64>,
    pub acc: Option<f64>,
    pub beta_guard: Option<f64>,
    pub nfl_flag: bool,
    /// Round-level event kinds, `;`-separated.
    pub event: String,
}

/// Mean of the evaluated columns over the last evaluated rounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: u64,
    pub beta_r: f64,
    pub beta_win: f64,
    pub beta_true: Option<f64>,
    pub acc: Option<f64>,
    pub beta_guard: Option<f64>,
    pub reports: usize,
    pub cancels: usize,
    pub first_report: Option<u64>,
    pub adapt_steps_after_stop: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Hex SHA-256 of the little-endian parameter bytes.
pub fn params_digest(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in params.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub config: SimConfig,
    pub metrics: Vec<RoundMetrics>,
    pub events: Vec<Event>,
    /// Digest of the global model after each round.
    pub trajectory: Vec<String>,
    pub behaviors: Vec<Behavior>,
    pub private_scores: Vec<f64>,
    pub final_global: ParamVector,
    pub final_adapted: Vec<Option<ParamVector>>,
}

impl RunArtifact {
    pub fn rounds_of(&self, kind: EventKind) -> Vec<u64> {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.round).collect()
    }

    pub fn summary(&self) -> Summary {
        let evaluated: Vec<&RoundMetrics> = self.metrics.iter().filter(|m| m.acc.is_some()).collect();
        let tail = &evaluated[evaluated.len().saturating_sub(SUMMARY_ROUNDS)..];
        let last = &self.metrics[self.metrics.len().saturating_sub(SUMMARY_ROUNDS)..];
        let stop = self.rounds_of(EventKind::RecoveryStopped).first().copied();
        let adapt_steps_after_stop = match stop {
            Some(s) => self
                .events
                .iter()
                .filter(|e| e.kind == EventKind::AdaptSteps && e.round > s)
                .map(|e| e.value.parse::<usize>().unwrap_or(0))
                .sum(),
            None => 0,
        };
        Summary {
            rounds: self.metrics.len() as u64,
            beta_r: mean(last.iter().map(|m| m.beta_r)).unwrap_or(0.0),
            beta_win: mean(last.iter().map(|m| m.beta_win)).unwrap_or(0.0),
            beta_true: mean(tail.iter().filter_map(|m| m.beta_true)),
            acc: mean(tail.iter().filter_map(|m| m.acc)),
            beta_guard: mean(tail.iter().filter_map(|m| m.beta_guard)),
            reports: self.rounds_of(EventKind::Report).len(),
            cancels: self.rounds_of(EventKind::Cancel).len(),
            first_report: self.rounds_of(EventKind::Report).first().copied(),
            adapt_steps_after_stop,
        }
    }
}

/// Maps `f` over `items`, on `pool` when given and serially otherwise. Output
/// order always matches input order.
fn map_ordered<T, U, F>(pool: Option<&rayon::ThreadPool>, items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
        None => items.into_iter().map(f).collect(),
    }
}

fn load_data(config: &SimConfig, seeds: &Seeds) -> Result<LabeledDataset> {
    match &config.data {
        DataSource::Synthetic {
            class_count,
            dim,
            per_class,
            spread,
        } => gen_synthetic(*class_count, *dim, *per_class, *spread, &mut seeds.data()),
        DataSource::File { path, delimiter } => {
            let byte = u8::try_from(*delimiter as u32)
                .map_err(|_| Error::config("data.delimiter", "must be a single-byte character"))?;
            let data = load_delimited(path, byte)?;
            if data.dim() != config.model.input_dim() {
                return Err(Error::config(
                    "model.layer_sizes",
                    format!("input size must equal the data's {} features", data.dim()),
                ));
            }
            if data.class_count > config.model.class_count() {
                return Err(Error::config(
                    "model.layer_sizes",
                    format!("output size must cover the data's {} classes", data.class_count),
                ));
            }
            Ok(LabeledDataset {
                class_count: config.model.class_count(),
                ..data
            })
        }
    }
}

/// A run in progress. Drive it with [`Simulation::run_round`] or consume it
/// with [`Simulation::run`].
pub struct Simulation {
    config: SimConfig,
    model: Model,
    seeds: Seeds,
    active: usize,
    server: ServerState,
    clients: Vec<ClientState>,
    pool: Option<rayon::ThreadPool>,
    recovery_stopped: bool,
    events: Vec<Event>,
    metrics: Vec<RoundMetrics>,
    trajectory: Vec<String>,
}

impl Simulation {
    /// Builds data, clients, roles and private models. `workers` sizes the
    /// thread pool; 1 runs everything on the calling thread.
    pub fn new(config: &SimConfig, workers: usize) -> Result<Self> {
        config.validate()?;
        if workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::config("workers", e.to_string()))?,
            )
        } else {
            None
        };
        let seeds = Seeds::new(config.seed);
        let model = Model::new(config.model.clone())?;
        let data = load_data(config, &seeds)?;
        let shares = partition(&data, config.num_clients, &config.partition, &mut seeds.partition())?;
        let behaviors = assign_behaviors(config.num_clients, &config.behavior, &mut seeds.behavior());

        let prepared: Vec<(usize, ClientData, Behavior)> = shares
            .into_iter()
            .zip(&behaviors)
            .enumerate()
            .map(|(id, (share, &behavior))| {
                let share = if behavior == Behavior::Attacker {
                    ClientData {
                        train: flip_labels(&share.train),
                        test: flip_labels(&share.test),
                    }
                } else {
                    share
                };
                (id, share, behavior)
            })
            .collect();
        let budget = &config.private;
        let trained = map_ordered(pool.as_ref(), prepared, |(id, share, behavior)| {
            let (private_model, private_score) =
                train_private(&model, &share.train, &share.test, budget, &mut seeds.private(id))?;
            Ok(ClientState {
                id,
                data: share,
                private_model,
                private_score,
                adapted: None,
                behavior,
                fabrication: config.behavior.fabrication,
                local: LocalDetector::default(),
            })
        });
        let clients = trained.into_iter().collect::<Result<Vec<_>>>()?;

        let events = clients
            .iter()
            .map(|c| Event::client(0, EventKind::Behavior, c.id, c.behavior.as_str()))
            .collect();
        let global = model.init_params(&mut seeds.init());
        Ok(Simulation {
            active: config.active(),
            server: ServerState {
                round: 0,
                global,
                detector: DetectorState::new(config.detector()),
            },
            config: config.clone(),
            model,
            seeds,
            clients,
            pool,
            recovery_stopped: false,
            events,
            metrics: Vec::new(),
            trajectory: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn trajectory(&self) -> &[String] {
        &self.trajectory
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.config.rounds as u64
    }

    /// Whether the flag the clients see this round is on.
    fn effective_flag(&self) -> bool {
        match self.config.mode {
            Mode::Fedavg => false,
            Mode::AllTime => true,
            Mode::DetectRecover | Mode::ShortTerm => self.server.detector.nfl_flag,
        }
    }

    fn control(&self) -> RecoveryControl {
        let individual = self.config.individual_measures
            && matches!(self.config.mode, Mode::DetectRecover | Mode::ShortTerm)
            && !self.recovery_stopped;
        RecoveryControl {
            nfl_flag: self.effective_flag(),
            adapt: self.config.mode != Mode::Fedavg && !self.recovery_stopped,
            local_measures: individual.then_some(LocalMeasures {
                negative_rounds: self.config.negative_rounds,
                window: self.config.window,
            }),
        }
    }

    fn should_evaluate(&self, round: u64) -> bool {
        let rounds = self.config.rounds as u64;
        round.is_multiple_of(self.config.eval_every as u64) || round + SUMMARY_ROUNDS as u64 > rounds
    }

    /// Runs one round and returns its metrics row. Events for the round are
    /// appended to [`Simulation::events`].
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        if self.is_finished() {
            return Err(Error::Protocol(format!("run already finished after {} rounds", self.config.rounds)));
        }
        let round = self.server.round + 1;
        let first_event = self.events.len();
        let control = self.control();
        let sampled = sample_active(self.config.num_clients, self.active, &mut self.seeds.sampling(round))?;

        let model = &self.model;
        let seeds = self.seeds;
        let w_prev = &self.server.global;
        let training = self.config.local_training();
        let adaptation = &self.config.adaptation;
        let mut chosen: Vec<&mut ClientState> = Vec::with_capacity(sampled.len());
        let mut wanted = sampled.iter().peekable();
        for client in self.clients.iter_mut() {
            if wanted.peek() == Some(&&client.id) {
                wanted.next();
                chosen.push(client);
            }
        }
        let outcomes = map_ordered(self.pool.as_ref(), chosen, |client| {
            let id = client.id;
            let result = behave(
                model,
                client,
                w_prev,
                control,
                &training,
                adaptation,
                &mut seeds.client(id, round),
                &mut seeds.fabrication(id, round),
            );
            (id, result)
        });

        let mut done: Vec<UpdateOutcome> = Vec::with_capacity(outcomes.len());
        for (id, result) in outcomes {
            match result {
                Ok(outcome) => done.push(outcome),
                Err(Error::EmptyClient(_)) => self.events.push(Event::client(round, EventKind::SkippedClient, id, "")),
                Err(e) => return Err(e),
            }
        }
        for o in &done {
            let id = o.report.client_id;
            if o.initialized_adapted {
                self.events.push(Event::client(round, EventKind::AdaptationStarted, id, ""));
            }
            match o.local_action {
                LocalAction::ActivateAdaptation => self.events.push(Event::client(round, EventKind::LocalActivate, id, "")),
                LocalAction::StopAdaptation => self.events.push(Event::client(round, EventKind::LocalStop, id, "")),
                LocalAction::None => {}
            }
            if o.adapt_steps > 0 {
                self.events
                    .push(Event::client(round, EventKind::AdaptSteps, id, o.adapt_steps.to_string()));
            }
        }

        let detector = &mut self.server.detector;
        let (beta_r, beta_win) = if done.is_empty() {
            log::warn!("round {round}: no client produced an update");
            self.events.push(Event::round_level(round, EventKind::EmptyRound));
            let win = detector.carry_forward();
            (*detector.history.last().expect("history grew"), win)
        } else {
            let reports: Vec<_> = done.into_iter().map(|o| o.report).collect();
            self.server.global = aggregate_round(
                &self.config.aggregator,
                &self.server.global,
                &reports,
                self.config.dp.as_ref(),
                &mut self.seeds.noise(round),
            )?;
            let gains: Vec<f64> = reports.iter().map(|r| r.beta_hat).collect();
            for r in &reports {
                log::debug!("round {round}: client {} beta_hat {}", r.client_id, r.beta_hat);
            }
            let beta_r = round_median(&gains)?;
            let event = match self.config.mode {
                Mode::Fedavg | Mode::AllTime => {
                    detector.observe(beta_r);
                    None
                }
                Mode::DetectRecover | Mode::ShortTerm => detector.step(beta_r),
            };
            match event {
                Some(DetectorEvent::Report) => {
                    log::info!("round {round}: NFL reported");
                    self.events.push(Event::round_level(round, EventKind::Report));
                }
                Some(DetectorEvent::Cancel) => {
                    log::info!("round {round}: NFL report cancelled");
                    self.events.push(Event::round_level(round, EventKind::Cancel));
                    if self.config.mode == Mode::ShortTerm && !self.recovery_stopped {
                        self.recovery_stopped = true;
                        self.events.push(Event::round_level(round, EventKind::RecoveryStopped));
                    }
                }
                None => {}
            }
            (beta_r, detector.windowed().expect("history is non-empty"))
        };
        self.server.round = round;
        self.trajectory.push(params_digest(&self.server.global));

        let (beta_true, acc, beta_guard) = if self.should_evaluate(round) {
            let (t, a, g) = self.evaluate()?;
            (Some(t), Some(a), g)
        } else {
            (None, None, None)
        };
        let event = self.events[first_event..]
            .iter()
            .filter(|e| e.kind.is_round_level())
            .map(|e| e.kind.as_str())
            .collect::<Vec<_>>()
            .join(";");
        let row = RoundMetrics {
            round,
            beta_r,
            beta_win,
            beta_true,
            acc,
            beta_guard,
            nfl_flag: self.effective_flag(),
            event,
        };
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// True overall gain, mean accuracy, and mean gain over honest guard clients.
    pub fn evaluate(&self) -> Result<(f64, f64, Option<f64>)> {
        let model = &self.model;
        let global = &self.server.global;
        let accs = map_ordered(self.pool.as_ref(), self.clients.iter().collect(), |c| {
            c.test_accuracy(model, global)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let gains: Vec<f64> = accs.iter().zip(&self.clients).map(|(a, c)| a - c.private_score).collect();
        let sizes: Vec<usize> = self.clients.iter().map(|c| c.sample_count()).collect();
        let beta_true = weighted_gain(&gains, &sizes, self.config.weights_mode);
        let acc = mean(accs.iter().copied()).expect("at least one client");
        let guard = mean(
            gains
                .iter()
                .zip(&self.clients)
                .filter(|(_, c)| c.behavior == Behavior::HonestGuard)
                .map(|(g, _)| *g),
        );
        Ok((beta_true, acc, guard))
    }

    /// Runs the remaining rounds.
    pub fn run(mut self) -> Result<RunArtifact> {
        while !self.is_finished() {
            self.run_round()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> RunArtifact {
        RunArtifact {
            behaviors: self.clients.iter().map(|c| c.behavior).collect(),
            private_scores: self.clients.iter().map(|c| c.private_score).collect(),
            final_adapted: self.clients.iter().map(|c| c.adapted.clone()).collect(),
            final_global: self.server.global,
            config: self.config.resolved(),
            metrics: self.metrics,
            events: self.events,
            trajectory: self.trajectory,
        }
    }
}

/// Runs a whole simulation in memory.
pub fn run_simulation(config: &SimConfig, workers: usize) -> Result<RunArtifact> {
    Simulation::new(config, workers)?.run()
}
