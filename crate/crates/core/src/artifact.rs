//! Run directories on disk and comparisons between them.
//!
//! A run directory holds `metrics.csv` (one row per round, appended as the run
//! goes), `events.csv`, `trajectory.csv` (per-round digest of the global
//! model), `summary.csv`, the resolved `config.toml`, `manifest.json`, and
//! `final_models.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::Behavior;
use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::sim::{Event, EventKind, RoundMetrics, RunArtifact, Simulation, Summary};

pub const METRICS_HEADER: &str = "round,beta_r,beta_win,beta_true,acc,beta_guard,nfl_flag,event";
pub const EVENTS_HEADER: &str = "round,kind,client,value";
pub const TRAJECTORY_HEADER: &str = "round,digest";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics_line(m: &RoundMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.round,
        m.beta_r,
        m.beta_win,
        opt(m.beta_true),
        opt(m.acc),
        opt(m.beta_guard),
        u8::from(m.nfl_flag),
        m.event
    )
}

fn event_line(e: &Event) -> String {
    format!(
        "{},{},{},{}",
        e.round,
        e.kind,
        e.client.map(|c| c.to_string()).unwrap_or_default(),
        e.value
    )
}

/// Identity and outcome of a run, stored as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub seed: u64,
    pub mode: String,
    pub aggregator: String,
    pub num_clients: usize,
    pub active_clients: usize,
    pub rounds: usize,
    pub behaviors: Vec<Behavior>,
    pub private_scores: Vec<f64>,
    pub report_rounds: Vec<u64>,
    pub cancel_rounds: Vec<u64>,
    pub summary: Summary,
}

impl Manifest {
    pub fn of(run: &RunArtifact) -> Self {
        Manifest {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: run.config.seed,
            mode: run.config.mode.to_string(),
            aggregator: run.config.aggregator.name().to_string(),
            num_clients: run.config.num_clients,
            active_clients: run.config.active(),
            rounds: run.config.rounds,
            behaviors: run.behaviors.clone(),
            private_scores: run.private_scores.clone(),
            report_rounds: run.rounds_of(EventKind::Report),
            cancel_rounds: run.rounds_of(EventKind::Cancel),
            summary: run.summary(),
        }
    }
}

#[derive(Serialize)]
struct FinalModels<'a> {
    global: &'a ParamVector,
    adapted: &'a [Option<ParamVector>],
}

/// Streams per-round rows into a run directory.
pub struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    events: BufWriter<File>,
    trajectory: BufWriter<File>,
}

impl RunWriter {
    /// Creates `dir` (if needed), writes headers and the resolved config.
    pub fn create(dir: &Path, config: &SimConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), config.resolved().to_toml())?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            writeln!(w, "{header}")?;
            w.flush()?;
            Ok(w)
        };
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics: open("metrics.csv", METRICS_HEADER)?,
            events: open("events.csv", EVENTS_HEADER)?,
            trajectory: open("trajectory.csv", TRAJECTORY_HEADER)?,
        })
    }

    pub fn append_events(&mut self, events: &[Event]) -> Result<()> {
        for e in events {
            writeln!(self.events, "{}", event_line(e))?;
        }
        self.events.flush()?;
        Ok(())
    }

    pub fn append_round(&mut self, metrics: &RoundMetrics, digest: &str, events: &[Event]) -> Result<()> {
        writeln!(self.metrics, "{}", metrics_line(metrics))?;
        writeln!(self.trajectory, "{},{}", metrics.round, digest)?;
        self.metrics.flush()?;
        self.trajectory.flush()?;
        self.append_events(events)
    }

    /// Writes the end-of-run files.
    pub fn finish(mut self, run: &RunArtifact) -> Result<()> {
        self.metrics.flush()?;
        self.events.flush()?;
        self.trajectory.flush()?;
        let manifest = Manifest::of(run);
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(json_err)?)?;
        let s = &manifest.summary;
        let summary = format!(
            "rounds,beta_r,beta_win,beta_true,acc,beta_guard,reports,cancels,first_report\n{},{},{},{},{},{},{},{},{}\n",
            s.rounds,
            s.beta_r,
            s.beta_win,
            opt(s.beta_true),
            opt(s.acc),
            opt(s.beta_guard),
            s.reports,
            s.cancels,
            s.first_report.map(|r| r.to_string()).unwrap_or_default()
        );
        fs::write(self.dir.join("summary.csv"), summary)?;
        let models = FinalModels {
            global: &run.final_global,
            adapted: &run.final_adapted,
        };
        fs::write(self.dir.join("final_models.json"), serde_json::to_string(&models).map_err(json_err)?)?;
        Ok(())
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Runs `config` and streams results into `dir`.
pub fn run_to_dir(config: &SimConfig, workers: usize, dir: &Path) -> Result<RunArtifact> {
    let mut sim = Simulation::new(config, workers)?;
    let mut writer = RunWriter::create(dir, config)?;
    writer.append_events(sim.events())?;
    while !sim.is_finished() {
        let before = sim.events().len();
        let row = sim.run_round()?;
        let digest = sim.trajectory().last().expect("round recorded").clone();
        writer.append_round(&row, &digest, &sim.events()[before..])?;
    }
    let run = sim.finish();
    writer.finish(&run)?;
    Ok(run)
}

/// The parts of a run directory needed for comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub metrics: Vec<RoundMetrics>,
    pub trajectory: Vec<String>,
    pub summary: Summary,
}

impl RunRecord {
    pub fn of(run: &RunArtifact) -> Self {
        RunRecord {
            metrics: run.metrics.clone(),
            trajectory: run.trajectory.clone(),
            summary: run.summary(),
        }
    }
}

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_rows(path: &Path, header: &str) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let found = reader.headers().map_err(|e| parse_err(path, e.to_string()))?;
    let found = found.iter().collect::<Vec<_>>().join(",");
    if found != header {
        return Err(parse_err(path, format!("unexpected header `{found}`")));
    }
    reader
        .records()
        .map(|r| r.map_err(|e| parse_err(path, e.to_string())))
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, row: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = row.get(i).ok_or_else(|| parse_err(path, format!("missing column {i}")))?;
    raw.parse()
        .map_err(|_| parse_err(path, format!("bad value `{raw}` in column {i}")))
}

fn opt_field(path: &Path, row: &csv::StringRecord, i: usize) -> Result<Option<f64>> {
    match row.get(i) {
        Some("") | None => Ok(None),
        Some(_) => field(path, row, i).map(Some),
    }
}

/// Loads a run directory written by [`run_to_dir`].
pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let path = dir.join("metrics.csv");
    let metrics = read_rows(&path, METRICS_HEADER)?
        .iter()
        .map(|row| {
            Ok(RoundMetrics {
                round: field(&path, row, 0)?,
                beta_r: field(&path, row, 1)?,
                beta_win: field(&path, row, 2)?,
                beta_true: opt_field(&path, row, 3)?,
                acc: opt_field(&path, row, 4)?,
                beta_guard: opt_field(&path, row, 5)?,
                nfl_flag: field::<u8>(&path, row, 6)? != 0,
                event: row.get(7).unwrap_or_default().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join("trajectory.csv");
    let trajectory = read_rows(&path, TRAJECTORY_HEADER)?
        .iter()
        .map(|row| field::<String>(&path, row, 1))
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| parse_err(&path, e.to_string()))?;
    Ok(RunRecord {
        metrics,
        trajectory,
        summary: manifest.summary,
    })
}

/// Result of comparing two runs round by round.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rounds: usize,
    /// First round whose global-model digest differs.
    pub first_trajectory_divergence: Option<u64>,
    pub identical_trajectories: bool,
    pub identical_metrics: bool,
    pub beta_true_delta: Option<f64>,
    pub acc_delta: Option<f64>,
    pub beta_guard_delta: Option<f64>,
}

impl Comparison {
    pub fn render(&self) -> String {
        let delta = |d: Option<f64>| d.map(|v| format!("{v:+.4}")).unwrap_or_else(|| "n/a".into());
        format!(
            "rounds: {}\nidentical trajectories: {}\nfirst divergence: {}\nidentical metrics: {}\nfinal beta_true (b - a): {}\nfinal acc (b - a): {}\nfinal beta_guard (b - a): {}\n",
            self.rounds,
            self.identical_trajectories,
            self.first_trajectory_divergence
                .map(|r| r.to_string())
                .unwrap_or_else(|| "none".into()),
            self.identical_metrics,
            delta(self.beta_true_delta),
            delta(self.acc_delta),
            delta(self.beta_guard_delta),
        )
    }
}

/// Compares two runs of the same length.
pub fn compare_runs(a: &RunRecord, b: &RunRecord) -> Result<Comparison> {
    if a.trajectory.len() != b.trajectory.len() || a.metrics.len() != b.metrics.len() {
        return Err(Error::Incompatible(format!(
            "runs have {} and {} rounds",
            a.trajectory.len(),
            b.trajectory.len()
        )));
    }
    let first_trajectory_divergence = a
        .trajectory
        .iter()
        .zip(&b.trajectory)
        .position(|(x, y)| x != y)
        .map(|i| i as u64 + 1);
    let delta = |x: Option<f64>, y: Option<f64>| Some(y? - x?);
    Ok(Comparison {
        rounds: a.trajectory.len(),
        first_trajectory_divergence,
        identical_trajectories: first_trajectory_divergence.is_none(),
        identical_metrics: a.metrics == b.metrics,
        beta_true_delta: delta(a.summary.beta_true, b.summary.beta_true),
        acc_delta: delta(a.summary.acc, b.summary.acc),
        beta_guard_delta: delta(a.summary.beta_guard, b.summary.beta_guard),
    })
}

/// Compares two run directories.
pub fn compare_dirs(a: &Path, b: &Path) -> Result<Comparison> {
    compare_runs(&load_run(a)?, &load_run(b)?)
}
