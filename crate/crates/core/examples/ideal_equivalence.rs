//! On IID data without attackers the detector stays silent, so the guarded run
//! reproduces plain FedAvg bit for bit.

use flguard::config::{ideal, Mode};
use flguard::{compare_runs, run_simulation, RunRecord};

fn main() -> flguard::Result<()> {
    let mut config = ideal();
    config.rounds = 300;
    let guarded = run_simulation(&config, 1)?;
    config.mode = Mode::Fedavg;
    let plain = run_simulation(&config, 1)?;
    let cmp = compare_runs(&RunRecord::of(&guarded), &RunRecord::of(&plain))?;
    print!("{}", cmp.render());
    println!("final windowed gain {:+.4}", guarded.metrics.last().map_or(0.0, |m| m.beta_win));
    Ok(())
}
