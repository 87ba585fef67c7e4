//! The adversarial scenario with and without detection and recovery.
//!
//! cargo run --release --example detect_and_recover -- [seed]

use flguard::config::{nfl_default, Mode};
use flguard::{run_simulation, EventKind};

fn main() -> flguard::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    for mode in [Mode::Fedavg, Mode::DetectRecover] {
        let mut config = nfl_default();
        config.seed = seed;
        config.mode = mode;
        let run = run_simulation(&config, 1)?;
        let s = run.summary();
        println!(
            "{mode:>14}: acc {:.4}  beta_true {:+.4}  beta_guard {:+.4}  reports {:?}",
            s.acc.unwrap_or(f64::NAN),
            s.beta_true.unwrap_or(f64::NAN),
            s.beta_guard.unwrap_or(f64::NAN),
            run.rounds_of(EventKind::Report)
        );
    }
    Ok(())
}
