//! Recovery that stops for good at the first cancel while clients keep their
//! adapted models for inference.

use flguard::config::{nfl_default, Mode};
use flguard::{run_simulation, EventKind};

fn main() -> flguard::Result<()> {
    let mut config = nfl_default();
    config.mode = Mode::ShortTerm;
    let run = run_simulation(&config, 1)?;
    let s = run.summary();
    println!("reports {:?}", run.rounds_of(EventKind::Report));
    println!("cancels {:?}", run.rounds_of(EventKind::Cancel));
    println!("recovery stopped at {:?}", run.rounds_of(EventKind::RecoveryStopped).first());
    println!("adaptation steps after the stop: {}", s.adapt_steps_after_stop);
    println!("final guard-client gain {:+.4}", s.beta_guard.unwrap_or(f64::NAN));
    Ok(())
}
