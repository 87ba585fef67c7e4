//! Report round as a function of the negative-round threshold.

use flguard::config::nfl_default;
use flguard::{run_simulation, EventKind};

fn main() -> flguard::Result<()> {
    for nr in [10, 30, 50] {
        let mut config = nfl_default();
        config.negative_rounds = nr;
        let run = run_simulation(&config, 1)?;
        let negative_from_start = run.metrics.iter().take(nr as usize).all(|m| m.beta_win < 0.0);
        println!(
            "NR = {nr:>2}: first report {:?}, windowed gain negative from round 1: {negative_from_start}",
            run.rounds_of(EventKind::Report).first()
        );
    }
    Ok(())
}
