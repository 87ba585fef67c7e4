//! Detection and recovery on top of Byzantine-robust aggregation.

use flguard::config::{nfl_default, Mode};
use flguard::robust::AggregatorChoice;
use flguard::run_simulation;

fn main() -> flguard::Result<()> {
    for aggregator in [
        AggregatorChoice::Fedavg,
        AggregatorChoice::Median,
        AggregatorChoice::TrimmedMean { trim_k: 3 },
        AggregatorChoice::MultiKrum { f: 3, m: None },
        AggregatorChoice::KNorm { k: 3 },
    ] {
        let mut row = format!("{:>12}:", aggregator.name());
        for mode in [Mode::Fedavg, Mode::DetectRecover] {
            let mut config = nfl_default();
            config.aggregator = aggregator.clone();
            config.mode = mode;
            let s = run_simulation(&config, 1)?.summary();
            row += &format!("  {mode} acc {:.4} guard {:+.4}", s.acc.unwrap_or(f64::NAN), s.beta_guard.unwrap_or(f64::NAN));
        }
        println!("{row}");
    }
    Ok(())
}
