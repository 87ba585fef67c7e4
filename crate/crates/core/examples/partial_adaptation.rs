//! Adapting only the top layer of a two-layer MLP.

use flguard::config::partial_adapt;
use flguard::run_simulation;

fn main() -> flguard::Result<()> {
    for frozen in [0, 1] {
        let s = run_simulation(&partial_adapt(frozen), 1)?.summary();
        println!(
            "frozen lower layers {frozen}: acc {:.4}  gain {:+.4}",
            s.acc.unwrap_or(f64::NAN),
            s.beta_true.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
