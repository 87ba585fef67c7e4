//! Guard clients still gain when a share of the population never adapts.

use flguard::config::vanilla_mix;
use flguard::run_simulation;

fn main() -> flguard::Result<()> {
    for fraction in [0.0, 0.25, 0.5, 0.6] {
        let s = run_simulation(&vanilla_mix(fraction), 1)?.summary();
        println!(
            "vanilla {:>3.0}%: guard gain {:+.4}  all-client gain {:+.4}",
            100.0 * fraction,
            s.beta_guard.unwrap_or(f64::NAN),
            s.beta_true.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
