//! The per-round median against fabricated gain reports.

use flguard::detection::round_median;

fn main() -> flguard::Result<()> {
    let honest = [-0.08, -0.05, -0.03, -0.02, -0.01, 0.01, 0.02];
    println!("honest only: {:+.3}", round_median(&honest)?);
    for fabricated in [1.0, -1.0, 0.5] {
        for count in 1..=6 {
            let mut all = honest.to_vec();
            all.extend(std::iter::repeat_n(fabricated, count));
            println!("{count} reports of {fabricated:+.1}: median {:+.3}", round_median(&all)?);
        }
    }
    Ok(())
}
