//! Writing a run directory, reading it back, and comparing two runs.

use flguard::config::{nfl_default, Mode};
use flguard::{compare_dirs, load_run, run_to_dir};

fn main() -> flguard::Result<()> {
    let root = std::env::temp_dir().join("flguard-example");
    let mut config = nfl_default();
    config.rounds = 100;
    run_to_dir(&config, 1, &root.join("guard"))?;
    config.mode = Mode::Fedavg;
    run_to_dir(&config, 1, &root.join("fedavg"))?;
    let record = load_run(&root.join("guard"))?;
    println!("{} rounds read back from {}", record.metrics.len(), root.join("guard").display());
    print!("{}", compare_dirs(&root.join("guard"), &root.join("fedavg"))?.render());
    Ok(())
}
