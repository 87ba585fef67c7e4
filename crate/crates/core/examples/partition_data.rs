//! The non-IID mixed split: class coverage groups and skewed client sizes.

use flguard::data::{gen_synthetic, partition, size_cv, PartitionPlan};
use flguard::rng::{stream, Purpose};

fn main() -> flguard::Result<()> {
    let data = gen_synthetic(10, 32, 2000, 0.7, &mut stream(1, Purpose::Data, &[]))?;
    for (name, plan) in [("iid", PartitionPlan::default()), ("noniid_mixed", PartitionPlan::noniid_mixed())] {
        let clients = partition(&data, 100, &plan, &mut stream(1, Purpose::Partition, &[]))?;
        let sizes: Vec<usize> = clients.iter().map(|c| c.len()).collect();
        let mut coverage = [0usize; 11];
        for c in &clients {
            coverage[c.classes().len()] += 1;
        }
        println!(
            "{name:>12}: sizes {}..{} (cv {:.2}), clients by class count {:?}",
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap(),
            size_cv(&sizes),
            coverage.iter().enumerate().filter(|(_, &n)| n > 0).collect::<Vec<_>>()
        );
    }
    Ok(())
}
