//! Exact law of a small urn against direct and exchangeable simulation.

use polya_urn::harness::oracle_check;
use polya_urn::urn::{exact_distribution, marginal_added_law};

pub fn run_example() -> polya_urn::Result<bool> {
    let alpha = vec![1, 2, 1];
    let n = 3;
    println!("exact law of the composition after {n} draws from {alpha:?}:");
    for (composition, p) in exact_distribution(&alpha, n)? {
        println!("  {composition:?}  {p}");
    }
    let added = marginal_added_law(&alpha, 1, n)?;
    println!("balls of color 2 added (beta-binomial): {added:?}");

    let summary = oracle_check(&[alpha], n, 100_000, 7).expect("valid inputs");
    println!(
        "{} cells, band z = {:.2}, passed = {}",
        summary.cells.len(),
        summary.z,
        summary.passed
    );
    Ok(summary.passed)
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
