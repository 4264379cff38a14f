//! Half-space distance between the scaled urn and its normal limit over a
//! small (N, n) grid, with the two-term rate fit.

use polya_urn::stats::{rate_scan, AlphaFamily, RateScanConfig};

pub fn run_example() -> polya_urn::Result<f64> {
    let grid = [40u64, 160];
    let config = RateScanConfig {
        family: AlphaFamily::Proportional {
            weights: vec![1, 1, 2],
        },
        cells: grid
            .iter()
            .flat_map(|&big_n| grid.iter().map(move |&n| (big_n, n)))
            .collect(),
        replicates: 20_000,
        directions: 64,
        thresholds: 32,
        all_thresholds: false,
        delta: 0.2,
        seed: 5,
    };
    let result = rate_scan(&config)?;
    println!("{}", result.family_note);
    for (c, f) in result.cells.iter().zip(&result.fit.fitted) {
        println!(
            "N = {:>3}, n = {:>3}: distance {:.4} ± {:.4}, fitted {:.4}",
            c.big_n, c.n, c.distance, c.se, f
        );
    }
    println!(
        "c1 = {:.3}, c2 = {:.3}, R² = {:?}",
        result.fit.c1, result.fit.c2, result.fit.r_squared
    );
    Ok(result.cells[0].distance)
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
