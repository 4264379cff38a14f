//! The three limiting regimes of the scaled marker path, checked against the
//! urn through covariance traces.

use polya_urn::approx::{RegimeKind, RegimeSpec};
use polya_urn::harness::verify_regime;

pub fn run_example() -> polya_urn::Result<Vec<f64>> {
    let cases = [
        (RegimeKind::SmallN, None, 2000, 20),
        (RegimeKind::Proportional, Some(1.0), 200, 200),
        (RegimeKind::LargeN, None, 20, 2000),
    ];
    let mut worst = Vec::new();
    for (kind, nu, big_n, n) in cases {
        let spec = RegimeSpec {
            kind,
            nu,
            nu_bounds: None,
            big_n,
            n,
            t_grid: vec![0.5, 1.0],
        };
        let alpha = vec![big_n / 4, big_n / 4, big_n / 2];
        let summary = verify_regime(&spec, &alpha, 5_000, 0, 0, 11).expect("valid regime");
        let rel = summary
            .traces
            .iter()
            .map(|c| (c.urn - c.theory).abs() / c.theory.abs())
            .fold(0.0, f64::max);
        println!("{kind:?} (N = {big_n}, n = {n}): worst relative covariance error {rel:.3}");
        for c in summary.traces.iter().filter(|c| c.i == 0 && c.j == 0) {
            println!(
                "  t = ({}, {}): urn {:.4} ± {:.4}, limit {:.4}",
                c.t1, c.t2, c.urn, c.se, c.theory
            );
        }
        worst.push(rel);
    }
    Ok(worst)
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
