//! Brownian bridge and Kiefer sheet sampling, the simplex covariance and its
//! closed-form inverse, and normal masses of half-spaces and rectangles.

use polya_urn::gaussian::{
    cov_from_alpha, cov_simplex, normal_law_mass, sample_bridge, sample_kiefer, simplex_inverse,
    uniform_grid, GaussianSet,
};
use polya_urn::rng::{par_replicates, Role};

pub fn run_example() -> polya_urn::Result<f64> {
    let x = [0.2, 0.3, 0.1];
    let sigma = cov_simplex(&x)?;
    let product = &sigma.sigma * simplex_inverse(&x);
    println!("Σ_x Σ_x^-1 =\n{product:.3}");

    let law = cov_from_alpha(&[1, 1, 2])?;
    println!("Σ^α for α = (1, 1, 2):\n{:.4}", law.sigma);
    let half = normal_law_mass(
        &law,
        &GaussianSet::HalfSpace {
            direction: vec![1.0, 0.0],
            threshold: 0.0,
        },
    )?;
    let rect = normal_law_mass(
        &law,
        &GaussianSet::Rectangle {
            lower: vec![-0.5, -0.5],
            upper: vec![0.5, 0.5],
        },
    )?;
    println!(
        "half-space mass {:.4}, box mass {:.4} ± {:.1e}",
        half.value, rect.value, rect.error
    );

    let grid = uniform_grid(257);
    let inner = &grid[1..grid.len() - 1];
    let paths = 5_000;
    let exceed = par_replicates(3, Role::Bridge, paths, |_, rng| {
        sample_bridge(inner, rng).unwrap().max_abs() > 1.0
    })
    .into_iter()
    .filter(|&h| h)
    .count() as f64
        / paths as f64;
    println!(
        "P(max |W| > 1) ≈ {exceed:.4} (bound {:.4})",
        2.0 * (-2.0f64).exp()
    );

    let sheet = par_replicates(4, Role::Kiefer, paths, |_, rng| {
        let k = sample_kiefer(&[0.5], &[1.0, 2.0], rng).unwrap();
        k.at(0.5, 0) * k.at(0.5, 1)
    });
    let cov = sheet.iter().sum::<f64>() / paths as f64;
    println!("Cov(K(1/2,1), K(1/2,2)) ≈ {cov:.4} (exact 0.25)");
    Ok(cov)
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
