//! Urn proportions approach their Dirichlet limit; the limit is sampled from
//! uniform spacings.

use polya_urn::dirichlet::{component_variance, inv_moment, sample_spacings, DirichletParams};
use polya_urn::rng::{par_replicates, Role};
use polya_urn::urn::{run_direct_at, UrnState};

pub fn run_example() -> polya_urn::Result<f64> {
    let alpha = vec![5, 3, 2];
    let params = DirichletParams::new(alpha.clone())?;
    let samples = 20_000;

    let v = par_replicates(1, Role::Dirichlet, samples, |_, rng| {
        sample_spacings(&params, rng).components()[0]
    });
    let start = UrnState::new(alpha.clone())?;
    let n = 2_000;
    let p = par_replicates(1, Role::Urn, samples, |_, rng| {
        let counts = run_direct_at(&start, &[n], rng).pop().unwrap();
        counts[0] as f64 / (start.total() + n) as f64
    });

    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
    };
    let exact = component_variance(&params, 0)?;
    println!(
        "Var V_1: exact {exact}, spacings {:.5}, urn at n={n} {:.5}",
        var(&v),
        var(&p)
    );
    let inv = mean(&v.iter().map(|x| 1.0 / x).collect::<Vec<_>>());
    println!(
        "E[1/V_1]: exact {:.4}, spacings {inv:.4}",
        inv_moment(&params, 0)?
    );
    match inv_moment(&DirichletParams::new(vec![1, 3])?, 0) {
        Err(e) => println!("alpha_1 = 1: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(var(&v))
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
