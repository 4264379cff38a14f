//! Dirichlet laws with integer parameters, built from uniform order statistics.
//!
//! For `alpha` summing to `m`, sort `m - 1` i.i.d. uniforms `U'_(1) <= ... <=
//! U'_(m-1)` and set `U'_(0) = 0`, `U'_(m) = 1`. The spacings between the
//! order statistics at the partial sums of `alpha` are `Dir(alpha)`. The sample
//! is kept alongside the draw so that quantile-process identities can be
//! checked pathwise against the same uniforms.

use num_rational::Ratio;
use rand::RngCore;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::open_unit;

/// Above this many uniforms only the needed order statistics are selected
/// instead of sorting the whole sample.
pub const SELECTION_THRESHOLD: u64 = 1_000_000;

/// A point of the open simplex: positive components summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexVector {
    v: Vec<f64>,
}

impl SimplexVector {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::InvalidComposition(
                "a simplex point needs at least two components".into(),
            ));
        }
        if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::OutsideSimplex);
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::OutsideSimplex);
        }
        Ok(SimplexVector { v })
    }

    pub fn components(&self) -> &[f64] {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// All coordinates but the last.
    pub fn truncated(&self) -> &[f64] {
        &self.v[..self.v.len() - 1]
    }

    /// Partial sums `v̂_1, ..., v̂_k`. The last entry is pinned to exactly 1.
    pub fn partial_sums(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out: Vec<f64> = self
            .v
            .iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect();
        if let Some(last) = out.last_mut() {
            *last = 1.0;
        }
        out
    }
}

/// Integer Dirichlet parameters `alpha` with total `m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha: Vec<u64>,
    total: u64,
}

impl DirichletParams {
    pub fn new(alpha: Vec<u64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidComposition(format!(
                "need at least 2 components, got {}",
                alpha.len()
            )));
        }
        if let Some(j) = alpha.iter().position(|&a| a == 0) {
            return Err(Error::InvalidComposition(format!("alpha_{} = 0", j + 1)));
        }
        let total = alpha.iter().sum();
        Ok(DirichletParams { alpha, total })
    }

    pub fn alpha(&self) -> &[u64] {
        &self.alpha
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// `mu = alpha / m`, the mean of the law.
    pub fn mean(&self) -> Vec<f64> {
        let m = self.total as f64;
        self.alpha.iter().map(|&a| a as f64 / m).collect()
    }

    /// Partial sums of `alpha`.
    pub fn cumulative(&self) -> Vec<u64> {
        let mut acc = 0;
        self.alpha
            .iter()
            .map(|a| {
                acc += a;
                acc
            })
            .collect()
    }

    /// Log of the multivariate beta function `B(alpha)`.
    pub fn ln_beta(&self) -> f64 {
        let num: f64 = self.alpha.iter().map(|&a| ln_gamma(a as f64)).sum();
        num - ln_gamma(self.total as f64)
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.alpha.len() {
            return Err(Error::ColorIndex {
                index: j,
                colors: self.alpha.len(),
            });
        }
        Ok(())
    }
}

/// A Dirichlet draw together with the sorted uniform sample it was cut from.
#[derive(Debug, Clone)]
pub struct OrderStatisticDraw {
    /// `U'_(1..m-1)` in increasing order.
    pub sorted: Vec<f64>,
    pub v: SimplexVector,
}

fn sorted_uniforms<R: RngCore + ?Sized>(count: usize, rng: &mut R) -> Vec<f64> {
    let mut u: Vec<f64> = (0..count).map(|_| open_unit(rng)).collect();
    u.sort_unstable_by(f64::total_cmp);
    // Ties have probability zero but are representable; redraw until distinct.
    while let Some(i) = u.windows(2).position(|w| w[0] == w[1]) {
        u[i + 1] = open_unit(rng);
        u.sort_unstable_by(f64::total_cmp);
    }
    u
}

fn spacings_at(params: &DirichletParams, order_stat: impl Fn(u64) -> f64) -> SimplexVector {
    let m = params.total;
    let mut prev = 0.0;
    let v = params
        .cumulative()
        .into_iter()
        .map(|c| {
            let cur = if c == m { 1.0 } else { order_stat(c) };
            let gap = cur - prev;
            prev = cur;
            gap
        })
        .collect();
    SimplexVector { v }
}

/// Draws `Dir(alpha)` through the order-statistic spacings and keeps the sample.
pub fn sample_order_statistics<R: RngCore + ?Sized>(
    params: &DirichletParams,
    rng: &mut R,
) -> OrderStatisticDraw {
    let sorted = sorted_uniforms((params.total - 1) as usize, rng);
    let v = spacings_at(params, |c| sorted[(c - 1) as usize]);
    OrderStatisticDraw { sorted, v }
}

/// Draws `Dir(alpha)` from the spacings of `m - 1` sorted uniforms.
///
/// For `m >= SELECTION_THRESHOLD` only the `k - 1` order statistics that are
/// actually needed are selected, in linear time.
pub fn sample_spacings<R: RngCore + ?Sized>(
    params: &DirichletParams,
    rng: &mut R,
) -> SimplexVector {
    let m = params.total;
    if m < SELECTION_THRESHOLD {
        return sample_order_statistics(params, rng).v;
    }
    let mut u: Vec<f64> = (0..m - 1).map(|_| open_unit(rng)).collect();
    let cuts: Vec<u64> = params.cumulative()[..params.len() - 1].to_vec();
    // Select from the top down so each select only touches the unsorted prefix.
    let mut picked = vec![0.0; cuts.len()];
    let mut hi = u.len();
    for (slot, &c) in cuts.iter().enumerate().rev() {
        let idx = (c - 1) as usize;
        let (_, nth, _) = u[..hi].select_nth_unstable_by(idx, f64::total_cmp);
        picked[slot] = *nth;
        hi = idx;
    }
    let lookup: std::collections::HashMap<u64, f64> =
        cuts.iter().copied().zip(picked.iter().copied()).collect();
    spacings_at(params, |c| lookup[&c])
}

/// Gamma-ratio sampler. Used only as an independent cross-check of the
/// spacings construction.
pub fn sample_gamma<R: RngCore + ?Sized>(params: &DirichletParams, rng: &mut R) -> SimplexVector {
    let mut g: Vec<f64> = params
        .alpha
        .iter()
        .map(|&a| Gamma::new(a as f64, 1.0).expect("alpha >= 1").sample(rng))
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|x| *x /= s);
    SimplexVector { v: g }
}

/// Density of the truncated vector `V#` at `x` (the first `k - 1` coordinates).
pub fn density(params: &DirichletParams, x: &[f64]) -> Result<f64> {
    let k = params.len();
    if x.len() != k - 1 {
        return Err(Error::DimensionMismatch {
            expected: k - 1,
            got: x.len(),
        });
    }
    let last = 1.0 - x.iter().sum::<f64>();
    if x.iter().any(|&xi| !(xi > 0.0)) || !(last > 0.0) {
        return Err(Error::OutsideSimplex);
    }
    let log_kernel: f64 = x
        .iter()
        .chain(std::iter::once(&last))
        .zip(&params.alpha)
        .map(|(&xi, &a)| (a as f64 - 1.0) * xi.ln())
        .sum();
    Ok((log_kernel - params.ln_beta()).exp())
}

/// `E[1/V_j] = (m - 1)/(alpha_j - 1)`, finite only for `alpha_j >= 2`.
pub fn inv_moment(params: &DirichletParams, j: usize) -> Result<f64> {
    params.check_index(j)?;
    let a = params.alpha[j];
    if a < 2 {
        return Err(Error::InfiniteMoment { index: j + 1 });
    }
    Ok((params.total - 1) as f64 / (a - 1) as f64)
}

/// `Var V_j = mu_j (1 - mu_j)/(m + 1)` as an exact fraction.
pub fn component_variance(params: &DirichletParams, j: usize) -> Result<Ratio<u64>> {
    params.check_index(j)?;
    let a = params.alpha[j];
    let m = params.total;
    let den = m
        .checked_mul(m)
        .and_then(|x| x.checked_mul(m + 1))
        .ok_or(Error::Overflow)?;
    Ok(Ratio::new(a * (m - a), den))
}

/// Uniform quantile process `q_{m-1}(u)` of a sorted sample of size `m - 1`.
///
/// The indicator cells are `((i-1)/(m-1), i/(m-1)]`, so `q(0) = 0` and on the
/// first cell `q(u) = sqrt(m-1) (U'_(1) - u)`.
pub fn quantile_process(sorted: &[f64], u: f64) -> f64 {
    let size = sorted.len();
    if size == 0 || u <= 0.0 {
        return 0.0;
    }
    let x = u * size as f64;
    let r = x.round();
    // Snap grid points that floating point lands just above.
    let cell = if (x - r).abs() <= 1e-9 * size as f64 {
        r as usize
    } else {
        x.ceil() as usize
    };
    let cell = cell.clamp(1, size);
    (size as f64).sqrt() * (sorted[cell - 1] - u)
}

/// `q_{m-1}(num/den)` with the cell index computed in integer arithmetic.
pub fn quantile_process_at(sorted: &[f64], num: u64, den: u64) -> f64 {
    let size = sorted.len() as u64;
    let u = num as f64 / den as f64;
    if size == 0 || num == 0 {
        return 0.0;
    }
    let cell = (num * size).div_ceil(den).clamp(1, size);
    (size as f64).sqrt() * (sorted[(cell - 1) as usize] - u)
}
