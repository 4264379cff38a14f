//! Gaussian approximations of the marker process: the strong-approximation
//! right-hand side, the three limiting regimes, and the scaled statistics.
//!
//! The a.s.-bounded remainder terms with unknown constants are dropped, so
//! everything here targets the leading-order law. Comparisons against the urn
//! are distributional only; no coupling with a simulated urn is attempted.

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    cov_from_alpha, cov_simplex, refined_grid, sample_bridge, sample_kiefer, BridgePath, CovModel,
    KieferSheet, MvnSampler,
};
use crate::urn::{composition_statistic, run_direct_at, validate_alpha, UrnState};

/// How far the perturbed Kiefer argument may leave `[0, 1]` before the
/// sample is flagged. It is clamped either way.
pub const CLAMP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    /// `n = o(N)`.
    SmallN,
    /// `n / N -> ν`.
    Proportional,
    /// `N = o(n)`.
    LargeN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    /// Only for [`RegimeKind::Proportional`].
    pub nu: Option<f64>,
    /// Admissible `(a, b)` range for `nu`, `0 < a < b`.
    pub nu_bounds: Option<(f64, f64)>,
    pub big_n: u64,
    pub n: u64,
    pub t_grid: Vec<f64>,
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.big_n == 0 || self.n == 0 {
            return Err(Error::InvalidRegime("N and n must be positive".into()));
        }
        if self.t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidRegime("t_grid must lie in [0, 1]".into()));
        }
        if self.t_grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidRegime("t_grid must be nondecreasing".into()));
        }
        match self.kind {
            RegimeKind::Proportional => {
                let nu = self
                    .nu
                    .ok_or_else(|| Error::InvalidRegime("proportional regime needs nu".into()))?;
                let (a, b) = self.nu_bounds.unwrap_or((f64::MIN_POSITIVE, f64::INFINITY));
                if !(a > 0.0 && a < b) {
                    return Err(Error::InvalidRegime(format!(
                        "nu bounds ({a}, {b}) need 0 < a < b"
                    )));
                }
                if !(nu > a && nu < b) {
                    return Err(Error::InvalidRegime(format!(
                        "nu = {nu} outside ({a}, {b})"
                    )));
                }
            }
            _ => {
                if self.nu.is_some() {
                    return Err(Error::InvalidRegime(
                        "nu is only meaningful in the proportional regime".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Normalization applied to `M(⌊nt⌋) - (N + nt) μ̂#`.
    pub fn scaling(&self) -> Scaling {
        match self.kind {
            RegimeKind::LargeN => Scaling::LargeN {
                factor: (self.big_n as f64).sqrt() / self.n as f64,
            },
            _ => Scaling::Diffusive {
                factor: 1.0 / (self.n as f64).sqrt(),
            },
        }
    }

    fn nu(&self) -> f64 {
        self.nu.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `n^{-1/2}`.
    Diffusive { factor: f64 },
    /// `N^{1/2} n^{-1}`.
    LargeN { factor: f64 },
}

impl Scaling {
    pub fn factor(&self) -> f64 {
        match *self {
            Scaling::Diffusive { factor } | Scaling::LargeN { factor } => factor,
        }
    }
}

/// A `d`-dimensional path on `t_grid`; `values[ti][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxTrajectory {
    pub t_grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub scaling: Scaling,
}

impl ApproxTrajectory {
    /// Concatenation of the values at all grid times.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// `μ̂#`, as exact partial sums of `α` divided by `N`.
fn mu_hat_parts(alpha: &[u64]) -> (u64, Vec<u64>) {
    let big_n = alpha.iter().sum();
    let mut acc = 0;
    let cum = alpha[..alpha.len() - 1]
        .iter()
        .map(|a| {
            acc += a;
            acc
        })
        .collect();
    (big_n, cum)
}

/// Diagnostic sizes of the dropped remainders with unit constants. These are
/// reference scales only, not bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderScales {
    /// `n ln N / N`, the outer remainder.
    pub outer: f64,
    /// `ln N / N`, the perturbation inside the Kiefer argument.
    pub inner: f64,
    /// `ln² n`, the Kiefer approximation remainder.
    pub kiefer: f64,
}

pub fn remainder_scales(big_n: u64, n: u64) -> RemainderScales {
    let ln_n = (big_n as f64).ln();
    let ln_small = if n > 1 { (n as f64).ln() } else { 0.0 };
    RemainderScales {
        outer: n as f64 * ln_n / big_n as f64,
        inner: ln_n / big_n as f64,
        kiefer: ln_small * ln_small,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Sample {
    pub markers: Vec<f64>,
    /// Some perturbed Kiefer argument fell outside `[-0.05, 1.05]`.
    pub flagged: bool,
}

/// `(N+n) μ̂_j + n N^{-1/2} W(μ̂_j) + K(μ̂_j + N^{-1/2} W(μ̂_j), n)` for each
/// marker, with `K(·, n)` read from the last time of `kiefer` that equals
/// `n`. The Kiefer argument is clamped to `[0, 1]` and interpolated.
pub fn theorem1_rhs(
    alpha: &[u64],
    n: u64,
    bridge: &BridgePath,
    kiefer: &KieferSheet,
) -> Result<Theorem1Sample> {
    validate_alpha(alpha)?;
    let (big_n, cum) = mu_hat_parts(alpha);
    if n == 0 {
        return Ok(Theorem1Sample {
            markers: cum.iter().map(|&c| c as f64).collect(),
            flagged: false,
        });
    }
    let ti = kiefer
        .t_grid
        .iter()
        .rposition(|&t| t == n as f64)
        .ok_or_else(|| Error::InvalidGrid(format!("Kiefer sheet has no time t = {n}")))?;
    let root_n = (big_n as f64).sqrt();
    let mut flagged = false;
    let markers = cum
        .iter()
        .map(|&c| {
            let mu = c as f64 / big_n as f64;
            let w = bridge.at(mu);
            let y = mu + w / root_n;
            if !(-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(&y) {
                flagged = true;
            }
            let k = kiefer.at(y.clamp(0.0, 1.0), ti);
            (big_n + n) as f64 * mu + n as f64 / root_n * w + k
        })
        .collect();
    Ok(Theorem1Sample { markers, flagged })
}

/// Draws an independent bridge and Kiefer sheet and evaluates
/// [`theorem1_rhs`]. The bridge lives on the `μ̂_j` points; the sheet on a
/// grid of spacing at most `N^{-1/2}/8` that contains them.
pub fn sample_theorem1<R: RngCore + ?Sized>(
    alpha: &[u64],
    n: u64,
    rng: &mut R,
) -> Result<Theorem1Sample> {
    let (big_n, cum) = mu_hat_parts(alpha);
    let mu: Vec<f64> = cum.iter().map(|&c| c as f64 / big_n as f64).collect();
    let bridge = sample_bridge(&mu, rng)?;
    if n == 0 {
        return theorem1_rhs(alpha, 0, &bridge, &empty_sheet());
    }
    let y = refined_grid((big_n as f64).powf(-0.5) / 8.0, &mu);
    let kiefer = sample_kiefer(&y, &[n as f64], rng)?;
    theorem1_rhs(alpha, n, &bridge, &kiefer)
}

fn empty_sheet() -> KieferSheet {
    KieferSheet {
        y_grid: vec![0.0, 1.0],
        t_grid: vec![],
        values: vec![],
    }
}

/// The Gaussian ingredients of one regime path: `Z^α` and `W^α` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeDraw {
    pub z: Vec<f64>,
    /// `w[ti][j] = K(μ̂_j, t_grid[ti])`.
    pub w: Vec<Vec<f64>>,
}

/// Draws `Z^α ~ N(0, Σ^α)` and, independently, `W^α(t) = K(μ̂, t)`.
pub fn sample_regime_draw<R: RngCore + ?Sized>(
    alpha: &[u64],
    t_grid: &[f64],
    rng: &mut R,
) -> Result<RegimeDraw> {
    let d = alpha.len() - 1;
    let (big_n, cum) = mu_hat_parts(alpha);
    let mu: Vec<f64> = cum.iter().map(|&c| c as f64 / big_n as f64).collect();
    let z = MvnSampler::new(&cov_from_alpha(alpha)?)?.sample(rng).0;
    // The sheet only needs strictly positive increasing times.
    let mut times: Vec<f64> = t_grid.iter().copied().filter(|&t| t > 0.0).collect();
    times.dedup();
    let w = if times.is_empty() {
        vec![vec![0.0; d]; t_grid.len()]
    } else {
        let sheet = sample_kiefer(&mu, &times, rng)?;
        t_grid
            .iter()
            .map(|&t| match times.iter().position(|&s| s == t) {
                Some(ti) => mu.iter().map(|&m| sheet.at(m, ti)).collect(),
                None => vec![0.0; d],
            })
            .collect()
    };
    Ok(RegimeDraw { z, w })
}

/// Combines a draw into the regime's limit path:
/// `W^α(t)`, `ν^{1/2} t Z^α + W^α(t)` or `t Z^α`.
pub fn regime_path(spec: &RegimeSpec, draw: &RegimeDraw) -> ApproxTrajectory {
    let rnu = spec.nu().sqrt();
    let values = spec
        .t_grid
        .iter()
        .zip(&draw.w)
        .map(|(&t, w)| match spec.kind {
            RegimeKind::SmallN => w.clone(),
            RegimeKind::Proportional => {
                draw.z.iter().zip(w).map(|(z, w)| rnu * t * z + w).collect()
            }
            RegimeKind::LargeN => draw.z.iter().map(|z| t * z).collect(),
        })
        .collect();
    ApproxTrajectory {
        t_grid: spec.t_grid.clone(),
        values,
        scaling: spec.scaling(),
    }
}

pub fn corollary1_path<R: RngCore + ?Sized>(
    spec: &RegimeSpec,
    alpha: &[u64],
    rng: &mut R,
) -> Result<ApproxTrajectory> {
    spec.validate()?;
    validate_alpha(alpha)?;
    let draw = sample_regime_draw(alpha, &spec.t_grid, rng)?;
    Ok(regime_path(spec, &draw))
}

/// Covariance of the regime path between times `t1` and `t2`:
/// `(t1∧t2) Σ^α`, `(ν t1 t2 + t1∧t2) Σ^α` or `t1 t2 Σ^α`.
pub fn regime_covariance(
    spec: &RegimeSpec,
    alpha: &[u64],
    t1: f64,
    t2: f64,
) -> Result<DMatrix<f64>> {
    let sigma = cov_from_alpha(alpha)?.sigma;
    let factor = match spec.kind {
        RegimeKind::SmallN => t1.min(t2),
        RegimeKind::Proportional => spec.nu() * t1 * t2 + t1.min(t2),
        RegimeKind::LargeN => t1 * t2,
    };
    Ok(sigma * factor)
}

/// The urn counterpart of a regime path: one urn run, reported at
/// `⌊n t⌋` as `scale · (M(⌊nt⌋) - (N + nt) μ̂#)`.
pub fn urn_regime_path<R: RngCore + ?Sized>(
    spec: &RegimeSpec,
    alpha: &[u64],
    rng: &mut R,
) -> Result<ApproxTrajectory> {
    spec.validate()?;
    let state = UrnState::new(alpha.to_vec())?;
    let (big_n, cum) = mu_hat_parts(alpha);
    let checkpoints: Vec<u64> = spec
        .t_grid
        .iter()
        .map(|&t| (spec.n as f64 * t).floor() as u64)
        .collect();
    let scaling = spec.scaling();
    let s = scaling.factor();
    let values = run_direct_at(&state, &checkpoints, rng)
        .iter()
        .zip(&spec.t_grid)
        .map(|(counts, &t)| {
            let mut m = 0u64;
            cum.iter()
                .zip(counts)
                .map(|(&c, &x)| {
                    m += x;
                    let mean = (big_n as f64 + spec.n as f64 * t) * c as f64 / big_n as f64;
                    s * (m as f64 - mean)
                })
                .collect()
        })
        .collect();
    Ok(ApproxTrajectory {
        t_grid: spec.t_grid.clone(),
        values,
        scaling,
    })
}

/// Both normalizations of the urn at step `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledStatistic {
    /// `(M(n) - (N+n) μ̂#) / ((N+n) n / N)^{1/2}`.
    pub marker: Vec<f64>,
    /// `Ξ(n) = n^{-1/2} (ξ#(n) - (N+n) μ#)`.
    pub xi: Vec<f64>,
}

/// `counts` is the full composition `ξ(n)` (initial balls included).
pub fn scaled_deviation(alpha: &[u64], counts: &[u64], n: u64) -> Result<ScaledStatistic> {
    if counts.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            expected: alpha.len(),
            got: counts.len(),
        });
    }
    let xi = composition_statistic(alpha, counts, n)?;
    let (big_n, cum) = mu_hat_parts(alpha);
    let denom = ((big_n + n) as f64 * n as f64 / big_n as f64).sqrt();
    let total = (big_n + n) as f64;
    let mut m = 0u64;
    let marker = cum
        .iter()
        .zip(counts)
        .map(|(&c, &x)| {
            m += x;
            (m as f64 - total * c as f64 / big_n as f64) / denom
        })
        .collect();
    Ok(ScaledStatistic { marker, xi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticForm {
    /// `Ξ(n)`, limit `(1 + n/N) Σ_{μ#}`.
    Composition,
    /// Marker form, limit `Σ^α`.
    Marker,
}

/// Covariance of the approximating normal for each statistic form.
pub fn limit_law(alpha: &[u64], n: u64, form: StatisticForm) -> Result<CovModel> {
    let big_n = validate_alpha(alpha)?;
    match form {
        StatisticForm::Marker => cov_from_alpha(alpha),
        StatisticForm::Composition => {
            let mu: Vec<f64> = alpha[..alpha.len() - 1]
                .iter()
                .map(|&a| a as f64 / big_n as f64)
                .collect();
            Ok(cov_simplex(&mu)?.scaled(1.0 + n as f64 / big_n as f64))
        }
    }
}
