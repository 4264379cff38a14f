//! Gaussian objects on grids: Brownian bridge, Kiefer sheet, multivariate
//! normals, and the two covariance families attached to a composition.
//!
//! * `Σ_x = diag(x) - xᵀx` for a point `x` of the open simplex corner, with the
//!   closed-form inverse `diag(1/x) + 𝟙ᵀ𝟙 / (1 - x̂_d)`.
//! * `Σ^α = (μ̂_i ∧ μ̂_j - μ̂_i μ̂_j)`, the covariance of the bridge sampled at the
//!   partial sums of `μ = α/N`. It equals `Ĵ Σ_{μ#} Ĵᵀ` with `Ĵ` the
//!   lower-triangular all-ones matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_rational::Ratio;
use num_traits::{One, Zero};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, Role};
use crate::urn::validate_alpha;

/// Eigenvalues above `-PSD_TOLERANCE` are clipped to zero when factorizing.
pub const PSD_TOLERANCE: f64 = 1e-12;

/// Target absolute error for rectangle probabilities.
pub const RECTANGLE_TOLERANCE: f64 = 1e-4;

/// A `d×d` covariance matrix, with its inverse when it is known to exist.
#[derive(Debug, Clone, PartialEq)]
pub struct CovModel {
    pub sigma: DMatrix<f64>,
    pub sigma_inv: Option<DMatrix<f64>>,
    /// Ratio of extreme eigenvalues, when the matrix is nonsingular.
    pub condition: Option<f64>,
}

impl CovModel {
    pub fn new(sigma: DMatrix<f64>) -> Self {
        let sigma_inv = sigma.clone().cholesky().map(|c| c.inverse());
        let condition = sigma_inv.as_ref().map(|_| condition_number(&sigma));
        CovModel {
            sigma,
            sigma_inv,
            condition,
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn scaled(&self, factor: f64) -> CovModel {
        CovModel {
            sigma: &self.sigma * factor,
            sigma_inv: self.sigma_inv.as_ref().map(|s| s / factor),
            condition: self.condition,
        }
    }

    /// Variance of `⟨u, X⟩`.
    pub fn projected_variance(&self, u: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        (u.transpose() * &self.sigma * &u)[(0, 0)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.sigma
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

fn condition_number(sigma: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(sigma.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    max / min
}

/// `Σ_x = diag(x) - xᵀx` with the closed-form inverse.
///
/// On the boundary of the corner (some `x_j = 0` or `Σ x_j = 1`) the matrix is
/// singular and `sigma_inv` is `None`.
pub fn cov_simplex(x: &[f64]) -> Result<CovModel> {
    if x.is_empty() || x.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::OutsideSimplex);
    }
    let total: f64 = x.iter().sum();
    if total > 1.0 {
        return Err(Error::OutsideSimplex);
    }
    let d = x.len();
    let sigma = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            x[i] - x[i] * x[j]
        } else {
            -x[i] * x[j]
        }
    });
    let interior = x.iter().all(|&v| v > 0.0) && total < 1.0;
    if !interior {
        return Ok(CovModel {
            sigma,
            sigma_inv: None,
            condition: None,
        });
    }
    let inv = simplex_inverse(x);
    let condition = Some(condition_number(&sigma));
    Ok(CovModel {
        sigma,
        sigma_inv: Some(inv),
        condition,
    })
}

/// `Σ_x^{-1} = diag(1/x) + 𝟙ᵀ𝟙/(1 - x̂_d)`.
pub fn simplex_inverse(x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let rest = 1.0 - x.iter().sum::<f64>();
    DMatrix::from_fn(d, d, |i, j| {
        let diag = if i == j { 1.0 / x[i] } else { 0.0 };
        diag + 1.0 / rest
    })
}

/// Partial sums `μ̂_1..μ̂_d` of `μ = α / N`.
pub fn mu_hat(alpha: &[u64]) -> Vec<f64> {
    let n: u64 = alpha.iter().sum();
    let mut acc = 0;
    alpha[..alpha.len() - 1]
        .iter()
        .map(|a| {
            acc += a;
            acc as f64 / n as f64
        })
        .collect()
}

/// `Σ^α = (μ̂_i ∧ μ̂_j - μ̂_i μ̂_j)`.
pub fn cov_from_alpha(alpha: &[u64]) -> Result<CovModel> {
    validate_alpha(alpha)?;
    let m = mu_hat(alpha);
    let d = m.len();
    let sigma = DMatrix::from_fn(d, d, |i, j| m[i].min(m[j]) - m[i] * m[j]);
    Ok(CovModel::new(sigma))
}

/// Exact rational matrices for the structural identities.
pub mod exact {
    use super::*;

    pub type Q = Ratio<i128>;
    pub type QMatrix = Vec<Vec<Q>>;

    pub fn mu(alpha: &[u64]) -> Vec<Q> {
        let n: u64 = alpha.iter().sum();
        alpha
            .iter()
            .map(|&a| Q::new(a as i128, n as i128))
            .collect()
    }

    /// `diag(x) - xᵀx`.
    pub fn cov_simplex(x: &[Q]) -> QMatrix {
        let d = x.len();
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let diag = if i == j { x[i] } else { Q::zero() };
                        diag - x[i] * x[j]
                    })
                    .collect()
            })
            .collect()
    }

    /// `diag(1/x) + 𝟙ᵀ𝟙/(1 - x̂_d)`.
    pub fn simplex_inverse(x: &[Q]) -> QMatrix {
        let d = x.len();
        let rest = Q::one() - x.iter().fold(Q::zero(), |a, b| a + b);
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let diag = if i == j { x[i].recip() } else { Q::zero() };
                        diag + rest.recip()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn cov_from_alpha(alpha: &[u64]) -> QMatrix {
        let m = mu(alpha);
        let d = alpha.len() - 1;
        let mut hat = Vec::with_capacity(d);
        let mut acc = Q::zero();
        for x in &m[..d] {
            acc += *x;
            hat.push(acc);
        }
        (0..d)
            .map(|i| (0..d).map(|j| hat[i.min(j)] - hat[i] * hat[j]).collect())
            .collect()
    }

    pub fn matmul(a: &QMatrix, b: &QMatrix) -> QMatrix {
        let n = a.len();
        let p = b[0].len();
        (0..n)
            .map(|i| {
                (0..p)
                    .map(|j| (0..b.len()).fold(Q::zero(), |acc, k| acc + a[i][k] * b[k][j]))
                    .collect()
            })
            .collect()
    }

    pub fn identity(d: usize) -> QMatrix {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if i == j { Q::one() } else { Q::zero() })
                    .collect()
            })
            .collect()
    }

    /// `Ĵ S Ĵᵀ` with `Ĵ` lower-triangular all-ones: `(Ĵ S Ĵᵀ)_{ik} = Σ_{a<=i, b<=k} S_ab`.
    pub fn partial_sum_conjugate(s: &QMatrix) -> QMatrix {
        let d = s.len();
        let j: QMatrix = (0..d)
            .map(|i| {
                (0..d)
                    .map(|k| if k <= i { Q::one() } else { Q::zero() })
                    .collect()
            })
            .collect();
        let jt: QMatrix = (0..d).map(|i| (0..d).map(|k| j[k][i]).collect()).collect();
        matmul(&matmul(&j, s), &jt)
    }
}

/// Zero-mean normal vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVector(pub Vec<f64>);

/// Symmetric square-root factor of a PSD covariance.
#[derive(Debug, Clone)]
pub struct MvnSampler {
    factor: DMatrix<f64>,
}

impl MvnSampler {
    /// Factorizes through the eigen decomposition, clipping eigenvalues in
    /// `[-PSD_TOLERANCE, 0)` to zero.
    pub fn new(cov: &CovModel) -> Result<Self> {
        let eig = SymmetricEigen::new(cov.sigma.clone());
        let min = eig.eigenvalues.min();
        let scale = eig.eigenvalues.amax().max(1.0);
        if min < -PSD_TOLERANCE * scale {
            return Err(Error::NotPsd(min));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(MvnSampler { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> GaussianVector {
        let d = self.factor.ncols();
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        GaussianVector((&self.factor * z).iter().copied().collect())
    }
}

pub fn sample_mvn<R: RngCore + ?Sized>(cov: &CovModel, rng: &mut R) -> Result<GaussianVector> {
    Ok(MvnSampler::new(cov)?.sample(rng))
}

fn check_grid(grid: &[f64], lo: f64, hi: f64, what: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid(format!("{what} grid is empty")));
    }
    if grid.iter().any(|&y| !(y >= lo && y <= hi)) {
        return Err(Error::InvalidGrid(format!(
            "{what} grid leaves [{lo}, {hi}]"
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidGrid(format!(
            "{what} grid is not strictly increasing"
        )));
    }
    Ok(())
}

/// Adds the endpoints 0 and 1 to a strictly increasing grid inside [0, 1].
pub fn closed_unit_grid(grid: &[f64]) -> Result<Vec<f64>> {
    check_grid(grid, 0.0, 1.0, "y")?;
    let mut g = Vec::with_capacity(grid.len() + 2);
    if grid[0] > 0.0 {
        g.push(0.0);
    }
    g.extend_from_slice(grid);
    if *grid.last().unwrap() < 1.0 {
        g.push(1.0);
    }
    Ok(g)
}

/// `points` equally spaced on [0, 1], endpoints included.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    let k = points.max(2) - 1;
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

/// Grid on [0, 1] with spacing at most `max_spacing` that also contains every
/// point in `required`.
pub fn refined_grid(max_spacing: f64, required: &[f64]) -> Vec<f64> {
    let cells = (1.0 / max_spacing).ceil().max(1.0) as usize;
    let mut g = uniform_grid(cells + 1);
    g.extend(required.iter().copied().filter(|&y| y > 0.0 && y < 1.0));
    g.sort_unstable_by(f64::total_cmp);
    g.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    g
}

/// Linear interpolation of `values` over `grid` at `y`, clamped to the grid.
pub fn interpolate(grid: &[f64], values: &[f64], y: f64) -> f64 {
    if y <= grid[0] {
        return values[0];
    }
    let last = grid.len() - 1;
    if y >= grid[last] {
        return values[last];
    }
    let i = grid.partition_point(|&g| g <= y);
    let (g0, g1) = (grid[i - 1], grid[i]);
    let w = (y - g0) / (g1 - g0);
    values[i - 1] * (1.0 - w) + values[i] * w
}

/// Brownian bridge sampled on a grid of [0, 1] that includes both endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgePath {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl BridgePath {
    pub fn at(&self, y: f64) -> f64 {
        interpolate(&self.grid, &self.values, y)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Bridge values on a closed grid: a Wiener path from Gaussian increments,
/// then `W(y) - y W(1)`.
fn bridge_values<R: RngCore + ?Sized>(grid: &[f64], rng: &mut R, out: &mut [f64]) {
    let mut w = 0.0;
    out[0] = 0.0;
    for i in 1..grid.len() {
        let z: f64 = StandardNormal.sample(rng);
        w += (grid[i] - grid[i - 1]).sqrt() * z;
        out[i] = w;
    }
    let w1 = w;
    for (v, &y) in out.iter_mut().zip(grid) {
        *v -= y * w1;
    }
    out[0] = 0.0;
    *out.last_mut().unwrap() = 0.0;
}

pub fn sample_bridge<R: RngCore + ?Sized>(y_grid: &[f64], rng: &mut R) -> Result<BridgePath> {
    let grid = closed_unit_grid(y_grid)?;
    let mut values = vec![0.0; grid.len()];
    bridge_values(&grid, rng, &mut values);
    Ok(BridgePath { grid, values })
}

/// Kiefer sheet `K(y, t)` on `y_grid × t_grid`; `values[ti][yi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KieferSheet {
    pub y_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl KieferSheet {
    /// `K(y, t_grid[ti])`, linearly interpolated in `y`.
    pub fn at(&self, y: f64, ti: usize) -> f64 {
        interpolate(&self.y_grid, &self.values[ti], y)
    }
}

/// Kiefer sheet from independent bridge increments:
/// `K(·, t_i) - K(·, t_{i-1}) = (t_i - t_{i-1})^{1/2} B_i`.
pub fn sample_kiefer<R: RngCore + ?Sized>(
    y_grid: &[f64],
    t_grid: &[f64],
    rng: &mut R,
) -> Result<KieferSheet> {
    let y = closed_unit_grid(y_grid)?;
    check_grid(t_grid, 0.0, f64::INFINITY, "t")?;
    let mut values = Vec::with_capacity(t_grid.len());
    let mut current = vec![0.0; y.len()];
    let mut bridge = vec![0.0; y.len()];
    let mut prev_t = 0.0;
    for &t in t_grid {
        let dt = t - prev_t;
        if dt > 0.0 {
            bridge_values(&y, rng, &mut bridge);
            let s = dt.sqrt();
            current
                .iter_mut()
                .zip(&bridge)
                .for_each(|(c, b)| *c += s * b);
        }
        values.push(current.clone());
        prev_t = t;
    }
    Ok(KieferSheet {
        y_grid: y,
        t_grid: t_grid.to_vec(),
        values,
    })
}

/// Sets whose normal mass can be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GaussianSet {
    /// `{x : ⟨direction, x⟩ <= threshold}`.
    HalfSpace { direction: Vec<f64>, threshold: f64 },
    /// `{x : lower <= x <= upper}`; infinite bounds allowed.
    Rectangle { lower: Vec<f64>, upper: Vec<f64> },
    /// `{x : ‖x‖ <= radius}`; listed so callers can ask, not evaluated.
    Ball { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassEstimate {
    pub value: f64,
    /// Absolute error bound; zero for closed-form evaluations.
    pub error: f64,
}

pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    Normal::standard().cdf(x)
}

fn std_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p.clamp(1e-16, 1.0 - 1e-16))
}

/// Mass of the zero-mean normal law with covariance `cov` on `set`.
///
/// Half-spaces are exact through the projected variance. Rectangles use
/// Genz's sequential conditioning on a randomly shifted Kronecker lattice with
/// a fixed deterministic budget; the returned error is three standard errors
/// across shifts.
pub fn normal_law_mass(cov: &CovModel, set: &GaussianSet) -> Result<MassEstimate> {
    match set {
        GaussianSet::HalfSpace {
            direction,
            threshold,
        } => {
            if direction.len() != cov.dim() {
                return Err(Error::DimensionMismatch {
                    expected: cov.dim(),
                    got: direction.len(),
                });
            }
            Ok(MassEstimate {
                value: half_space_mass(cov.projected_variance(direction), *threshold),
                error: 0.0,
            })
        }
        GaussianSet::Rectangle { lower, upper } => {
            if lower.len() != cov.dim() || upper.len() != cov.dim() {
                return Err(Error::DimensionMismatch {
                    expected: cov.dim(),
                    got: lower.len().min(upper.len()),
                });
            }
            rectangle_mass(&cov.sigma, lower, upper)
        }
        GaussianSet::Ball { .. } => Err(Error::UnsupportedSet("a half-space or rectangle")),
    }
}

/// `P(⟨u, X⟩ <= t)` given `Var⟨u, X⟩`.
pub fn half_space_mass(variance: f64, threshold: f64) -> f64 {
    if variance <= 0.0 {
        return if threshold >= 0.0 { 1.0 } else { 0.0 };
    }
    std_normal_cdf(threshold / variance.sqrt())
}

const KRONECKER_ROOTS: [f64; 12] = [
    1.414_213_562_373_095,
    1.732_050_807_568_877,
    2.236_067_977_499_79,
    2.645_751_311_064_591,
    3.316_624_790_355_4,
    3.605_551_275_463_989,
    4.123_105_625_617_661,
    4.358_898_943_540_674,
    4.795_831_523_312_719,
    5.385_164_807_134_504,
    5.567_764_362_830_022,
    6.082_762_530_298_219,
];

fn rectangle_mass(sigma: &DMatrix<f64>, lower: &[f64], upper: &[f64]) -> Result<MassEstimate> {
    let d = sigma.nrows();
    if lower.iter().zip(upper).any(|(a, b)| a > b) {
        return Ok(MassEstimate {
            value: 0.0,
            error: 0.0,
        });
    }
    if d == 1 {
        let s = sigma[(0, 0)];
        if s <= 0.0 {
            let inside = lower[0] <= 0.0 && 0.0 <= upper[0];
            return Ok(MassEstimate {
                value: if inside { 1.0 } else { 0.0 },
                error: 0.0,
            });
        }
        let sd = s.sqrt();
        return Ok(MassEstimate {
            value: std_normal_cdf(upper[0] / sd) - std_normal_cdf(lower[0] / sd),
            error: 0.0,
        });
    }
    if d - 1 > KRONECKER_ROOTS.len() {
        return Err(Error::UnsupportedSet("dimension at most 13 for rectangles"));
    }
    let chol = sigma.clone().cholesky().ok_or(Error::UnsupportedSet(
        "a positive definite covariance for rectangles",
    ))?;
    let l = chol.l();

    let integrand = |w: &[f64], y: &mut [f64]| -> f64 {
        let mut f = 1.0;
        let mut lo = std_normal_cdf(lower[0] / l[(0, 0)]);
        let mut hi = std_normal_cdf(upper[0] / l[(0, 0)]);
        f *= hi - lo;
        for i in 1..d {
            if f <= 0.0 {
                return 0.0;
            }
            y[i - 1] = std_normal_quantile(lo + w[i - 1] * (hi - lo));
            let s: f64 = (0..i).map(|j| l[(i, j)] * y[j]).sum();
            lo = std_normal_cdf((lower[i] - s) / l[(i, i)]);
            hi = std_normal_cdf((upper[i] - s) / l[(i, i)]);
            f *= hi - lo;
        }
        f
    };

    const SHIFTS: usize = 16;
    let mut points = 1024usize;
    let mut shift_rng = stream(0x5eed_0f_9e, Role::Aux(0xC0DE), 0);
    let shifts: Vec<Vec<f64>> = (0..SHIFTS)
        .map(|_| {
            (0..d - 1)
                .map(|_| rand::Rng::random::<f64>(&mut shift_rng))
                .collect()
        })
        .collect();
    let mut w = vec![0.0; d - 1];
    let mut y = vec![0.0; d];
    loop {
        let means: Vec<f64> = shifts
            .iter()
            .map(|shift| {
                let mut acc = 0.0;
                for k in 1..=points {
                    for (i, wi) in w.iter_mut().enumerate() {
                        let x = (k as f64 * KRONECKER_ROOTS[i] + shift[i]).fract();
                        // baker's transform
                        *wi = 1.0 - (2.0 * x - 1.0).abs();
                    }
                    acc += integrand(&w, &mut y);
                }
                acc / points as f64
            })
            .collect();
        let mean = means.iter().sum::<f64>() / SHIFTS as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (SHIFTS - 1) as f64;
        let error = 3.0 * (var / SHIFTS as f64).sqrt();
        if error <= RECTANGLE_TOLERANCE || points >= 1 << 16 {
            return Ok(MassEstimate {
                value: mean.clamp(0.0, 1.0),
                error,
            });
        }
        points *= 4;
    }
}

#[cfg(test)]
mod tests {
    use super::exact::Q;
    use super::*;
    use crate::rng::par_replicates;
    use crate::stats::empirical_cov;
    use rand::Rng;

    fn q(a: i128, b: i128) -> Q {
        Q::new(a, b)
    }

    #[test]
    fn simplex_covariance_examples() {
        let c = cov_simplex(&[0.5]).unwrap();
        assert!((c.sigma[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((c.sigma_inv.unwrap()[(0, 0)] - 4.0).abs() < 1e-12);

        let c = cov_simplex(&[0.2, 0.3]).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.16, -0.06, -0.06, 0.21]);
        assert!((&c.sigma - want).amax() < 1e-15);
        let inv = c.sigma_inv.unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[7.0, 2.0, 2.0, 16.0 / 3.0]);
        assert!((&inv - want).amax() < 1e-12);

        let x = [q(1, 5), q(3, 10)];
        let prod = exact::matmul(&exact::cov_simplex(&x), &exact::simplex_inverse(&x));
        assert_eq!(prod, exact::identity(2));
    }

    #[test]
    fn near_singular_simplex_inverse() {
        let c = cov_simplex(&[0.999_999]).unwrap();
        assert!(c.condition.unwrap().is_finite());
        let numeric = 1.0 / c.sigma[(0, 0)];
        let closed = c.sigma_inv.unwrap()[(0, 0)];
        assert!(((numeric - closed) / closed).abs() < 1e-6);
    }

    #[test]
    fn boundary_points_have_no_inverse() {
        let c = cov_simplex(&[0.5, 0.5]).unwrap();
        assert!(c.sigma_inv.is_none());
        let c = cov_simplex(&[0.0, 0.4]).unwrap();
        assert!(c.sigma_inv.is_none());
        assert_eq!(cov_simplex(&[0.7, 0.5]), Err(Error::OutsideSimplex));
        assert_eq!(cov_simplex(&[-0.1]), Err(Error::OutsideSimplex));
    }

    #[test]
    fn random_interior_points_invert() {
        let mut rng = stream(1, Role::Aux(1), 0);
        for _ in 0..100 {
            let d = rng.random_range(1..6);
            let raw: Vec<f64> = (0..=d).map(|_| rng.random::<f64>() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            let x: Vec<f64> = raw[..d].iter().map(|v| v / s).collect();
            let c = cov_simplex(&x).unwrap();
            let prod = &c.sigma * c.sigma_inv.as_ref().unwrap();
            assert!((prod - DMatrix::identity(d, d)).amax() < 1e-9);
        }
    }

    #[test]
    fn alpha_covariance_examples() {
        let c = cov_from_alpha(&[1, 1]).unwrap();
        assert!((c.sigma[(0, 0)] - 0.25).abs() < 1e-15);
        assert_eq!(
            exact::cov_from_alpha(&[1, 1, 2]),
            vec![vec![q(3, 16), q(1, 8)], vec![q(1, 8), q(1, 4)]]
        );
        let c = cov_from_alpha(&[1, 1, 2]).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[3.0 / 16.0, 0.125, 0.125, 0.25]);
        assert!((&c.sigma - want).amax() < 1e-15);
    }

    #[test]
    fn partial_sum_conjugation_is_exact() {
        fn compositions(total: u64, parts: usize) -> Vec<Vec<u64>> {
            if parts == 1 {
                return vec![vec![total]];
            }
            (1..=total - (parts as u64 - 1))
                .flat_map(|f| {
                    compositions(total - f, parts - 1)
                        .into_iter()
                        .map(move |mut r| {
                            r.insert(0, f);
                            r
                        })
                })
                .collect()
        }
        for n in 2..=12u64 {
            for parts in 2..=n as usize {
                for alpha in compositions(n, parts) {
                    let mu = exact::mu(&alpha);
                    let lhs = exact::partial_sum_conjugate(&exact::cov_simplex(&mu[..parts - 1]));
                    assert_eq!(lhs, exact::cov_from_alpha(&alpha), "alpha = {alpha:?}");
                }
            }
        }
    }

    #[test]
    fn bridge_endpoints_and_errors() {
        let mut rng = stream(2, Role::Bridge, 0);
        let b = sample_bridge(&[0.25, 0.5, 0.75], &mut rng).unwrap();
        assert_eq!(b.grid, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(b.values[0], 0.0);
        assert_eq!(b.values[4], 0.0);
        assert!(sample_bridge(&[0.5, 0.25], &mut rng).is_err());
        assert!(sample_bridge(&[0.5, 1.5], &mut rng).is_err());
    }

    #[test]
    fn bridge_covariance_quarter_half() {
        let reps = 400_000;
        let products = par_replicates(3, Role::Bridge, reps, |_, rng| {
            let b = sample_bridge(&[0.25, 0.5], rng).unwrap();
            b.values[1] * b.values[2]
        });
        let mean = products.iter().sum::<f64>() / reps as f64;
        let var = products.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!((mean - 0.125).abs() < 4.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn kiefer_vanishes_on_edges_and_matches_covariance() {
        let mut rng = stream(4, Role::Kiefer, 0);
        let k = sample_kiefer(&[0.3, 0.6], &[0.0, 2.0, 5.0], &mut rng).unwrap();
        assert!(k.values[0].iter().all(|&v| v == 0.0));
        for row in &k.values {
            assert_eq!(row[0], 0.0);
            assert_eq!(*row.last().unwrap(), 0.0);
        }
        let reps = 400_000;
        let products = par_replicates(5, Role::Kiefer, reps, |_, rng| {
            let k = sample_kiefer(&[0.3, 0.6], &[2.0, 5.0], rng).unwrap();
            k.values[0][1] * k.values[1][2]
        });
        let mean = products.iter().sum::<f64>() / reps as f64;
        let var = products.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!((mean - 0.24).abs() < 4.0 * se, "{mean} ± {se}");
        assert!(sample_kiefer(&[0.5], &[2.0, 1.0], &mut rng).is_err());
    }

    #[test]
    fn kiefer_fixed_y_is_brownian_and_self_similar() {
        let reps = 200_000;
        let n = 9.0;
        let samples = par_replicates(6, Role::Kiefer, reps, |_, rng| {
            let a = sample_kiefer(&[0.5], &[0.5, 1.0], rng).unwrap();
            let b = sample_kiefer(&[0.5], &[0.5 * n, n], rng).unwrap();
            vec![
                a.values[1][1],
                a.values[0][1],
                b.values[1][1] / n.sqrt(),
                b.values[0][1] / n.sqrt(),
            ]
        });
        let c = empirical_cov(&samples).unwrap().sigma;
        // Var K(1/2, 1) = 1/4, Cov(K(1/2,1), K(1/2,1/2)) = 1/8, for both sheets.
        let tol = 4.0 * 0.25 * (2.0 / reps as f64).sqrt();
        assert!((c[(0, 0)] - 0.25).abs() < tol);
        assert!((c[(2, 2)] - 0.25).abs() < tol);
        assert!((c[(0, 1)] - 0.125).abs() < tol);
        assert!((c[(2, 3)] - 0.125).abs() < tol);
        // independent sheets
        assert!(c[(0, 2)].abs() < tol);
    }

    #[test]
    fn kiefer_fixed_t_is_scaled_bridge() {
        let reps = 200_000;
        let t = 3.0;
        let samples = par_replicates(7, Role::Kiefer, reps, |_, rng| {
            let k = sample_kiefer(&[0.2, 0.7], &[t], rng).unwrap();
            vec![k.values[0][1], k.values[0][2]]
        });
        let c = empirical_cov(&samples).unwrap().sigma;
        let want = [[t * 0.16, t * (0.2 - 0.14)], [t * (0.2 - 0.14), t * 0.21]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((c[(i, j)] - want[i][j]).abs() < 0.02 * t * 0.25);
            }
        }
    }

    #[test]
    fn mvn_examples() {
        let zero = CovModel::new(DMatrix::zeros(2, 2));
        let mut rng = stream(8, Role::Gaussian, 0);
        assert_eq!(sample_mvn(&zero, &mut rng).unwrap().0, vec![0.0, 0.0]);

        let bad = CovModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(MvnSampler::new(&bad), Err(Error::NotPsd(_))));

        let target = cov_from_alpha(&[1, 1, 2]).unwrap();
        let sampler = MvnSampler::new(&target).unwrap();
        let reps = 400_000;
        let xs = par_replicates(9, Role::Gaussian, reps, |_, rng| sampler.sample(rng).0);
        let c = empirical_cov(&xs).unwrap().sigma;
        assert!((&c - &target.sigma).amax() < 4.0 * 0.25 * (2.0 / reps as f64).sqrt());

        let one = cov_from_alpha(&[1, 1]).unwrap();
        let s = MvnSampler::new(&one).unwrap();
        let xs = par_replicates(10, Role::Gaussian, reps, |_, rng| s.sample(rng).0);
        let v = empirical_cov(&xs).unwrap().sigma[(0, 0)];
        assert!((v - 0.25).abs() < 4.0 * 0.25 * (2.0 / reps as f64).sqrt());
    }

    #[test]
    fn rank_deficient_covariance_factorizes() {
        // Σ_x at a boundary point is singular but PSD.
        let c = cov_simplex(&[0.5, 0.5]).unwrap();
        let s = MvnSampler::new(&c).unwrap();
        let mut rng = stream(11, Role::Gaussian, 0);
        let v = s.sample(&mut rng).0;
        // singular direction (1,1): x1 + x2 has zero variance
        assert!((v[0] + v[1]).abs() < 1e-12);
    }

    #[test]
    fn normal_mass_examples() {
        let one = CovModel::new(DMatrix::from_element(1, 1, 1.0));
        let half = |cov: &CovModel, t: f64| {
            normal_law_mass(
                cov,
                &GaussianSet::HalfSpace {
                    direction: vec![1.0],
                    threshold: t,
                },
            )
            .unwrap()
            .value
        };
        assert!((half(&one, 0.0) - 0.5).abs() < 1e-15);
        let quarter = CovModel::new(DMatrix::from_element(1, 1, 0.25));
        assert!((half(&quarter, 0.5) - 0.841_344_746_068_542_9).abs() < 1e-9);

        let id = CovModel::new(DMatrix::identity(2, 2));
        let m = normal_law_mass(
            &id,
            &GaussianSet::Rectangle {
                lower: vec![0.0, 0.0],
                upper: vec![f64::INFINITY, f64::INFINITY],
            },
        )
        .unwrap();
        assert!((m.value - 0.25).abs() < 1e-4);
        assert!(m.error <= RECTANGLE_TOLERANCE);

        assert!(normal_law_mass(&id, &GaussianSet::Ball { radius: 1.0 }).is_err());
        assert!(normal_law_mass(
            &id,
            &GaussianSet::HalfSpace {
                direction: vec![1.0],
                threshold: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn correlated_rectangle_matches_orthant_formula() {
        // P(X>0, Y>0) = 1/4 + asin(ρ)/(2π).
        let rho: f64 = 0.6;
        let cov = CovModel::new(DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]));
        let m = normal_law_mass(
            &cov,
            &GaussianSet::Rectangle {
                lower: vec![0.0, 0.0],
                upper: vec![f64::INFINITY, f64::INFINITY],
            },
        )
        .unwrap();
        let want = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
        assert!((m.value - want).abs() < 1e-4, "{} vs {want}", m.value);

        // trivariate orthant: 1/8 + (asin ρ12 + asin ρ13 + asin ρ23)/(4π)
        let (a, b, c) = (0.3f64, -0.2f64, 0.5f64);
        let cov = CovModel::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, a, b, a, 1.0, c, b, c, 1.0],
        ));
        let m = normal_law_mass(
            &cov,
            &GaussianSet::Rectangle {
                lower: vec![0.0; 3],
                upper: vec![f64::INFINITY; 3],
            },
        )
        .unwrap();
        let want = 0.125 + (a.asin() + b.asin() + c.asin()) / (4.0 * std::f64::consts::PI);
        assert!((m.value - want).abs() < 2e-4, "{} vs {want}", m.value);
    }

    #[test]
    fn interpolation_and_grids() {
        let g = refined_grid(0.3, &[0.25, 0.5]);
        assert!(g.contains(&0.25) && g.contains(&0.5));
        assert!(g
            .windows(2)
            .all(|w| w[1] - w[0] <= 0.3 + 1e-12 && w[1] > w[0]));
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 1.0);
        let grid = [0.0, 0.5, 1.0];
        let vals = [0.0, 2.0, 0.0];
        assert_eq!(interpolate(&grid, &vals, 0.25), 1.0);
        assert_eq!(interpolate(&grid, &vals, 2.0), 0.0);
    }
}
