//! Empirical-law comparisons: sup-distances over half-space and rectangle
//! families, covariance estimation, KS and energy tests, and the
//! normal-approximation rate scan.
//!
//! The supremum over all convex sets is not computable. Every distance here
//! is a supremum over a finite [`SetFamily`] and is therefore a lower bound
//! for the convex-set distance.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::scaled_deviation;
use crate::error::{Error, Result};
use crate::gaussian::{cov_from_alpha, half_space_mass, normal_law_mass, CovModel, GaussianSet};
use crate::rng::{derive_seed, par_replicates, stream, Role};
use crate::urn::{run_direct_at, validate_alpha, UrnState};

/// Row-major sample of `len` points in `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0);
        Samples { dim, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if dim == 0 {
            return Err(Error::TooFewSamples { got: 0, need: 1 });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Samples { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Applies `x -> A x` to every point.
    pub fn transformed(&self, a: &DMatrix<f64>) -> Samples {
        let d = self.dim;
        let mut data = Vec::with_capacity(self.data.len());
        for r in self.rows() {
            for i in 0..d {
                data.push((0..d).map(|k| a[(i, k)] * r[k]).sum());
            }
        }
        Samples { dim: d, data }
    }
}

/// Running mean and co-moment matrix (Welford, mergeable by Chan's rule).
#[derive(Debug, Clone, PartialEq)]
pub struct CovAccumulator {
    count: u64,
    mean: Vec<f64>,
    comoment: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(dim: usize) -> Self {
        CovAccumulator {
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.comoment[i * d + j] += delta[j] * after;
            }
        }
    }

    pub fn merge(&mut self, other: &CovAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let d = self.mean.len();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(b, a)| b - a)
            .collect();
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] +=
                    other.comoment[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        let denom = (self.count.max(2) - 1) as f64;
        DMatrix::from_fn(d, d, |i, j| self.comoment[i * d + j] / denom)
    }
}

/// Unbiased sample covariance. Needs at least `d + 1` points.
pub fn empirical_cov<S: AsRef<[f64]>>(samples: &[S]) -> Result<CovModel> {
    let d = samples.first().map_or(0, |r| r.as_ref().len());
    if samples.len() < d + 1 || d == 0 {
        return Err(Error::TooFewSamples {
            got: samples.len(),
            need: d + 1,
        });
    }
    let mut acc = CovAccumulator::new(d);
    for s in samples {
        acc.push(s.as_ref());
    }
    Ok(CovModel::new(acc.covariance()))
}

/// Entrywise covariance estimate with standard errors from the sample
/// variance of centered products.
#[derive(Debug, Clone, PartialEq)]
pub struct CovEstimate {
    pub cov: DMatrix<f64>,
    pub se: DMatrix<f64>,
}

/// Covariance of zero-mean coordinates, `E[X_i X_j]`, with standard errors.
/// The mean is known to be zero, so no centering is applied.
pub fn zero_mean_cov_with_se(samples: &Samples) -> CovEstimate {
    let d = samples.dim;
    let n = samples.len() as f64;
    let mut s1 = vec![0.0; d * d];
    let mut s2 = vec![0.0; d * d];
    for r in samples.rows() {
        for i in 0..d {
            let ri = r[i];
            for j in i..d {
                let p = ri * r[j];
                s1[i * d + j] += p;
                s2[i * d + j] += p * p;
            }
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let m = s1[i * d + j] / n;
            let v = (s2[i * d + j] / n - m * m) * n / (n - 1.0);
            cov[(i, j)] = m;
            cov[(j, i)] = m;
            se[(i, j)] = (v / n).sqrt();
            se[(j, i)] = se[(i, j)];
        }
    }
    CovEstimate { cov, se }
}

/// Finite stand-in for the class of convex sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetFamily {
    pub dim: usize,
    /// Unit normals of the half-spaces `{x : ⟨u, x⟩ <= t}`.
    pub directions: Vec<Vec<f64>>,
    /// Increasing thresholds for each direction.
    pub thresholds: Vec<Vec<f64>>,
    /// Axis-aligned boxes `(lower, upper)`.
    pub boxes: Vec<(Vec<f64>, Vec<f64>)>,
    /// Use every threshold in each direction instead of the grid: the exact
    /// supremum over parallel half-spaces, found from the sorted projections.
    #[serde(default)]
    pub all_thresholds: bool,
}

fn halton(index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Deterministic covering of the unit sphere in `R^d`. Every prefix of a
/// longer list is a shorter list (for `d = 2` when the count doubles), so
/// refining the family only adds sets.
pub fn sphere_directions(d: usize, count: usize) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
            for i in 0..d {
                for s in [1.0, -1.0] {
                    let mut e = vec![0.0; d];
                    e[i] = s;
                    out.push(e);
                }
            }
            let mut k = 1u64;
            while out.len() < count {
                let z: Vec<f64> = (0..d)
                    .map(|i| {
                        let u = halton(k, PRIMES[i % PRIMES.len()]).clamp(1e-12, 1.0 - 1e-12);
                        statrs::distribution::ContinuousCDF::inverse_cdf(
                            &statrs::distribution::Normal::standard(),
                            u,
                        )
                    })
                    .collect();
                let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    out.push(z.iter().map(|x| x / norm).collect());
                }
                k += 1;
            }
            out.truncate(count.max(2 * d));
            out
        }
    }
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..k)
        .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
        .collect()
}

/// Half-space thresholds span this many projected standard deviations.
pub const THRESHOLD_SPAN: f64 = 3.0;

impl SetFamily {
    /// `count` directions, each with `per_direction` thresholds equally spaced
    /// over `±THRESHOLD_SPAN` projected standard deviations of `law`.
    pub fn half_spaces(law: &CovModel, count: usize, per_direction: usize) -> SetFamily {
        let d = law.dim();
        let directions = sphere_directions(d, count);
        let thresholds = directions
            .iter()
            .map(|u| {
                let sd = law.projected_variance(u).max(0.0).sqrt();
                linspace(-THRESHOLD_SPAN * sd, THRESHOLD_SPAN * sd, per_direction)
            })
            .collect();
        SetFamily {
            dim: d,
            directions,
            thresholds,
            boxes: Vec::new(),
            all_thresholds: false,
        }
    }

    /// `count` directions, each with the supremum over all thresholds.
    pub fn all_half_spaces(law: &CovModel, count: usize) -> SetFamily {
        let directions = sphere_directions(law.dim(), count);
        SetFamily {
            dim: law.dim(),
            thresholds: vec![Vec::new(); directions.len()],
            directions,
            boxes: Vec::new(),
            all_thresholds: true,
        }
    }

    /// Default family: `2d·32` directions × 64 thresholds plus centered cubes
    /// at 0.5, 1 and 2 marginal standard deviations.
    pub fn default_for(law: &CovModel) -> SetFamily {
        let d = law.dim();
        let mut f = SetFamily::half_spaces(law, 2 * d * 32, 64);
        f.boxes = [0.5, 1.0, 2.0]
            .iter()
            .map(|&c| {
                let upper: Vec<f64> = (0..d).map(|i| c * law.sigma[(i, i)].sqrt()).collect();
                let lower = upper.iter().map(|x| -x).collect();
                (lower, upper)
            })
            .collect();
        f
    }

    /// Number of sets, counting an all-thresholds direction as one.
    pub fn len(&self) -> usize {
        if self.all_thresholds {
            return self.directions.len() + self.boxes.len();
        }
        self.thresholds.iter().map(|t| t.len()).sum::<usize>() + self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A superset: twice the directions (for `d = 2`) and thresholds with
    /// midpoints inserted.
    pub fn refine(&self, law: &CovModel) -> SetFamily {
        let per = self.thresholds.first().map_or(0, |t| t.len());
        let mut f = SetFamily::half_spaces(law, 2 * self.directions.len(), (2 * per).max(2) - 1);
        f.boxes = self.boxes.clone();
        f.all_thresholds = self.all_thresholds;
        f
    }

    /// The image family under `x -> A x`, so that `A`-mapped samples against
    /// `A Σ Aᵀ` see exactly the same sets.
    pub fn transformed(&self, a: &DMatrix<f64>) -> Result<SetFamily> {
        let inv_t = a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidGrid("map is not invertible".into()))?
            .transpose();
        let mut directions = Vec::new();
        let mut thresholds = Vec::new();
        for (u, ts) in self.directions.iter().zip(&self.thresholds) {
            let v = &inv_t * nalgebra::DVector::from_column_slice(u);
            let norm = v.norm();
            directions.push(v.iter().map(|x| x / norm).collect());
            thresholds.push(ts.iter().map(|t| t / norm).collect());
        }
        let is_diag = (0..a.nrows()).all(|i| (0..a.ncols()).all(|j| i == j || a[(i, j)] == 0.0));
        let boxes = if is_diag {
            self.boxes
                .iter()
                .map(|(lo, hi)| {
                    let mut l = Vec::new();
                    let mut h = Vec::new();
                    for i in 0..lo.len() {
                        let (x, y) = (lo[i] * a[(i, i)], hi[i] * a[(i, i)]);
                        l.push(x.min(y));
                        h.push(x.max(y));
                    }
                    (l, h)
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(SetFamily {
            dim: self.dim,
            directions,
            thresholds,
            boxes,
            all_thresholds: self.all_thresholds,
        })
    }
}

/// Which set attains the sup-distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArgMax {
    HalfSpace { direction: usize, threshold: f64 },
    Box { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupDistance {
    pub distance: f64,
    /// Binomial standard error at the maximizing set.
    pub se: f64,
    pub argmax: ArgMax,
}

/// Minimum sample size accepted by [`sup_distance`].
pub const MIN_SUP_SAMPLES: usize = 1000;

/// `max_A |P_emp(A) - Φ_Σ(A)|` over the family.
pub fn sup_distance(samples: &Samples, law: &CovModel, family: &SetFamily) -> Result<SupDistance> {
    if family.is_empty() {
        return Err(Error::EmptyFamily);
    }
    if samples.len() < MIN_SUP_SAMPLES {
        return Err(Error::TooFewSamples {
            got: samples.len(),
            need: MIN_SUP_SAMPLES,
        });
    }
    if samples.dim != law.dim() || family.dim != law.dim() {
        return Err(Error::DimensionMismatch {
            expected: law.dim(),
            got: samples.dim,
        });
    }
    let n = samples.len() as f64;

    let per_direction: Vec<(f64, f64, f64)> = family
        .directions
        .par_iter()
        .zip(&family.thresholds)
        .map(|(u, ts)| {
            let var = law.projected_variance(u);
            let project = |r: &[f64]| -> f64 { r.iter().zip(u).map(|(a, b)| a * b).sum() };
            let mut best = (-1.0, 0.0, 0.0);
            if family.all_thresholds {
                let mut x: Vec<f64> = samples.rows().map(project).collect();
                x.sort_unstable_by(f64::total_cmp);
                // Projections of the same point can differ by rounding only.
                let tie = 1e-12 * var.sqrt().max(1.0);
                let mut i = 0;
                while i < x.len() {
                    let mut j = i;
                    while j + 1 < x.len() && x[j + 1] - x[i] <= tie {
                        j += 1;
                    }
                    let p = half_space_mass(var, x[i]);
                    // Just below the atom, then at it.
                    for cum in [i, j + 1] {
                        let diff = (cum as f64 / n - p).abs();
                        if diff > best.0 {
                            best = (diff, p, x[i]);
                        }
                    }
                    i = j + 1;
                }
                return best;
            }
            // bins[k] counts points whose first threshold at or above them is ts[k]
            let mut bins = vec![0u64; ts.len() + 1];
            for r in samples.rows() {
                bins[ts.partition_point(|&t| t < project(r))] += 1;
            }
            let mut cum = 0u64;
            for (k, &t) in ts.iter().enumerate() {
                cum += bins[k];
                let p = half_space_mass(var, t);
                let diff = (cum as f64 / n - p).abs();
                if diff > best.0 {
                    best = (diff, p, t);
                }
            }
            best
        })
        .collect();

    let mut best = SupDistance {
        distance: -1.0,
        se: 0.0,
        argmax: ArgMax::Box { index: 0 },
    };
    for (i, &(diff, p, t)) in per_direction.iter().enumerate() {
        if diff > best.distance {
            best = SupDistance {
                distance: diff,
                se: (p * (1.0 - p) / n).sqrt(),
                argmax: ArgMax::HalfSpace {
                    direction: i,
                    threshold: t,
                },
            };
        }
    }
    for (i, (lo, hi)) in family.boxes.iter().enumerate() {
        let inside = samples
            .rows()
            .filter(|r| {
                r.iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(x, (a, b))| a <= x && x <= b)
            })
            .count();
        let p = normal_law_mass(
            law,
            &GaussianSet::Rectangle {
                lower: lo.clone(),
                upper: hi.clone(),
            },
        )?
        .value;
        let diff = (inside as f64 / n - p).abs();
        if diff > best.distance {
            best = SupDistance {
                distance: diff,
                se: (p * (1.0 - p) / n).sqrt(),
                argmax: ArgMax::Box { index: i },
            };
        }
    }
    best.distance = best.distance.max(0.0);
    Ok(best)
}

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n - F|`.
pub fn ks_univariate<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<f64> {
    if samples.len() < 10 {
        return Err(Error::TooFewSamples {
            got: samples.len(),
            need: 10,
        });
    }
    let mut xs = samples.to_vec();
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        // Walk over a block of ties so the empirical CDF jumps once.
        let mut j = i;
        while j + 1 < xs.len() && xs[j + 1] == xs[i] {
            j += 1;
        }
        let f = cdf(xs[i]);
        d = d.max(f - i as f64 / n).max((j + 1) as f64 / n - f);
        i = j + 1;
    }
    Ok(d)
}

/// Asymptotic Kolmogorov survival function `P(sqrt(n) D > x)`.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * k * k * x * x).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

/// Critical value of the one-sample KS statistic at `level`, using the
/// asymptotic law with Stephens' finite-sample correction.
pub fn ks_critical(n: usize, level: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 5.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_survival(mid) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root_n = (n as f64).sqrt();
    hi / (root_n + 0.12 + 0.11 / root_n)
}

/// CDF of `Beta(a, b)` for integer parameters, through
/// `P(Beta(a,b) <= x) = P(Binomial(a+b-1, x) >= a)`.
pub fn beta_cdf_integer(a: u64, b: u64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let m = a + b - 1;
    let (lx, l1x) = (x.ln(), (1.0 - x).ln());
    let ln_choose = |n: u64, k: u64| {
        use statrs::function::gamma::ln_gamma;
        ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
    };
    // Pick the shorter tail.
    if a <= m - a + 1 {
        1.0 - (0..a)
            .map(|k| (ln_choose(m, k) + k as f64 * lx + (m - k) as f64 * l1x).exp())
            .sum::<f64>()
    } else {
        (a..=m)
            .map(|k| (ln_choose(m, k) + k as f64 * lx + (m - k) as f64 * l1x).exp())
            .sum::<f64>()
    }
}

/// Energy-distance two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Default permutation budget.
pub const PERMUTATIONS: usize = 1000;

/// Minimum size of each sample in [`two_sample_energy`].
pub const MIN_ENERGY_SAMPLES: usize = 1000;

fn energy_from_sums(saa: f64, sbb: f64, total: f64, na: f64, nb: f64) -> f64 {
    // total = Σ over all ordered pairs; cross = (total - saa - sbb)/2 per ordering
    let sab = (total - saa - sbb) / 2.0;
    2.0 * sab / (na * nb) - saa / (na * na) - sbb / (nb * nb)
}

/// `E = 2 E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic) with a permutation
/// p-value `(1 + #{E_perm >= E}) / (1 + permutations)` from a seeded stream.
pub fn two_sample_energy(
    a: &Samples,
    b: &Samples,
    permutations: usize,
    seed: u64,
) -> Result<EnergyTest> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    let need = MIN_ENERGY_SAMPLES;
    if a.len() < need || b.len() < need {
        return Err(Error::TooFewSamples {
            got: a.len().min(b.len()),
            need,
        });
    }
    let na = a.len();
    let total_n = na + b.len();
    let pooled: Vec<&[f64]> = a.rows().chain(b.rows()).collect();
    let mut labels: Vec<bool> = (0..total_n).map(|i| i < na).collect();
    let mut rng = stream(seed, Role::Permutation, 0);

    let stats: Vec<f64> = if a.dim == 1 {
        let mut order: Vec<usize> = (0..total_n).collect();
        order.sort_by(|&i, &j| pooled[i][0].total_cmp(&pooled[j][0]));
        let xs: Vec<f64> = order.iter().map(|&i| pooled[i][0]).collect();
        let sorted_labels = |l: &[bool]| -> Vec<bool> { order.iter().map(|&i| l[i]).collect() };
        // Σ_{i<j} (x_j - x_i) restricted to same-label pairs, in one sweep.
        let within = |lab: &[bool]| -> (f64, f64) {
            let (mut ca, mut sa, mut cb, mut sb) = (0.0, 0.0, 0.0, 0.0);
            let (mut wa, mut wb) = (0.0, 0.0);
            for (x, &is_a) in xs.iter().zip(lab) {
                if is_a {
                    wa += ca * x - sa;
                    ca += 1.0;
                    sa += x;
                } else {
                    wb += cb * x - sb;
                    cb += 1.0;
                    sb += x;
                }
            }
            (2.0 * wa, 2.0 * wb)
        };
        let all_true = vec![true; total_n];
        let total = within(&all_true).0;
        let mut out = Vec::with_capacity(permutations + 1);
        let (saa, sbb) = within(&sorted_labels(&labels));
        out.push(energy_from_sums(
            saa,
            sbb,
            total,
            na as f64,
            (total_n - na) as f64,
        ));
        for _ in 0..permutations {
            labels.shuffle(&mut rng);
            let (saa, sbb) = within(&sorted_labels(&labels));
            out.push(energy_from_sums(
                saa,
                sbb,
                total,
                na as f64,
                (total_n - na) as f64,
            ));
        }
        out
    } else {
        let dist = |i: usize, j: usize| -> f64 {
            pooled[i]
                .iter()
                .zip(pooled[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut matrix = vec![0.0; total_n * total_n];
        matrix
            .par_chunks_mut(total_n)
            .enumerate()
            .for_each(|(i, row)| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = dist(i, j);
                }
            });
        let row_sums: Vec<f64> = matrix
            .chunks_exact(total_n)
            .map(|r| r.iter().sum())
            .collect();
        let total: f64 = row_sums.iter().sum();
        let perms: Vec<Vec<bool>> = std::iter::once(labels.clone())
            .chain((0..permutations).map(|_| {
                labels.shuffle(&mut rng);
                labels.clone()
            }))
            .collect();
        // Blocks of permutations share one pass over each matrix row.
        const BLOCK: usize = 16;
        perms
            .par_chunks(BLOCK)
            .flat_map_iter(|block| {
                let mut lab_t = vec![0.0f64; total_n * BLOCK];
                for (p, lab) in block.iter().enumerate() {
                    for (k, &l) in lab.iter().enumerate() {
                        lab_t[k * BLOCK + p] = if l { 1.0 } else { 0.0 };
                    }
                }
                let mut saa = [0.0f64; BLOCK];
                let mut sbb = [0.0f64; BLOCK];
                for (i, row) in matrix.chunks_exact(total_n).enumerate() {
                    // (D l_A)_i for every permutation in the block
                    let mut dla = [0.0f64; BLOCK];
                    for (v, l) in row.iter().zip(lab_t.chunks_exact(BLOCK)) {
                        for p in 0..BLOCK {
                            dla[p] += v * l[p];
                        }
                    }
                    for (p, lab) in block.iter().enumerate() {
                        if lab[i] {
                            saa[p] += dla[p];
                        } else {
                            sbb[p] += row_sums[i] - dla[p];
                        }
                    }
                }
                (0..block.len())
                    .map(|p| {
                        energy_from_sums(saa[p], sbb[p], total, na as f64, (total_n - na) as f64)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let observed = stats[0];
    let tol = 1e-12 * observed.abs().max(1e-300);
    let exceed = stats[1..].iter().filter(|&&s| s >= observed - tol).count();
    Ok(EnergyTest {
        statistic: observed.max(0.0),
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

/// How compositions are chosen for each `N` in a rate scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaFamily {
    /// `α = N · weights / Σ weights`; must come out integral.
    Proportional { weights: Vec<u64> },
    /// Explicit compositions; the one with the matching total is used.
    Explicit { alphas: Vec<Vec<u64>> },
}

impl AlphaFamily {
    pub fn alpha_for(&self, big_n: u64) -> Result<Vec<u64>> {
        match self {
            AlphaFamily::Proportional { weights } => {
                let w: u64 = weights.iter().sum();
                if w == 0 || big_n % w != 0 {
                    return Err(Error::InvalidComposition(format!(
                        "N = {big_n} is not a multiple of the weight total {w}"
                    )));
                }
                let alpha: Vec<u64> = weights.iter().map(|x| x * big_n / w).collect();
                validate_alpha(&alpha)?;
                Ok(alpha)
            }
            AlphaFamily::Explicit { alphas } => alphas
                .iter()
                .find(|a| a.iter().sum::<u64>() == big_n)
                .cloned()
                .ok_or_else(|| {
                    Error::InvalidComposition(format!("no composition with N = {big_n}"))
                }),
        }
    }
}

/// Checks `δ ∈ (0, 1/(d+1))` and `α_j >= δN` for every color.
pub fn check_delta(alpha: &[u64], delta: f64) -> Result<()> {
    let big_n = validate_alpha(alpha)?;
    let bound = 1.0 / alpha.len() as f64;
    if !(delta > 0.0 && delta < bound) {
        return Err(Error::DeltaRange { delta, bound });
    }
    let floor = delta * big_n as f64;
    if let Some((j, &a)) = alpha.iter().enumerate().find(|(_, &a)| (a as f64) < floor) {
        return Err(Error::DeltaViolated {
            index: j + 1,
            value: a,
            floor,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateScanConfig {
    pub family: AlphaFamily,
    pub cells: Vec<(u64, u64)>,
    pub replicates: usize,
    pub directions: usize,
    pub thresholds: usize,
    /// Exact supremum over thresholds in each direction; `thresholds` is
    /// then unused.
    #[serde(default)]
    pub all_thresholds: bool,
    pub delta: f64,
    pub seed: u64,
}

/// One `(N, n)` cell of a rate scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub big_n: u64,
    pub n: u64,
    pub alpha: Vec<u64>,
    pub distance: f64,
    pub se: f64,
    pub replicates: usize,
}

/// Least-squares fit of `distance ≈ c1 n^{-1/2} + c2 N^{-1/2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub c1: f64,
    pub c2: f64,
    pub r_squared: Option<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Fewer than two distinct design columns: the fit is not identified.
    pub underdetermined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateScanResult {
    pub cells: Vec<CellResult>,
    pub fit: RateFit,
    /// Which set family stands in for the convex sets.
    pub family_note: String,
}

/// `thresholds` is `None` for the all-thresholds family.
pub fn family_note(directions: usize, thresholds: Option<usize>) -> String {
    let per = match thresholds {
        Some(t) => format!("{t} thresholds"),
        None => "all thresholds".to_string(),
    };
    format!(
        "supremum over {directions} half-space directions x {per} \
         (lower bound for the convex-set distance)"
    )
}

/// Simulates one cell: `replicates` urns run for `n` draws, scaled as
/// `(M(n) - (N+n) μ̂#)/((N+n) n/N)^{1/2}`, compared against `Φ_{Σ^α}`.
pub fn scan_cell(config: &RateScanConfig, big_n: u64, n: u64) -> Result<CellResult> {
    let alpha = config.family.alpha_for(big_n)?;
    check_delta(&alpha, config.delta)?;
    if n == 0 {
        return Err(Error::ZeroSteps);
    }
    let law = cov_from_alpha(&alpha)?;
    let family = if config.all_thresholds {
        SetFamily::all_half_spaces(&law, config.directions)
    } else {
        SetFamily::half_spaces(&law, config.directions, config.thresholds)
    };
    let samples = sample_scaled_markers(
        &alpha,
        n,
        config.replicates,
        derive_seed(config.seed, &[big_n, n]),
    );
    let sd = sup_distance(&samples, &law, &family)?;
    Ok(CellResult {
        big_n,
        n,
        alpha,
        distance: sd.distance,
        se: sd.se,
        replicates: config.replicates,
    })
}

/// Scaled marker statistics `(M(n) - (N+n) μ̂#)/((N+n) n/N)^{1/2}` of `replicates` independent urns.
pub fn sample_scaled_markers(alpha: &[u64], n: u64, replicates: usize, seed: u64) -> Samples {
    let d = alpha.len() - 1;
    let start = UrnState::new(alpha.to_vec()).expect("validated alpha");
    let rows = par_replicates(seed, Role::Urn, replicates, |_, rng| {
        let counts = run_direct_at(&start, &[n], rng).pop().unwrap();
        scaled_deviation(alpha, &counts, n).expect("n >= 1").marker
    });
    let mut data = Vec::with_capacity(replicates * d);
    rows.into_iter().for_each(|r| data.extend(r));
    Samples::new(d, data)
}

pub fn fit_rate_model(cells: &[CellResult]) -> RateFit {
    let x: Vec<[f64; 2]> = cells
        .iter()
        .map(|c| [(c.n as f64).powf(-0.5), (c.big_n as f64).powf(-0.5)])
        .collect();
    let y: Vec<f64> = cells.iter().map(|c| c.distance).collect();
    let mut xtx = Matrix2::<f64>::zeros();
    let mut xty = Vector2::<f64>::zeros();
    for (xi, yi) in x.iter().zip(&y) {
        for a in 0..2 {
            xty[a] += xi[a] * yi;
            for b in 0..2 {
                xtx[(a, b)] += xi[a] * xi[b];
            }
        }
    }
    let scale = xtx.amax().max(f64::MIN_POSITIVE);
    let underdetermined = cells.len() < 2 || xtx.determinant().abs() <= 1e-12 * scale * scale;
    let coef = if underdetermined {
        Vector2::zeros()
    } else {
        xtx.try_inverse()
            .map(|inv| inv * xty)
            .unwrap_or_else(Vector2::zeros)
    };
    let fitted: Vec<f64> = x
        .iter()
        .map(|xi| coef[0] * xi[0] + coef[1] * xi[1])
        .collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if underdetermined || ss_tot <= 0.0 {
        None
    } else {
        Some(1.0 - ss_res / ss_tot)
    };
    RateFit {
        c1: coef[0],
        c2: coef[1],
        r_squared,
        residuals,
        fitted,
        underdetermined,
    }
}

pub fn rate_scan(config: &RateScanConfig) -> Result<RateScanResult> {
    let cells = config
        .cells
        .iter()
        .map(|&(big_n, n)| scan_cell(config, big_n, n))
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_rate_model(&cells);
    Ok(RateScanResult {
        cells,
        fit,
        family_note: family_note(
            config.directions,
            (!config.all_thresholds).then_some(config.thresholds),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::MvnSampler;
    use rand::Rng;
    use statrs::function::beta::beta_reg;

    fn normal_samples(cov: &CovModel, n: usize, seed: u64) -> Samples {
        let s = MvnSampler::new(cov).unwrap();
        let rows = par_replicates(seed, Role::Gaussian, n, |_, rng| s.sample(rng).0);
        Samples::from_rows(&rows).unwrap()
    }

    #[test]
    fn covariance_of_constant_samples_is_zero() {
        let rows = vec![vec![3.0, -1.0]; 50];
        let c = empirical_cov(&rows).unwrap();
        assert!(c.sigma.amax() == 0.0);
        assert!(matches!(
            empirical_cov(&[vec![1.0, 2.0], vec![0.0, 1.0]]),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn pooled_halves_match_whole() {
        let mut rng = stream(1, Role::Aux(2), 0);
        let rows: Vec<Vec<f64>> = (0..1001)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>() * 3.0, rng.random()])
            .collect();
        let mut whole = CovAccumulator::new(3);
        let mut even = CovAccumulator::new(3);
        let mut odd = CovAccumulator::new(3);
        for (i, r) in rows.iter().enumerate() {
            whole.push(r);
            if i % 2 == 0 {
                even.push(r)
            } else {
                odd.push(r)
            }
        }
        even.merge(&odd);
        assert!((whole.covariance() - even.covariance()).amax() < 1e-12);
        assert_eq!(whole.count(), even.count());
    }

    #[test]
    fn covariance_of_quarter_variance_law() {
        let law = cov_from_alpha(&[1, 1]).unwrap();
        let s = normal_samples(&law, 100_000, 2);
        let rows: Vec<&[f64]> = s.rows().collect();
        let c = empirical_cov(&rows).unwrap().sigma[(0, 0)];
        assert!((c - 0.25).abs() < 4.0 * 0.25 * (2.0 / 1e5f64).sqrt());
    }

    #[test]
    fn ks_examples() {
        let n = 1000;
        let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_univariate(&grid, |x| x).unwrap() <= 1.0 / n as f64 + 1e-12);
        let half = vec![0.5; 100];
        assert!((ks_univariate(&half, |x| x).unwrap() - 0.5).abs() < 1e-12);
        assert!(ks_univariate(&[0.1; 5], |x| x).is_err());
    }

    #[test]
    fn ks_uniform_calibration() {
        let crit = ks_critical(100_000, 0.01);
        assert!((crit * (1e5f64).sqrt() - 1.628).abs() < 0.01);
        let runs = 60;
        let pass = (0..runs)
            .filter(|&r| {
                let mut rng = stream(3, Role::Uniforms, r);
                let xs: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
                ks_univariate(&xs, |x| x.clamp(0.0, 1.0)).unwrap() < crit
            })
            .count();
        assert!(pass as f64 >= 0.95 * runs as f64);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Known quantiles of the Kolmogorov distribution.
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.628) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn integer_beta_cdf_matches_incomplete_beta() {
        for (a, b) in [(1, 1), (2, 2), (1, 3), (5, 5), (3, 7), (9, 1)] {
            for i in 1..20 {
                let x = i as f64 / 20.0;
                let want = beta_reg(a as f64, b as f64, x);
                assert!((beta_cdf_integer(a, b, x) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_mass_distance() {
        let law = CovModel::new(DMatrix::from_element(1, 1, 1.0));
        let family = SetFamily::half_spaces(&law, 2, 65);
        let s = Samples::new(1, vec![0.0; 2000]);
        let d = sup_distance(&s, &law, &family).unwrap();
        assert!((d.distance - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_thresholds_dominates_every_grid() {
        let law = cov_from_alpha(&[1, 1, 2]).unwrap();
        // Lattice-valued samples, where the grid placement matters most.
        let base = normal_samples(&law, 5_000, 13);
        let s = Samples::new(
            2,
            base.data.iter().map(|x| (x * 8.0).round() / 8.0).collect(),
        );
        let full = sup_distance(&s, &law, &SetFamily::all_half_spaces(&law, 32)).unwrap();
        for per in [8, 33, 64, 257] {
            let grid = sup_distance(&s, &law, &SetFamily::half_spaces(&law, 32, per)).unwrap();
            assert!(grid.distance <= full.distance + 1e-12);
        }
        let point = Samples::new(1, vec![0.0; 2000]);
        let one = CovModel::new(DMatrix::from_element(1, 1, 1.0));
        let d = sup_distance(&point, &one, &SetFamily::all_half_spaces(&one, 2)).unwrap();
        assert!((d.distance - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sup_distance_errors() {
        let law = CovModel::new(DMatrix::identity(2, 2));
        let family = SetFamily {
            dim: 2,
            directions: vec![],
            thresholds: vec![],
            boxes: vec![],
            all_thresholds: false,
        };
        let s = Samples::new(2, vec![0.0; 4000]);
        assert_eq!(sup_distance(&s, &law, &family), Err(Error::EmptyFamily));
        let family = SetFamily::half_spaces(&law, 8, 8);
        let small = Samples::new(2, vec![0.0; 20]);
        assert!(matches!(
            sup_distance(&small, &law, &family),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn self_consistency_distance_is_small() {
        let law = cov_from_alpha(&[1, 1, 2]).unwrap();
        let s = normal_samples(&law, 1_000_000, 4);
        let family = SetFamily::half_spaces(&law, 64, 64);
        let d = sup_distance(&s, &law, &family).unwrap();
        assert!(d.distance <= 0.005, "distance {}", d.distance);
    }

    #[test]
    fn shift_increases_distance() {
        let law = CovModel::new(DMatrix::identity(2, 2));
        let base = normal_samples(&law, 20_000, 5);
        let family = SetFamily::half_spaces(&law, 16, 33);
        let mut last = 0.0;
        for (i, delta) in [0.0, 0.1, 0.2, 0.4].iter().enumerate() {
            let mut shifted = base.clone();
            shifted.data.iter_mut().step_by(2).for_each(|x| *x += delta);
            let d = sup_distance(&shifted, &law, &family).unwrap().distance;
            if i > 0 {
                assert!(d > last, "{d} <= {last} at delta {delta}");
            }
            last = d;
        }
    }

    #[test]
    fn refinement_never_decreases_distance() {
        let law = cov_from_alpha(&[1, 1, 2]).unwrap();
        let s = normal_samples(&law, 5_000, 6);
        let coarse = SetFamily::default_for(&law);
        let fine = coarse.refine(&law);
        let finer = fine.refine(&law);
        let a = sup_distance(&s, &law, &coarse).unwrap().distance;
        let b = sup_distance(&s, &law, &fine).unwrap().distance;
        let c = sup_distance(&s, &law, &finer).unwrap().distance;
        assert!(a <= b && b <= c);
    }

    #[test]
    fn affine_invariance() {
        let law = cov_from_alpha(&[2, 1, 3]).unwrap();
        let s = normal_samples(&law, 5_000, 7);
        let family = SetFamily::default_for(&law);
        let base = sup_distance(&s, &law, &family).unwrap().distance;
        let maps = [
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]),
            DMatrix::from_row_slice(2, 2, &[-3.0, 0.0, 0.0, 1.5]),
        ];
        for a in maps {
            let law_a = CovModel::new(&a * &law.sigma * a.transpose());
            let fam_a = family.transformed(&a).unwrap();
            let s_a = s.transformed(&a);
            let d = sup_distance(&s_a, &law_a, &fam_a).unwrap().distance;
            // Permutations drop boxes only when off-diagonal; compare half-space parts.
            let half_only = SetFamily {
                boxes: vec![],
                ..family.clone()
            };
            let fam_half = SetFamily {
                boxes: vec![],
                ..fam_a.clone()
            };
            let d0 = sup_distance(&s, &law, &half_only).unwrap().distance;
            let d1 = sup_distance(&s_a, &law_a, &fam_half).unwrap().distance;
            assert!((d0 - d1).abs() < 1e-9, "{d0} vs {d1}");
            if fam_a.boxes.len() == family.boxes.len() {
                assert!((d - base).abs() < 2e-4);
            }
        }
    }

    #[test]
    fn energy_identical_samples_is_zero() {
        let law = CovModel::new(DMatrix::identity(2, 2));
        let a = normal_samples(&law, 1000, 8);
        let t = two_sample_energy(&a, &a, 50, 1).unwrap();
        assert!(t.statistic.abs() < 1e-12);
        assert!(two_sample_energy(&a, &Samples::new(1, vec![0.0; 1000]), 10, 1).is_err());
    }

    #[test]
    fn energy_detects_unit_shift_in_one_dimension() {
        let law = CovModel::new(DMatrix::from_element(1, 1, 1.0));
        let a = normal_samples(&law, 10_000, 9);
        let mut b = normal_samples(&law, 10_000, 10);
        b.data.iter_mut().for_each(|x| *x += 1.0);
        let t = two_sample_energy(&a, &b, PERMUTATIONS, 2).unwrap();
        assert!(t.p_value < 0.001 + 1e-12, "p = {}", t.p_value);
    }

    #[test]
    fn energy_one_dimensional_path_matches_matrix_path() {
        // Same statistic through the sorted sweep and the distance matrix.
        let law = CovModel::new(DMatrix::from_element(1, 1, 1.0));
        let a = normal_samples(&law, 1000, 11);
        let b = normal_samples(&law, 1200, 12);
        let fast = two_sample_energy(&a, &b, 0, 3).unwrap().statistic;
        let pad = |s: &Samples| Samples::new(2, s.data.iter().flat_map(|&x| [x, 0.0]).collect());
        let slow = two_sample_energy(&pad(&a), &pad(&b), 0, 3)
            .unwrap()
            .statistic;
        assert!((fast - slow).abs() < 1e-9 * fast.abs().max(1.0));
    }

    #[test]
    fn energy_null_calibration() {
        let law = CovModel::new(DMatrix::identity(2, 2));
        let runs = 40;
        let rejections = (0..runs)
            .filter(|&r| {
                let pool = normal_samples(&law, 2000, 100 + r);
                let (x, y) = pool.data.split_at(2000);
                let t = two_sample_energy(
                    &Samples::new(2, x.to_vec()),
                    &Samples::new(2, y.to_vec()),
                    200,
                    r,
                )
                .unwrap();
                t.p_value < 0.05
            })
            .count();
        // Binomial(40, 0.05): P(X >= 8) < 0.01
        assert!(rejections < 8, "{rejections} rejections");
    }

    #[test]
    fn delta_checks() {
        assert!(check_delta(&[25, 25, 50], 0.2).is_ok());
        assert!(matches!(
            check_delta(&[1, 8, 1], 0.3),
            Err(Error::DeltaViolated { index: 1, value: 1, floor }) if (floor - 3.0).abs() < 1e-12
        ));
        assert!(matches!(
            check_delta(&[5, 5], 0.6),
            Err(Error::DeltaRange { .. })
        ));
    }

    #[test]
    fn alpha_family_resolution() {
        let f = AlphaFamily::Proportional {
            weights: vec![1, 1, 2],
        };
        assert_eq!(f.alpha_for(100).unwrap(), vec![25, 25, 50]);
        assert!(f.alpha_for(101).is_err());
        let f = AlphaFamily::Explicit {
            alphas: vec![vec![1, 2], vec![3, 3]],
        };
        assert_eq!(f.alpha_for(6).unwrap(), vec![3, 3]);
        assert!(f.alpha_for(7).is_err());
    }

    #[test]
    fn fit_flags_single_cell() {
        let cell = CellResult {
            big_n: 100,
            n: 100,
            alpha: vec![25, 25, 50],
            distance: 0.03,
            se: 0.001,
            replicates: 10,
        };
        let fit = fit_rate_model(&[cell.clone()]);
        assert!(fit.underdetermined);
        assert!(fit.r_squared.is_none());

        // Exact model data is fitted exactly.
        let cells: Vec<CellResult> = [(100u64, 100u64), (100, 400), (400, 100), (400, 400)]
            .iter()
            .map(|&(big_n, n)| CellResult {
                big_n,
                n,
                distance: 0.3 / (n as f64).sqrt() + 0.1 / (big_n as f64).sqrt(),
                ..cell.clone()
            })
            .collect();
        let fit = fit_rate_model(&cells);
        assert!(!fit.underdetermined);
        assert!((fit.c1 - 0.3).abs() < 1e-12 && (fit.c2 - 0.1).abs() < 1e-12);
        assert!((fit.r_squared.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_rate_scan_runs() {
        let config = RateScanConfig {
            family: AlphaFamily::Proportional {
                weights: vec![1, 1, 2],
            },
            cells: vec![(40, 40), (80, 80)],
            replicates: 2000,
            directions: 16,
            thresholds: 16,
            all_thresholds: false,
            delta: 0.2,
            seed: 5,
        };
        let r = rate_scan(&config).unwrap();
        assert_eq!(r.cells.len(), 2);
        assert!(r
            .cells
            .iter()
            .all(|c| (0.0..=1.0).contains(&c.distance) && c.se > 0.0));
        assert!(r.family_note.contains("half-space"));
        let bad = RateScanConfig {
            family: AlphaFamily::Explicit {
                alphas: vec![vec![1, 8, 1]],
            },
            cells: vec![(10, 10)],
            delta: 0.3,
            ..config
        };
        assert!(matches!(rate_scan(&bad), Err(Error::DeltaViolated { .. })));
    }
}
