//! Pólya urn dynamics and the equivalent marker (tissue) view.
//!
//! Colors are indexed from 0 here; color `j` in code is color `j + 1` in the
//! usual mathematical notation. An urn with `d + 1` colors carries `d`
//! markers, the partial sums of the first `d` color counts.

use std::collections::BTreeMap;

use num_rational::Ratio;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::dirichlet::{sample_spacings, DirichletParams, SimplexVector};
use crate::error::{Error, Result};
use crate::rng::open_unit;

/// Largest `N + n` accepted by [`exact_distribution`].
pub const EXACT_CAP: u64 = 20;

/// Composition of a `(d+1)`-color urn after `n` draws.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrnState {
    alpha: Vec<u64>,
    counts: Vec<u64>,
    n: u64,
    initial_total: u64,
}

/// Validates `alpha` as an initial composition: at least two colors, every
/// count positive, and `N > d`.
pub fn validate_alpha(alpha: &[u64]) -> Result<u64> {
    if alpha.len() < 2 {
        return Err(Error::InvalidComposition(format!(
            "need at least 2 colors, got {}",
            alpha.len()
        )));
    }
    if let Some(j) = alpha.iter().position(|&a| a == 0) {
        return Err(Error::InvalidComposition(format!("alpha_{} = 0", j + 1)));
    }
    let total: u64 = alpha.iter().sum();
    let d = alpha.len() as u64 - 1;
    if total <= d {
        return Err(Error::InvalidComposition(format!(
            "N = {total} must exceed d = {d}"
        )));
    }
    Ok(total)
}

impl UrnState {
    pub fn new(alpha: Vec<u64>) -> Result<Self> {
        let initial_total = validate_alpha(&alpha)?;
        Ok(UrnState {
            counts: alpha.clone(),
            alpha,
            n: 0,
            initial_total,
        })
    }

    pub fn alpha(&self) -> &[u64] {
        &self.alpha
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of draws made so far.
    pub fn steps(&self) -> u64 {
        self.n
    }

    /// `N`, the initial number of balls.
    pub fn initial_total(&self) -> u64 {
        self.initial_total
    }

    /// `N + n`.
    pub fn total(&self) -> u64 {
        self.initial_total + self.n
    }

    pub fn colors(&self) -> usize {
        self.alpha.len()
    }

    /// `d`, the number of markers.
    pub fn dim(&self) -> usize {
        self.alpha.len() - 1
    }

    /// Adds one ball of color `j`.
    pub fn add_ball(&mut self, j: usize) {
        self.counts[j] += 1;
        self.n += 1;
    }

    /// One urn draw: color `j` with probability `counts[j] / (N + n)`.
    /// Returns the drawn color.
    pub fn step_direct<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> usize {
        let j = pick_color(&self.counts, self.total(), rng);
        self.add_ball(j);
        j
    }

    pub fn markers(&self) -> MarkerVector {
        let mut acc = 0;
        let m = self.counts[..self.dim()]
            .iter()
            .map(|c| {
                acc += c;
                acc
            })
            .collect();
        MarkerVector {
            m,
            n: self.n,
            sentinel_right: self.total(),
        }
    }
}

#[inline]
fn pick_color<R: RngCore + ?Sized>(counts: &[u64], total: u64, rng: &mut R) -> usize {
    let r = rng.random_range(0..total);
    let mut acc = 0;
    for (j, &c) in counts.iter().enumerate() {
        acc += c;
        if r < acc {
            return j;
        }
    }
    unreachable!("counts sum to total")
}

/// Locations of the `d` marked agents, `M_j(n) = ξ̂_j(n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerVector {
    pub m: Vec<u64>,
    pub n: u64,
    /// `M_{d+1}(n) = N + n`, the current tissue length.
    pub sentinel_right: u64,
}

impl MarkerVector {
    /// Agent at `position` (1-based) divides. Its daughters occupy `position`
    /// and `position + 1`, everything to the right shifts by one, and a mark
    /// on the mother goes to the right daughter. Hence a marker moves iff the
    /// dividing agent sits at or left of it.
    pub fn divide_at(&mut self, position: u64) {
        debug_assert!(position >= 1 && position <= self.sentinel_right);
        for mj in self.m.iter_mut() {
            if position <= *mj {
                *mj += 1;
            }
        }
        self.sentinel_right += 1;
        self.n += 1;
    }

    /// One division event of a uniformly chosen agent.
    pub fn divide_uniform<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> u64 {
        let position = rng.random_range(1..=self.sentinel_right);
        self.divide_at(position);
        position
    }

    /// Recovers the color counts `ξ_j = M_j - M_{j-1}`.
    pub fn counts(&self) -> Vec<u64> {
        let mut prev = 0;
        self.m
            .iter()
            .chain(std::iter::once(&self.sentinel_right))
            .map(|&x| {
                let c = x - prev;
                prev = x;
                c
            })
            .collect()
    }
}

/// Recorded urn path: compositions at steps `0, stride, 2*stride, ...` and
/// always at the final step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub alpha: Vec<u64>,
    pub steps: Vec<u64>,
    pub counts: Vec<Vec<u64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> (u64, &[u64]) {
        let i = self.steps.len() - 1;
        (self.steps[i], &self.counts[i])
    }

    /// Composition recorded at step `n`, if that step was recorded.
    pub fn at(&self, n: u64) -> Option<&[u64]> {
        self.steps
            .binary_search(&n)
            .ok()
            .map(|i| self.counts[i].as_slice())
    }
}

/// Runs `n` direct draws from `state`, recording every `stride` steps.
pub fn run_direct<R: RngCore + ?Sized>(
    state: &UrnState,
    n: u64,
    stride: u64,
    rng: &mut R,
) -> Trajectory {
    let stride = stride.max(1);
    let mut checkpoints: Vec<u64> = (0..=n).step_by(stride as usize).collect();
    if checkpoints.last() != Some(&n) {
        checkpoints.push(n);
    }
    let counts = run_direct_at(state, &checkpoints, rng);
    Trajectory {
        alpha: state.alpha.clone(),
        steps: checkpoints.iter().map(|c| state.n + c).collect(),
        counts,
    }
}

/// Runs direct draws from `state` and returns the composition after each
/// number of further draws listed in `checkpoints` (nondecreasing).
pub fn run_direct_at<R: RngCore + ?Sized>(
    state: &UrnState,
    checkpoints: &[u64],
    rng: &mut R,
) -> Vec<Vec<u64>> {
    let mut counts = state.counts.clone();
    let mut total = state.total();
    let mut done = 0;
    let mut out = Vec::with_capacity(checkpoints.len());
    for &c in checkpoints {
        assert!(c >= done, "checkpoints must be nondecreasing");
        while done < c {
            let j = pick_color(&counts, total, rng);
            counts[j] += 1;
            total += 1;
            done += 1;
        }
        out.push(counts.clone());
    }
    out
}

/// `g(v, u)`: the color `j` with `v̂_{j-1} < u <= v̂_j`.
pub fn select_color(partial_sums: &[f64], u: f64) -> Result<usize> {
    if u <= 0.0 {
        return Err(Error::BoundaryUniform);
    }
    let j = partial_sums.partition_point(|&s| s < u);
    Ok(j.min(partial_sums.len() - 1))
}

/// Unit coordinate vector `w(j)` in `R^colors`.
pub fn unit_vector(j: usize, colors: usize) -> Vec<f64> {
    let mut w = vec![0.0; colors];
    w[j] = 1.0;
    w
}

/// The Dirichlet limit `V` together with the uniforms `U_1..U_n` that drive
/// the conditionally i.i.d. increments `g(V, U_k)`.
#[derive(Debug, Clone)]
pub struct ExchangeableDraw {
    pub v: SimplexVector,
    pub uniforms: Vec<f64>,
    partial: Vec<f64>,
}

impl ExchangeableDraw {
    pub fn new(v: SimplexVector, uniforms: Vec<f64>) -> Self {
        let partial = v.partial_sums();
        ExchangeableDraw {
            v,
            uniforms,
            partial,
        }
    }

    /// `V ~ Dir(alpha)` from uniform spacings, then `n` uniforms on (0, 1).
    pub fn sample<R: RngCore + ?Sized>(alpha: &[u64], n: usize, rng: &mut R) -> Result<Self> {
        validate_alpha(alpha)?;
        let params = DirichletParams::new(alpha.to_vec())?;
        let v = sample_spacings(&params, rng);
        let uniforms = (0..n).map(|_| open_unit(rng)).collect();
        Ok(ExchangeableDraw::new(v, uniforms))
    }

    pub fn partial_sums(&self) -> &[f64] {
        &self.partial
    }

    /// Color of the `k`-th increment (`k` is 1-based).
    pub fn step_exchangeable(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.uniforms.len() {
            return Err(Error::StepIndex {
                index: k,
                len: self.uniforms.len(),
            });
        }
        select_color(&self.partial, self.uniforms[k - 1])
    }

    /// `α + Σ_{k<=n} w(j_k)`.
    pub fn counts_after(&self, alpha: &[u64], n: usize) -> Result<Vec<u64>> {
        let mut counts = alpha.to_vec();
        for k in 1..=n {
            counts[self.step_exchangeable(k)?] += 1;
        }
        Ok(counts)
    }

    /// Right side of the exact marker decomposition
    /// `M_j(n) = (N+n) μ̂_j + n (V̂_j - μ̂_j) + Σ_k (1{U_k <= V̂_j} - V̂_j)`
    /// for marker `j` (0-based, `j < d`).
    pub fn marker_decomposition(&self, alpha: &[u64], j: usize, n: usize) -> f64 {
        let big_n: u64 = alpha.iter().sum();
        let mu_hat = alpha[..=j].iter().sum::<u64>() as f64 / big_n as f64;
        let v_hat = self.partial[j];
        let fluct: f64 = self.uniforms[..n]
            .iter()
            .map(|&u| if u <= v_hat { 1.0 } else { 0.0 } - v_hat)
            .sum();
        (big_n + n as u64) as f64 * mu_hat + n as f64 * (v_hat - mu_hat) + fluct
    }

    /// Right side of `Ξ(n) = n^{1/2}(V# - μ#) + Y(V, n)` with
    /// `Y(V, n) = n^{-1/2} Σ_k (g#(V, U_k) - V#)`.
    pub fn composition_decomposition(&self, alpha: &[u64], n: usize) -> Result<Vec<f64>> {
        let big_n: u64 = alpha.iter().sum();
        let d = alpha.len() - 1;
        let mut y = vec![0.0; d];
        for k in 1..=n {
            let c = self.step_exchangeable(k)?;
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += if i == c { 1.0 } else { 0.0 } - self.v.components()[i];
            }
        }
        let rn = (n as f64).sqrt();
        Ok((0..d)
            .map(|i| {
                let mu = alpha[i] as f64 / big_n as f64;
                rn * (self.v.components()[i] - mu) + y[i] / rn
            })
            .collect())
    }
}

/// `Ξ(n) = n^{-1/2}(ξ#(n) - (N+n) μ#)` computed from the counts.
pub fn composition_statistic(alpha: &[u64], counts: &[u64], n: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::ZeroSteps);
    }
    let big_n: u64 = alpha.iter().sum();
    let rn = (n as f64).sqrt();
    Ok((0..alpha.len() - 1)
        .map(|i| {
            let mean = (big_n + n) as f64 * alpha[i] as f64 / big_n as f64;
            (counts[i] as f64 - mean) / rn
        })
        .collect())
}

/// Exact law of `ξ(n)` by propagating the urn's transition kernel over all
/// reachable compositions in rational arithmetic. Requires `N + n <= 20`.
pub fn exact_distribution(alpha: &[u64], n: u64) -> Result<BTreeMap<Vec<u64>, Ratio<u128>>> {
    let big_n = validate_alpha(alpha)?;
    if big_n + n > EXACT_CAP {
        return Err(Error::SizeCap {
            total: big_n + n,
            cap: EXACT_CAP,
        });
    }
    // Numerators over the common denominator N (N+1) ... (N+step-1).
    let mut layer: BTreeMap<Vec<u64>, u128> = BTreeMap::new();
    layer.insert(alpha.to_vec(), 1);
    let mut denom: u128 = 1;
    for step in 0..n {
        let total = big_n + step;
        let mut next: BTreeMap<Vec<u64>, u128> = BTreeMap::new();
        for (counts, weight) in &layer {
            for j in 0..counts.len() {
                let mut c = counts.clone();
                c[j] += 1;
                let w = weight
                    .checked_mul(counts[j] as u128)
                    .ok_or(Error::Overflow)?;
                *next.entry(c).or_insert(0) += w;
            }
        }
        denom = denom.checked_mul(total as u128).ok_or(Error::Overflow)?;
        layer = next;
    }
    Ok(layer
        .into_iter()
        .map(|(c, w)| (c, Ratio::new(w, denom)))
        .collect())
}

fn rising(x: u128, k: u64) -> Result<u128> {
    (0..k as u128).try_fold(1u128, |acc, i| {
        acc.checked_mul(x + i).ok_or(Error::Overflow)
    })
}

fn binomial(n: u64, k: u64) -> Result<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k as u128 {
        acc = acc.checked_mul(n as u128 - i).ok_or(Error::Overflow)? / (i + 1);
    }
    Ok(acc)
}

/// Law of the number of color-`j` balls added in `n` draws, as exact
/// fractions. This is the beta-binomial pmf
/// `C(n,k) a^(k) b^(n-k) / N^(n)` with `a = α_j`, `b = N - α_j` and `x^(k)` the
/// rising factorial.
pub fn marginal_added_law(alpha: &[u64], j: usize, n: u64) -> Result<Vec<Ratio<u128>>> {
    let big_n = validate_alpha(alpha)?;
    if j >= alpha.len() {
        return Err(Error::ColorIndex {
            index: j,
            colors: alpha.len(),
        });
    }
    let a = alpha[j] as u128;
    let b = (big_n - alpha[j]) as u128;
    let denom = rising(big_n as u128, n)?;
    (0..=n)
        .map(|k| {
            let num = binomial(n, k)?
                .checked_mul(rising(a, k)?)
                .and_then(|x| rising(b, n - k).ok().and_then(|y| x.checked_mul(y)))
                .ok_or(Error::Overflow)?;
            Ok(Ratio::new(num, denom))
        })
        .collect()
}

/// Floating-point beta-binomial law for sizes beyond exact arithmetic.
pub fn marginal_added_law_f64(alpha: &[u64], j: usize, n: u64) -> Result<Vec<f64>> {
    use statrs::function::gamma::ln_gamma;
    let big_n = validate_alpha(alpha)?;
    if j >= alpha.len() {
        return Err(Error::ColorIndex {
            index: j,
            colors: alpha.len(),
        });
    }
    let a = alpha[j] as f64;
    let b = (big_n - alpha[j]) as f64;
    let nf = n as f64;
    let ln_rising = |x: f64, k: f64| ln_gamma(x + k) - ln_gamma(x);
    Ok((0..=n)
        .map(|k| {
            let kf = k as f64;
            let ln_choose = ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0);
            (ln_choose + ln_rising(a, kf) + ln_rising(b, nf - kf) - ln_rising(big_n as f64, nf))
                .exp()
        })
        .collect())
}

/// Physical-time clock of the tissue: a Yule process where each of the `k`
/// living agents divides at rate `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YuleClock {
    pub lambda: f64,
    pub initial_population: u64,
}

impl YuleClock {
    pub fn new(lambda: f64, initial_population: u64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidComposition(format!(
                "division rate must be positive, got {lambda}"
            )));
        }
        if initial_population == 0 {
            return Err(Error::InvalidComposition(
                "initial population must be at least 1".into(),
            ));
        }
        Ok(YuleClock {
            lambda,
            initial_population,
        })
    }

    /// Times `T_1 < ... < T_n` of the first `n` divisions.
    pub fn division_times<R: RngCore + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut t = 0.0;
        (0..n)
            .map(|k| {
                let rate = self.lambda * (self.initial_population + k as u64) as f64;
                t += Exp::new(rate).expect("positive rate").sample(rng);
                t
            })
            .collect()
    }

    /// `E T_n = Σ_{k<n} 1/(λ(N0 + k))`.
    pub fn expected_time(&self, n: usize) -> f64 {
        (0..n)
            .map(|k| 1.0 / (self.lambda * (self.initial_population + k as u64) as f64))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Role};
    use num_traits::{One, Zero};
    use proptest::prelude::*;

    fn r(a: u128, b: u128) -> Ratio<u128> {
        Ratio::new(a, b)
    }

    #[test]
    fn rejects_invalid_alpha() {
        assert!(UrnState::new(vec![3]).is_err());
        assert!(UrnState::new(vec![1, 0]).is_err());
        assert!(UrnState::new(vec![1, 1, 1]).is_ok());
        assert!(validate_alpha(&[1, 1]).is_ok());
    }

    #[test]
    fn first_draw_frequencies() {
        let mut rng = stream(1, Role::Urn, 0);
        let trials = 300_000;
        let mut first = 0;
        for _ in 0..trials {
            let mut s = UrnState::new(vec![2, 1]).unwrap();
            if s.step_direct(&mut rng) == 0 {
                first += 1;
            }
        }
        let p = first as f64 / trials as f64;
        let se = (2.0 / 9.0 / trials as f64).sqrt();
        assert!((p - 2.0 / 3.0).abs() < 4.0 * se);
    }

    #[test]
    fn step_changes_exactly_one_count() {
        let mut rng = stream(2, Role::Urn, 0);
        let mut s = UrnState::new(vec![1, 1]).unwrap();
        let before = s.counts().to_vec();
        let j = s.step_direct(&mut rng);
        assert_eq!(s.steps(), 1);
        assert_eq!(s.counts()[j], before[j] + 1);
        assert_eq!(s.counts()[1 - j], before[1 - j]);
    }

    #[test]
    fn run_direct_shapes() {
        let mut rng = stream(3, Role::Urn, 0);
        let s = UrnState::new(vec![1, 1]).unwrap();
        let t = run_direct(&s, 0, 1, &mut rng);
        assert_eq!(t.len(), 1);
        let t = run_direct(&s, 10_000, 1, &mut rng);
        assert_eq!(t.len(), 10_001);
        let (n, c) = t.last();
        assert_eq!(n, 10_000);
        assert_eq!(c.iter().sum::<u64>(), 2 + 10_000);
        let t = run_direct(&s, 10, 4, &mut rng);
        assert_eq!(t.steps, vec![0, 4, 8, 10]);
        assert!(t.at(8).is_some() && t.at(9).is_none());
    }

    #[test]
    fn markers_are_partial_sums() {
        let mut s = UrnState::new(vec![2, 3, 5]).unwrap();
        let m = s.markers();
        assert_eq!(m.m, vec![2, 5]);
        assert_eq!(m.sentinel_right, 10);
        assert_eq!(UrnState::new(vec![1, 1]).unwrap().markers().m, vec![1]);
        s.add_ball(0);
        assert_eq!(s.markers().m, vec![3, 6]);
        assert_eq!(s.markers().counts(), vec![3, 3, 5]);
    }

    #[test]
    fn division_matches_urn_step() {
        // Dividing the agent at position i is drawing the color whose block contains i.
        let s = UrnState::new(vec![2, 3, 5]).unwrap();
        for pos in 1..=10u64 {
            let mut mk = s.markers();
            mk.divide_at(pos);
            let color = s.markers().m.iter().position(|&mj| pos <= mj).unwrap_or(2);
            let mut s2 = s.clone();
            s2.add_ball(color);
            assert_eq!(mk, s2.markers(), "position {pos}");
        }
    }

    #[test]
    fn g_half_open_intervals() {
        let v = |x: &[f64]| SimplexVector::new(x.to_vec()).unwrap();
        let d = ExchangeableDraw::new(v(&[0.5, 0.5]), vec![0.3, 0.5, 0.9]);
        assert_eq!(d.step_exchangeable(1).unwrap(), 0);
        assert_eq!(d.step_exchangeable(2).unwrap(), 0);
        assert_eq!(d.step_exchangeable(3).unwrap(), 1);
        let d = ExchangeableDraw::new(v(&[0.2, 0.3, 0.5]), vec![0.4]);
        assert_eq!(d.step_exchangeable(1).unwrap(), 1);
        let d = ExchangeableDraw::new(v(&[0.5, 0.5]), vec![0.0]);
        assert_eq!(d.step_exchangeable(1), Err(Error::BoundaryUniform));
        assert!(matches!(
            d.step_exchangeable(2),
            Err(Error::StepIndex { .. })
        ));
        assert_eq!(unit_vector(1, 3), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn exact_distribution_examples() {
        let e = exact_distribution(&[1, 1], 2).unwrap();
        assert_eq!(e.len(), 3);
        for c in [vec![3, 1], vec![2, 2], vec![1, 3]] {
            assert_eq!(e[&c], r(1, 3));
        }
        let e = exact_distribution(&[1, 1], 1).unwrap();
        assert_eq!(e[&vec![2, 1]], r(1, 2));
        assert_eq!(e[&vec![1, 2]], r(1, 2));
        let e = exact_distribution(&[2, 1, 1], 1).unwrap();
        assert_eq!(e[&vec![3, 1, 1]], r(1, 2));
        assert_eq!(e[&vec![2, 2, 1]], r(1, 4));
        assert_eq!(e[&vec![2, 1, 2]], r(1, 4));
        let e = exact_distribution(&[3, 2], 0).unwrap();
        assert_eq!(e[&vec![3, 2]], Ratio::one());
    }

    #[test]
    fn exact_distribution_cap() {
        assert_eq!(
            exact_distribution(&[10, 5], 6),
            Err(Error::SizeCap { total: 21, cap: 20 })
        );
        let e = exact_distribution(&[1, 1, 1, 1], 16).unwrap();
        let total: Ratio<u128> = e.values().fold(Ratio::zero(), |a, b| a + *b);
        assert_eq!(total, Ratio::one());
    }

    #[test]
    fn path_enumeration_oracle_agrees() {
        // Brute force over all color sequences with the product of draw ratios.
        fn brute(alpha: &[u64], n: u64) -> BTreeMap<Vec<u64>, Ratio<u128>> {
            let k = alpha.len() as u64;
            let mut out = BTreeMap::new();
            for code in 0..k.pow(n as u32) {
                let mut c = alpha.to_vec();
                let mut p = Ratio::<u128>::one();
                let mut x = code;
                for _ in 0..n {
                    let j = (x % k) as usize;
                    x /= k;
                    let total: u64 = c.iter().sum();
                    p *= Ratio::new(c[j] as u128, total as u128);
                    c[j] += 1;
                }
                *out.entry(c).or_insert_with(Ratio::zero) += p;
            }
            out
        }
        for (alpha, n) in [(vec![1, 1], 2), (vec![2, 1, 1], 3), (vec![1, 2, 1], 5)] {
            assert_eq!(exact_distribution(&alpha, n).unwrap(), brute(&alpha, n));
        }
    }

    #[test]
    fn marginal_law_examples() {
        assert_eq!(
            marginal_added_law(&[1, 1], 0, 2).unwrap(),
            vec![r(1, 3), r(1, 3), r(1, 3)]
        );
        assert_eq!(
            marginal_added_law(&[4, 3, 2], 1, 0).unwrap(),
            vec![Ratio::one()]
        );
        assert_eq!(
            marginal_added_law(&[2, 2], 0, 1).unwrap(),
            vec![r(1, 2), r(1, 2)]
        );
        assert!(matches!(
            marginal_added_law(&[2, 2], 2, 1),
            Err(Error::ColorIndex { .. })
        ));
    }

    fn compositions(total: u64, parts: usize) -> Vec<Vec<u64>> {
        if parts == 1 {
            return vec![vec![total]];
        }
        (1..=total - (parts as u64 - 1))
            .flat_map(|first| {
                compositions(total - first, parts - 1)
                    .into_iter()
                    .map(move |mut rest| {
                        rest.insert(0, first);
                        rest
                    })
            })
            .collect()
    }

    #[test]
    fn marginal_law_is_marginal_of_exact_distribution() {
        for big_n in 2..=12u64 {
            for parts in 2..=big_n.min(4) as usize {
                for alpha in compositions(big_n, parts) {
                    if validate_alpha(&alpha).is_err() {
                        continue;
                    }
                    for n in 0..=(12 - big_n) {
                        let exact = exact_distribution(&alpha, n).unwrap();
                        for j in 0..alpha.len() {
                            let mut marg = vec![Ratio::<u128>::zero(); n as usize + 1];
                            for (c, p) in &exact {
                                marg[(c[j] - alpha[j]) as usize] += *p;
                            }
                            assert_eq!(marginal_added_law(&alpha, j, n).unwrap(), marg);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn float_marginal_matches_exact() {
        let exact = marginal_added_law(&[3, 5, 2], 1, 9).unwrap();
        let float = marginal_added_law_f64(&[3, 5, 2], 1, 9).unwrap();
        for (e, f) in exact.iter().zip(float) {
            let e = *e.numer() as f64 / *e.denom() as f64;
            assert!((e - f).abs() < 1e-12);
        }
    }

    #[test]
    fn yule_clock_examples() {
        let clock = YuleClock::new(1.0, 2).unwrap();
        assert!((clock.expected_time(2) - 5.0 / 6.0).abs() < 1e-15);
        let mut rng = stream(4, Role::Clock, 0);
        let reps = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..reps {
            let t = clock.division_times(2, &mut rng);
            assert!(t[0] < t[1]);
            sum += t[1];
            sq += t[1] * t[1];
        }
        let mean = sum / reps as f64;
        let sd = ((sq / reps as f64 - mean * mean) / reps as f64).sqrt();
        assert!((mean - 5.0 / 6.0).abs() < 4.0 * sd);

        // doubling the rate halves the times on the same stream
        let fast = YuleClock::new(2.0, 2).unwrap();
        let a = clock.division_times(5, &mut stream(5, Role::Clock, 0));
        let b = fast.division_times(5, &mut stream(5, Role::Clock, 0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x / 2.0 - y).abs() < 1e-12);
        }
        assert!(YuleClock::new(0.0, 1).is_err());
        assert!(YuleClock::new(1.0, 0).is_err());
        assert!((YuleClock::new(1.0, 1).unwrap().expected_time(1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exchangeable_decompositions_hold_pathwise() {
        let alpha = vec![7, 3, 10];
        let mut rng = stream(6, Role::Uniforms, 0);
        for _ in 0..50 {
            let n = 500;
            let draw = ExchangeableDraw::sample(&alpha, n, &mut rng).unwrap();
            let counts = draw.counts_after(&alpha, n).unwrap();
            let state_markers = {
                let mut acc = 0;
                counts[..2]
                    .iter()
                    .map(|c| {
                        acc += c;
                        acc
                    })
                    .collect::<Vec<_>>()
            };
            for j in 0..2 {
                let rhs = draw.marker_decomposition(&alpha, j, n);
                assert!((state_markers[j] as f64 - rhs).abs() < 1e-9);
            }
            let lhs = composition_statistic(&alpha, &counts, n as u64).unwrap();
            let rhs = draw.composition_decomposition(&alpha, n).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(
            composition_statistic(&alpha, &alpha, 0),
            Err(Error::ZeroSteps)
        );
    }

    proptest! {
        #[test]
        fn conservation_and_monotone_counts(
            alpha in proptest::collection::vec(1u64..6, 2..5),
            n in 0u64..300,
            seed in any::<u64>(),
        ) {
            prop_assume!(validate_alpha(&alpha).is_ok());
            let s = UrnState::new(alpha.clone()).unwrap();
            let big_n: u64 = alpha.iter().sum();
            let t = run_direct(&s, n, 7, &mut stream(seed, Role::Urn, 0));
            for (step, c) in t.steps.iter().zip(&t.counts) {
                prop_assert_eq!(c.iter().sum::<u64>() - step, big_n);
                prop_assert!(c.iter().zip(&alpha).all(|(x, a)| x >= a));
            }
        }
    }
}
