//! Experiment orchestration: TOML configuration, reproducible execution,
//! run directories and plot-data export.
//!
//! A run directory holds:
//! - `config.toml`, the canonical config echo;
//! - `manifest.json`, with the config hash, seed and version;
//! - `report.json`, the typed report;
//! - `results.csv` or `results.json`, long-format records;
//! - `cells.jsonl`, append-only per-cell records (rate scans only);
//! - `runtime.json`, with wall time and thread count.
//!
//! Only `runtime.json` depends on the machine. Everything else is a function
//! of the canonical config, so it matches byte for byte across reruns and
//! thread counts.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::approx::{
    corollary1_path, regime_covariance, remainder_scales, sample_theorem1, urn_regime_path,
    RegimeKind, RegimeSpec, RemainderScales,
};
use crate::error::Error as ModelError;
use crate::gaussian::cov_from_alpha;
use crate::rng::{par_replicates, par_tally, Role};
use crate::stats::{
    check_delta, family_note, fit_rate_model, scan_cell, sup_distance, two_sample_energy,
    zero_mean_cov_with_se, AlphaFamily, CellResult, EnergyTest, RateFit, RateScanConfig, Samples,
    SetFamily, SupDistance, MIN_SUP_SAMPLES, PERMUTATIONS,
};
use crate::urn::{exact_distribution, validate_alpha, ExchangeableDraw, UrnState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("i/o error at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

fn config_err(field: &str, message: impl ToString) -> HarnessError {
    HarnessError::Config {
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn io_err(path: &Path, e: impl ToString) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Approximate,
    VerifyRegime,
    RateScan,
    OracleCheck,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    #[default]
    Json,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub kind: RegimeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_bounds: Option<(f64, f64)>,
    pub big_n: u64,
    pub n: u64,
    pub t_grid: Vec<f64>,
    /// Composition shape; `α = N · weights / Σ weights`. Falls back to the
    /// top-level `alpha`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<u64>>,
    /// Number of energy two-sample tests between urn and limit paths.
    #[serde(default)]
    pub energy_runs: usize,
    #[serde(default = "default_energy_samples")]
    pub energy_samples: usize,
}

fn default_energy_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateScanSection {
    pub family: AlphaFamily,
    pub big_n: Vec<u64>,
    pub n: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
    #[serde(default = "default_thresholds")]
    pub thresholds: usize,
    /// Exact supremum over thresholds per direction.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub all_thresholds: bool,
}

fn default_thresholds() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Worker threads; 0 or absent uses the rayon default. Not part of the
    /// canonical config.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    /// Floor `α_j >= δN`, required for rate scans.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_scan: Option<RateScanSection>,
    #[serde(default, skip_serializing_if = "is_default_output")]
    pub output: OutputConfig,
}

fn default_replicates() -> usize {
    10_000
}

fn is_default_output(o: &OutputConfig) -> bool {
    *o == OutputConfig::default()
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub kind: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> HarnessResult<Self> {
        toml::from_str(text).map_err(|e| config_err("config", e.message()))
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> HarnessResult<()> {
        if let Some(k) = o.kind {
            match self.kind {
                Some(existing) if existing != k => {
                    return Err(config_err(
                        "kind",
                        format!("config declares {existing:?} but {k:?} was requested"),
                    ))
                }
                _ => self.kind = Some(k),
            }
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.replicates {
            self.replicates = r;
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some(d) = &o.out {
            self.output.dir = Some(d.clone());
        }
        if let Some(f) = o.format {
            self.output.format = f;
        }
        Ok(())
    }

    /// The part of the config that determines results: no thread count and
    /// no output location.
    pub fn canonical(&self) -> ExperimentConfig {
        ExperimentConfig {
            threads: None,
            output: OutputConfig::default(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().to_toml().as_bytes()))
    }

    fn kind(&self) -> HarnessResult<ExperimentKind> {
        self.kind
            .ok_or_else(|| config_err("kind", "no experiment kind given"))
    }

    fn alpha_field(&self) -> HarnessResult<Vec<u64>> {
        let alpha = self
            .alpha
            .clone()
            .ok_or_else(|| config_err("alpha", "required for this experiment"))?;
        validate_alpha(&alpha).map_err(|e| config_err("alpha", e))?;
        Ok(alpha)
    }

    fn n_field(&self) -> HarnessResult<u64> {
        match self.n {
            Some(0) | None => Err(config_err("n", "a positive step count is required")),
            Some(n) => Ok(n),
        }
    }

    /// Field-level validation of everything the chosen experiment reads.
    pub fn validate(&self) -> HarnessResult<()> {
        if self.replicates == 0 {
            return Err(config_err("replicates", "must be at least 1"));
        }
        match self.kind()? {
            ExperimentKind::Simulate | ExperimentKind::Approximate => {
                self.alpha_field()?;
                self.n_field()?;
            }
            ExperimentKind::OracleCheck => {
                let alpha = self.alpha_field()?;
                let n = self.n_field()?;
                let total = alpha.iter().sum::<u64>() + n;
                if total > crate::urn::EXACT_CAP {
                    return Err(config_err(
                        "n",
                        format!(
                            "N + n = {total} exceeds the exact cap {}",
                            crate::urn::EXACT_CAP
                        ),
                    ));
                }
            }
            ExperimentKind::VerifyRegime => {
                self.regime_setup()?;
            }
            ExperimentKind::RateScan => {
                self.rate_scan_setup()?;
            }
        }
        Ok(())
    }

    fn regime_setup(&self) -> HarnessResult<(RegimeSpec, Vec<u64>, usize, usize)> {
        let r = self
            .regime
            .as_ref()
            .ok_or_else(|| config_err("regime", "required for verify-regime"))?;
        let spec = RegimeSpec {
            kind: r.kind,
            nu: r.nu,
            nu_bounds: r.nu_bounds,
            big_n: r.big_n,
            n: r.n,
            t_grid: r.t_grid.clone(),
        };
        spec.validate().map_err(|e| config_err("regime", e))?;
        let alpha = match &r.weights {
            Some(w) => AlphaFamily::Proportional { weights: w.clone() }
                .alpha_for(r.big_n)
                .map_err(|e| config_err("regime.weights", e))?,
            None => {
                let a = self.alpha_field()?;
                if a.iter().sum::<u64>() != r.big_n {
                    return Err(config_err("alpha", "must sum to regime.big_n"));
                }
                a
            }
        };
        if r.energy_runs > 0 && r.energy_samples < crate::stats::MIN_ENERGY_SAMPLES {
            return Err(config_err(
                "regime.energy_samples",
                format!("must be at least {}", crate::stats::MIN_ENERGY_SAMPLES),
            ));
        }
        Ok((spec, alpha, r.energy_runs, r.energy_samples))
    }

    fn rate_scan_setup(&self) -> HarnessResult<RateScanConfig> {
        let r = self
            .rate_scan
            .as_ref()
            .ok_or_else(|| config_err("rate_scan", "required for rate-scan"))?;
        let delta = self
            .delta
            .ok_or_else(|| config_err("delta", "required for rate-scan"))?;
        if r.big_n.is_empty() || r.n.is_empty() {
            return Err(config_err("rate_scan", "the (N, n) grid is empty"));
        }
        if let Some(&n) = r.n.iter().find(|&&n| n == 0) {
            return Err(config_err(
                "rate_scan.n",
                format!("step count {n} must be positive"),
            ));
        }
        let mut dim = None;
        for &big_n in &r.big_n {
            let alpha = r
                .family
                .alpha_for(big_n)
                .map_err(|e| config_err("rate_scan.family", e))?;
            check_delta(&alpha, delta).map_err(|e| config_err("delta", e))?;
            dim = Some(alpha.len() - 1);
        }
        if self.replicates < MIN_SUP_SAMPLES {
            return Err(config_err(
                "replicates",
                format!("rate scans need at least {MIN_SUP_SAMPLES}"),
            ));
        }
        let d = dim.unwrap_or(1);
        let cells = r
            .big_n
            .iter()
            .flat_map(|&big_n| r.n.iter().map(move |&n| (big_n, n)))
            .collect();
        Ok(RateScanConfig {
            family: r.family.clone(),
            cells,
            replicates: self.replicates,
            directions: r.directions.unwrap_or(2 * d * 32),
            thresholds: r.thresholds,
            all_thresholds: r.all_thresholds,
            delta,
            seed: self.seed,
        })
    }
}

/// One long-format output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub statistic: String,
    pub index: String,
    pub value: f64,
    pub reference: Option<f64>,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub estimate: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub alpha: Vec<u64>,
    pub n: u64,
    /// Scaled marker statistic, against `Σ^α`.
    pub marker_cov: MatrixEstimate,
    /// `Ξ(n)`, against `(1 + n/N) Σ_μ#`.
    pub xi_cov: MatrixEstimate,
    pub sup_distance: Option<SupDistance>,
    pub family_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximateSummary {
    pub alpha: Vec<u64>,
    pub n: u64,
    pub mean: Vec<f64>,
    /// Deviation `M - (N+n) μ̂#` of the approximation, against the exact urn
    /// covariance `n (N+n)/(N+1) Σ^α`.
    pub cov: MatrixEstimate,
    pub flagged: usize,
    pub remainder_scales: RemainderScales,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovTrace {
    pub t1: f64,
    pub t2: f64,
    pub i: usize,
    pub j: usize,
    pub urn: f64,
    pub se: f64,
    pub theory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub alpha: Vec<u64>,
    pub spec: RegimeSpec,
    pub traces: Vec<CovTrace>,
    pub energy: Vec<EnergyTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateScanSummary {
    pub cells: Vec<CellResult>,
    pub fit: RateFit,
    pub family_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCell {
    pub alpha: Vec<u64>,
    pub step: u64,
    pub composition: Vec<u64>,
    /// Exact probability as a reduced fraction.
    pub exact: String,
    pub probability: f64,
    pub direct: f64,
    pub exchangeable: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub replicates: usize,
    /// Per-cell normal quantile giving family-wise coverage of a single
    /// 3-sigma band.
    pub z: f64,
    pub cells: Vec<OracleCell>,
    /// Replicates that landed outside the exact support (must be zero).
    pub outside_support: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ReportBody {
    Simulate(SimulateSummary),
    Approximate(ApproximateSummary),
    VerifyRegime(RegimeSummary),
    RateScan(RateScanSummary),
    OracleCheck(OracleSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub threads: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub body: ReportBody,
    /// Kept out of `report.json` so results stay machine-independent.
    #[serde(skip)]
    pub runtime: Option<RuntimeInfo>,
}

impl ExperimentReport {
    /// Acceptance outcome, for experiments that have one.
    pub fn passed(&self) -> Option<bool> {
        match &self.body {
            ReportBody::OracleCheck(o) => Some(o.passed),
            _ => None,
        }
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        let mut push = |statistic: &str, index: String, value, reference, se| {
            out.push(Record {
                statistic: statistic.to_string(),
                index,
                value,
                reference,
                se,
            })
        };
        fn matrix(
            push: &mut impl FnMut(&str, String, f64, Option<f64>, Option<f64>),
            name: &str,
            m: &MatrixEstimate,
        ) {
            for (i, row) in m.estimate.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    push(
                        name,
                        format!("i={i};j={j}"),
                        v,
                        Some(m.reference[i][j]),
                        Some(m.se[i][j]),
                    );
                }
            }
        }
        match &self.body {
            ReportBody::Simulate(s) => {
                matrix(&mut push, "marker_cov", &s.marker_cov);
                matrix(&mut push, "xi_cov", &s.xi_cov);
                if let Some(d) = &s.sup_distance {
                    push("sup_distance", String::new(), d.distance, None, Some(d.se));
                }
            }
            ReportBody::Approximate(a) => {
                for (j, m) in a.mean.iter().enumerate() {
                    push("mean", format!("j={j}"), *m, None, None);
                }
                matrix(&mut push, "deviation_cov", &a.cov);
                push("flagged", String::new(), a.flagged as f64, None, None);
            }
            ReportBody::VerifyRegime(r) => {
                for t in &r.traces {
                    push(
                        "cov",
                        format!("t1={};t2={};i={};j={}", t.t1, t.t2, t.i, t.j),
                        t.urn,
                        Some(t.theory),
                        Some(t.se),
                    );
                }
                for (k, e) in r.energy.iter().enumerate() {
                    push("energy_p", format!("run={k}"), e.p_value, None, None);
                }
            }
            ReportBody::RateScan(r) => {
                for (c, f) in r.cells.iter().zip(&r.fit.fitted) {
                    push(
                        "distance",
                        format!("N={};n={}", c.big_n, c.n),
                        c.distance,
                        Some(*f),
                        Some(c.se),
                    );
                }
                push("c1", String::new(), r.fit.c1, None, None);
                push("c2", String::new(), r.fit.c2, None, None);
                if let Some(r2) = r.fit.r_squared {
                    push("r_squared", String::new(), r2, None, None);
                }
            }
            ReportBody::OracleCheck(o) => {
                for c in &o.cells {
                    let idx = format!("alpha={:?};n={};xi={:?}", c.alpha, c.step, c.composition);
                    let se = Some(c.half_width);
                    push("direct", idx.clone(), c.direct, Some(c.probability), se);
                    push("exchangeable", idx, c.exchangeable, Some(c.probability), se);
                }
            }
        }
        out
    }
}

fn to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_estimate(samples: &Samples, reference: &nalgebra::DMatrix<f64>) -> MatrixEstimate {
    let est = zero_mean_cov_with_se(samples);
    MatrixEstimate {
        estimate: to_rows(&est.cov),
        se: to_rows(&est.se),
        reference: to_rows(reference),
    }
}

fn run_simulate(config: &ExperimentConfig) -> HarnessResult<SimulateSummary> {
    let alpha = config.alpha_field()?;
    let n = config.n_field()?;
    let d = alpha.len() - 1;
    let start = UrnState::new(alpha.clone())?;
    let rows = par_replicates(config.seed, Role::Urn, config.replicates, |_, rng| {
        let counts = crate::urn::run_direct_at(&start, &[n], rng).pop().unwrap();
        let s = crate::approx::scaled_deviation(&alpha, &counts, n).expect("n >= 1");
        [s.marker, s.xi].concat()
    });
    let (mut marker, mut xi) = (Vec::new(), Vec::new());
    for r in &rows {
        marker.extend_from_slice(&r[..d]);
        xi.extend_from_slice(&r[d..]);
    }
    let marker = Samples::new(d, marker);
    let xi = Samples::new(d, xi);
    let sigma = cov_from_alpha(&alpha)?;
    let xi_law = crate::approx::limit_law(&alpha, n, crate::approx::StatisticForm::Composition)?;
    let family = SetFamily::default_for(&sigma);
    let sup = if marker.len() >= MIN_SUP_SAMPLES {
        Some(sup_distance(&marker, &sigma, &family)?)
    } else {
        None
    };
    Ok(SimulateSummary {
        marker_cov: matrix_estimate(&marker, &sigma.sigma),
        xi_cov: matrix_estimate(&xi, &xi_law.sigma),
        sup_distance: sup,
        family_note: family_note(family.directions.len(), Some(64)),
        alpha,
        n,
    })
}

fn run_approximate(config: &ExperimentConfig) -> HarnessResult<ApproximateSummary> {
    let alpha = config.alpha_field()?;
    let n = config.n_field()?;
    let big_n: u64 = alpha.iter().sum();
    let draws = par_replicates(config.seed, Role::Gaussian, config.replicates, |_, rng| {
        sample_theorem1(&alpha, n, rng)
    })
    .into_iter()
    .collect::<crate::error::Result<Vec<_>>>()?;
    let mu = crate::gaussian::mu_hat(&alpha);
    let d = mu.len();
    let mut dev = Vec::with_capacity(draws.len() * d);
    let mut mean = vec![0.0; d];
    for s in &draws {
        for j in 0..d {
            mean[j] += s.markers[j] / draws.len() as f64;
            dev.push(s.markers[j] - (big_n + n) as f64 * mu[j]);
        }
    }
    let factor = n as f64 * (big_n + n) as f64 / (big_n + 1) as f64;
    let reference = cov_from_alpha(&alpha)?.sigma * factor;
    Ok(ApproximateSummary {
        cov: matrix_estimate(&Samples::new(d, dev), &reference),
        mean,
        flagged: draws.iter().filter(|s| s.flagged).count(),
        remainder_scales: remainder_scales(big_n, n),
        alpha,
        n,
    })
}

/// Covariance traces of the urn path against the regime's closed form,
/// plus optional energy tests against the limit paths.
pub fn verify_regime(
    spec: &RegimeSpec,
    alpha: &[u64],
    replicates: usize,
    energy_runs: usize,
    energy_samples: usize,
    seed: u64,
) -> HarnessResult<RegimeSummary> {
    let d = alpha.len() - 1;
    let rows = par_replicates(seed, Role::Urn, replicates, |_, rng| {
        urn_regime_path(spec, alpha, rng).map(|p| p.flatten())
    })
    .into_iter()
    .collect::<crate::error::Result<Vec<_>>>()?;
    let est = zero_mean_cov_with_se(&Samples::from_rows(&rows)?);
    let mut traces = Vec::new();
    for (a, &t1) in spec.t_grid.iter().enumerate() {
        for (b, &t2) in spec.t_grid.iter().enumerate().skip(a) {
            let theory = regime_covariance(spec, alpha, t1, t2)?;
            for i in 0..d {
                for j in 0..d {
                    traces.push(CovTrace {
                        t1,
                        t2,
                        i,
                        j,
                        urn: est.cov[(a * d + i, b * d + j)],
                        se: est.se[(a * d + i, b * d + j)],
                        theory: theory[(i, j)],
                    });
                }
            }
        }
    }
    let energy = (0..energy_runs)
        .map(|run| {
            let run_seed = crate::rng::derive_seed(seed, &[0xE, run as u64]);
            let urn = par_replicates(run_seed, Role::Urn, energy_samples, |_, rng| {
                urn_regime_path(spec, alpha, rng).map(|p| flat_positive(&p))
            })
            .into_iter()
            .collect::<crate::error::Result<Vec<_>>>()?;
            let lim = par_replicates(run_seed, Role::Gaussian, energy_samples, |_, rng| {
                corollary1_path(spec, alpha, rng).map(|p| flat_positive(&p))
            })
            .into_iter()
            .collect::<crate::error::Result<Vec<_>>>()?;
            Ok(two_sample_energy(
                &Samples::from_rows(&urn)?,
                &Samples::from_rows(&lim)?,
                PERMUTATIONS,
                run_seed,
            )?)
        })
        .collect::<HarnessResult<Vec<_>>>()?;
    Ok(RegimeSummary {
        alpha: alpha.to_vec(),
        spec: spec.clone(),
        traces,
        energy,
    })
}

/// Path values at the positive grid times (the `t = 0` values are zero).
fn flat_positive(p: &crate::approx::ApproxTrajectory) -> Vec<f64> {
    p.t_grid
        .iter()
        .zip(&p.values)
        .filter(|(&t, _)| t > 0.0)
        .flat_map(|(_, v)| v.iter().copied())
        .collect()
}

/// Family-wise level of a single two-sided 3-sigma band.
pub fn three_sigma_level() -> f64 {
    2.0 * (1.0 - Normal::standard().cdf(3.0))
}

/// Compares empirical composition frequencies after each of the first `n`
/// draws, from both the direct and the exchangeable construction, with the
/// exact law. All cells share one Bonferroni-adjusted band whose family-wise
/// level equals a single 3-sigma band.
pub fn oracle_check(
    alphas: &[Vec<u64>],
    n: u64,
    replicates: usize,
    seed: u64,
) -> HarnessResult<OracleSummary> {
    struct Table {
        alpha: Vec<u64>,
        exact: Vec<BTreeMap<Vec<u64>, num_rational::Ratio<u128>>>,
        index: HashMap<(u64, Vec<u64>), usize>,
    }
    let mut tables = Vec::new();
    let mut total_cells = 0usize;
    for alpha in alphas {
        validate_alpha(alpha)?;
        let mut exact = Vec::new();
        let mut index = HashMap::new();
        for step in 1..=n {
            let law = exact_distribution(alpha, step)?;
            for comp in law.keys() {
                index.insert((step, comp.clone()), index.len());
            }
            exact.push(law);
        }
        total_cells += 2 * index.len();
        tables.push(Table {
            alpha: alpha.clone(),
            exact,
            index,
        });
    }
    let z = Normal::standard().inverse_cdf(1.0 - three_sigma_level() / (2.0 * total_cells as f64));

    let mut cells = Vec::new();
    let mut outside = 0;
    let mut passed = true;
    for (a, table) in tables.iter().enumerate() {
        let bins = table.index.len() + 1;
        let miss = bins - 1;
        let lookup = |step: u64, counts: &[u64]| -> usize {
            table
                .index
                .get(&(step, counts.to_vec()))
                .copied()
                .unwrap_or(miss)
        };
        let alpha = &table.alpha;
        let direct_seed = crate::rng::derive_seed(seed, &[a as u64, 0]);
        let direct = par_tally(direct_seed, Role::Urn, replicates, bins, |rng, acc| {
            let mut state = UrnState::new(alpha.clone()).expect("validated");
            for step in 1..=n {
                state.step_direct(rng);
                acc[lookup(step, state.counts())] += 1;
            }
        });
        let exch_seed = crate::rng::derive_seed(seed, &[a as u64, 1]);
        let exch = par_tally(exch_seed, Role::Uniforms, replicates, bins, |rng, acc| {
            let draw = ExchangeableDraw::sample(alpha, n as usize, rng).expect("validated");
            let mut counts = alpha.clone();
            for step in 1..=n {
                counts[draw.step_exchangeable(step as usize).expect("in range")] += 1;
                acc[lookup(step, &counts)] += 1;
            }
        });
        outside += direct[miss] + exch[miss];
        let r = replicates as f64;
        for (s, law) in table.exact.iter().enumerate() {
            let step = s as u64 + 1;
            for (comp, p) in law {
                let i = table.index[&(step, comp.clone())];
                let prob = p.to_f64().unwrap_or(f64::NAN);
                let half_width = z * (prob * (1.0 - prob) / r).sqrt();
                let fd = direct[i] as f64 / r;
                let fe = exch[i] as f64 / r;
                if (fd - prob).abs() > half_width || (fe - prob).abs() > half_width {
                    passed = false;
                }
                cells.push(OracleCell {
                    alpha: alpha.clone(),
                    step,
                    composition: comp.clone(),
                    exact: format!("{}/{}", p.numer(), p.denom()),
                    probability: prob,
                    direct: fd,
                    exchangeable: fe,
                    half_width,
                });
            }
        }
    }
    Ok(OracleSummary {
        replicates,
        z,
        cells,
        outside_support: outside,
        passed: passed && outside == 0,
    })
}

/// One record per line in `cells.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellLine {
    config_hash: String,
    cell: CellResult,
}

fn load_cells(path: &Path, hash: &str) -> HarnessResult<HashMap<(u64, u64), CellResult>> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted run is recomputed.
        let Ok(rec) = serde_json::from_str::<CellLine>(&line) else {
            continue;
        };
        if rec.config_hash != hash {
            return Err(config_err(
                "output.dir",
                "run directory holds cells from a different configuration",
            ));
        }
        done.insert((rec.cell.big_n, rec.cell.n), rec.cell);
    }
    Ok(done)
}

fn run_rate_scan(config: &ExperimentConfig, dir: Option<&Path>) -> HarnessResult<RateScanSummary> {
    let scan = config.rate_scan_setup()?;
    let hash = config.hash();
    let journal = dir.map(|d| d.join("cells.jsonl"));
    let mut done = match &journal {
        Some(p) => load_cells(p, &hash)?,
        None => HashMap::new(),
    };
    let mut cells = Vec::with_capacity(scan.cells.len());
    for &(big_n, n) in &scan.cells {
        if let Some(c) = done.remove(&(big_n, n)) {
            cells.push(c);
            continue;
        }
        let cell = scan_cell(&scan, big_n, n)?;
        if let Some(p) = &journal {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| io_err(p, e))?;
            let line = serde_json::to_string(&CellLine {
                config_hash: hash.clone(),
                cell: cell.clone(),
            })
            .expect("cell serializes");
            writeln!(f, "{line}").map_err(|e| io_err(p, e))?;
        }
        cells.push(cell);
    }
    let fit = fit_rate_model(&cells);
    Ok(RateScanSummary {
        cells,
        fit,
        family_note: family_note(
            scan.directions,
            (!scan.all_thresholds).then_some(scan.thresholds),
        ),
    })
}

fn execute(config: &ExperimentConfig, dir: Option<&Path>) -> HarnessResult<ReportBody> {
    Ok(match config.kind()? {
        ExperimentKind::Simulate => ReportBody::Simulate(run_simulate(config)?),
        ExperimentKind::Approximate => ReportBody::Approximate(run_approximate(config)?),
        ExperimentKind::VerifyRegime => {
            let (spec, alpha, runs, samples) = config.regime_setup()?;
            ReportBody::VerifyRegime(verify_regime(
                &spec,
                &alpha,
                config.replicates,
                runs,
                samples,
                config.seed,
            )?)
        }
        ExperimentKind::RateScan => ReportBody::RateScan(run_rate_scan(config, dir)?),
        ExperimentKind::OracleCheck => ReportBody::OracleCheck(oracle_check(
            &[config.alpha_field()?],
            config.n_field()?,
            config.replicates,
            config.seed,
        )?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: String,
    kind: ExperimentKind,
    seed: u64,
    config_hash: String,
    files: Vec<String>,
}

fn write_file(path: &Path, contents: &[u8]) -> HarnessResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

fn write_records_csv(path: &Path, records: &[Record]) -> HarnessResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    if records.is_empty() {
        w.write_record(["statistic", "index", "value", "reference", "se"])
            .map_err(|e| io_err(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Validates, runs and (if `output.dir` is set) persists an experiment.
pub fn run(config: &ExperimentConfig) -> HarnessResult<ExperimentReport> {
    config.validate()?;
    let threads = config.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| config_err("threads", e))?;
    let dir = config.output.dir.clone();
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let started = Instant::now();
    let body = pool.install(|| execute(config, dir.as_deref()))?;
    let report = ExperimentReport {
        config: config.canonical(),
        config_hash: config.hash(),
        seed: config.seed,
        version: VERSION.to_string(),
        body,
        runtime: Some(RuntimeInfo {
            threads: pool.current_num_threads(),
            wall_seconds: started.elapsed().as_secs_f64(),
        }),
    };
    if let Some(d) = &dir {
        persist(&report, d, config.output.format)?;
    }
    Ok(report)
}

fn persist(report: &ExperimentReport, dir: &Path, format: Format) -> HarnessResult<()> {
    let results = match format {
        Format::Csv => "results.csv",
        Format::Json => "results.json",
    };
    let records = report.records();
    match format {
        Format::Csv => write_records_csv(&dir.join(results), &records)?,
        Format::Json => write_file(&dir.join(results), &pretty(&records))?,
    }
    write_file(&dir.join("config.toml"), report.config.to_toml().as_bytes())?;
    write_file(&dir.join("report.json"), &pretty(report))?;
    let mut files = vec![
        "config.toml".to_string(),
        "report.json".to_string(),
        results.to_string(),
    ];
    if matches!(report.body, ReportBody::RateScan(_)) {
        files.push("cells.jsonl".to_string());
    }
    let manifest = Manifest {
        version: report.version.clone(),
        kind: report.config.kind.expect("validated"),
        seed: report.seed,
        config_hash: report.config_hash.clone(),
        files,
    };
    write_file(&dir.join("manifest.json"), &pretty(&manifest))?;
    if let Some(rt) = &report.runtime {
        write_file(&dir.join("runtime.json"), &pretty(rt))?;
    }
    Ok(())
}

/// Reads `report.json` from a run directory.
pub fn load_report(dir: &Path) -> HarnessResult<ExperimentReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

/// Writes long-format CSV for external plotting and returns the paths.
///
/// - rate scan: `rate_scan.csv` with columns `N,n,distance,se,fitted`;
/// - regime check: `regime_cov.csv` with `t1,t2,i,j,urn,se,theory`;
/// - anything else: `records.csv` with the generic record columns.
pub fn emit_plotdata(report: &ExperimentReport, target: &Path) -> HarnessResult<Vec<PathBuf>> {
    fs::create_dir_all(target).map_err(|e| io_err(target, e))?;
    match &report.body {
        ReportBody::RateScan(r) => {
            let path = target.join("rate_scan.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
            w.write_record(["N", "n", "distance", "se", "fitted"])
                .map_err(|e| io_err(&path, e))?;
            for (c, f) in r.cells.iter().zip(&r.fit.fitted) {
                w.write_record([
                    c.big_n.to_string(),
                    c.n.to_string(),
                    c.distance.to_string(),
                    c.se.to_string(),
                    f.to_string(),
                ])
                .map_err(|e| io_err(&path, e))?;
            }
            w.flush().map_err(|e| io_err(&path, e))?;
            Ok(vec![path])
        }
        ReportBody::VerifyRegime(r) => {
            let path = target.join("regime_cov.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
            w.write_record(["t1", "t2", "i", "j", "urn", "se", "theory"])
                .map_err(|e| io_err(&path, e))?;
            for t in &r.traces {
                w.serialize((t.t1, t.t2, t.i, t.j, t.urn, t.se, t.theory))
                    .map_err(|e| io_err(&path, e))?;
            }
            w.flush().map_err(|e| io_err(&path, e))?;
            Ok(vec![path])
        }
        _ => {
            let path = target.join("records.csv");
            write_records_csv(&path, &report.records())?;
            Ok(vec![path])
        }
    }
}
