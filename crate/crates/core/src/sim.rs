//! Simulation designs and the Monte Carlo harness comparing the additive
//! model with the functional linear baseline.
//!
//! The covariate is `X(s) = a1 + a2 √2 sin(πs) + a3 √2 cos(πs)` with
//! `Var a_p = 4^(1-p)`, observed with Gaussian noise. Responses integrate one
//! of three kernels over `s` and add one of four error processes. The kernels
//! and error processes are stand-ins chosen for their qualitative shape:
//!
//! * `F1 = x (2 + cos πs + sin πt)` is linear in `x`;
//! * `F2 = cos(x) (1 + st)` is smooth and mildly nonlinear;
//! * `F3 = 2 sin(πx/2) exp(-(s-0.6)²)(1 + t/2) + x² s t / 4` bends in `x`
//!   with a shape that changes over `s` and `t`;
//! * `E1` is white noise with sd 0.5;
//! * `E2` adds a random `2π` Fourier pair (sds 0.5, 0.25) to white noise with
//!   sd 0.25;
//! * `E3` adds a `4π` pair with halved sds;
//! * `E4` is `E3` with white-noise sd 0.5.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::{Curve, Design};
use crate::funcdata::{trapezoid_weights, FunctionalDataset, Interval, SubjectRecord};
use crate::inference::{prediction_bands, coverage_evaluate, BootstrapConfig};
use crate::model::{fit_prepared, FitOptions, ModelKind, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    F1,
    F2,
    F3,
}

impl Kernel {
    pub fn eval(self, x: f64, s: f64, t: f64) -> f64 {
        match self {
            Kernel::F1 => x * (2.0 + (PI * s).cos() + (PI * t).sin()),
            Kernel::F2 => x.cos() * (1.0 + s * t),
            Kernel::F3 => {
                2.0 * (PI * x / 2.0).sin() * (-(s - 0.6).powi(2)).exp() * (1.0 + t / 2.0)
                    + x * x * s * t / 4.0
            }
        }
    }
}

/// The kernel as a plain function of `(x, s, t)`.
pub fn true_kernel(kind: Kernel) -> impl Fn(f64, f64, f64) -> f64 + Copy + Send + Sync {
    move |x, s, t| kind.eval(x, s, t)
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F1" => Ok(Kernel::F1),
            "F2" => Ok(Kernel::F2),
            "F3" => Ok(Kernel::F3),
            _ => Err(Error::InvalidConfig(format!("unknown kernel '{s}' (F1, F2 or F3)"))),
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorKind {
    E1,
    E2,
    E3,
    E4,
}

/// One random Fourier term `ζ √2 trig(2π·freq·t)` with `sd(ζ) = sd`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierTerm {
    pub sd: f64,
    pub freq: f64,
    pub cosine: bool,
}

impl FourierTerm {
    pub fn eval(&self, t: f64) -> f64 {
        let a = 2.0 * PI * self.freq * t;
        SQRT_2 * if self.cosine { a.cos() } else { a.sin() }
    }
}

impl ErrorKind {
    pub fn terms(self) -> Vec<FourierTerm> {
        let pair = |freq: f64, sd: f64| {
            [
                FourierTerm { sd, freq, cosine: false },
                FourierTerm { sd: sd / 2.0, freq, cosine: true },
            ]
        };
        match self {
            ErrorKind::E1 => vec![],
            ErrorKind::E2 => pair(1.0, 0.5).to_vec(),
            ErrorKind::E3 | ErrorKind::E4 => [pair(1.0, 0.5), pair(2.0, 0.25)].concat(),
        }
    }

    pub fn nugget_sd(self) -> f64 {
        match self {
            ErrorKind::E1 | ErrorKind::E4 => 0.5,
            ErrorKind::E2 | ErrorKind::E3 => 0.25,
        }
    }

    /// `Cov(ε(t1), ε(t2))`.
    pub fn covariance(self, t1: f64, t2: f64) -> f64 {
        let smooth: f64 = self
            .terms()
            .iter()
            .map(|f| f.sd * f.sd * f.eval(t1) * f.eval(t2))
            .sum();
        smooth + if t1 == t2 { self.nugget_sd().powi(2) } else { 0.0 }
    }
}

impl std::str::FromStr for ErrorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E1" => Ok(ErrorKind::E1),
            "E2" => Ok(ErrorKind::E2),
            "E3" => Ok(ErrorKind::E3),
            "E4" => Ok(ErrorKind::E4),
            _ => Err(Error::InvalidConfig(format!("unknown error kind '{s}' (E1 to E4)"))),
        }
    }
}

impl std::fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A draw of the error process on `t`.
pub fn gen_error<R: Rng + ?Sized>(rng: &mut R, kind: ErrorKind, t: &[f64]) -> Vec<f64> {
    let zetas: Vec<(FourierTerm, f64)> = kind
        .terms()
        .into_iter()
        .map(|f| {
            let z: f64 = rng.sample(StandardNormal);
            (f, f.sd * z)
        })
        .collect();
    let nugget = kind.nugget_sd();
    t.iter()
        .map(|&v| {
            let e: f64 = rng.sample(StandardNormal);
            zetas.iter().map(|(f, z)| z * f.eval(v)).sum::<f64>() + nugget * e
        })
        .collect()
}

/// Coefficients of one covariate curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateDraw {
    pub a: [f64; 3],
}

impl CovariateDraw {
    pub fn eval(&self, s: f64) -> f64 {
        self.a[0] + self.a[1] * SQRT_2 * (PI * s).sin() + self.a[2] * SQRT_2 * (PI * s).cos()
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut a = [0.0; 3];
        for (p, v) in a.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * 0.5f64.powi(p as i32);
        }
        Self { a }
    }
}

/// A simulated covariate: its true curve and noisy observations on `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCovariate {
    pub draw: CovariateDraw,
    pub grid: Vec<f64>,
    pub observed: Vec<f64>,
}

/// Covariates for each subject grid, observed with noise of sd `noise_sd`.
pub fn gen_covariate<R: Rng + ?Sized>(rng: &mut R, grids: &[Vec<f64>], noise_sd: f64) -> Vec<SimCovariate> {
    grids
        .iter()
        .map(|grid| {
            let draw = CovariateDraw::draw(rng);
            let observed = grid
                .iter()
                .map(|&s| {
                    let d: f64 = rng.sample(StandardNormal);
                    draw.eval(s) + noise_sd * d
                })
                .collect();
            SimCovariate {
                draw,
                grid: grid.clone(),
                observed,
            }
        })
        .collect()
}

/// Observation grids of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectGrid {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

fn subsample<R: Rng + ?Sized>(rng: &mut R, grid: &[f64], lo: usize, hi: usize) -> Vec<f64> {
    let m = rng.random_range(lo..=hi).min(grid.len());
    let mut idx = sample(rng, grid.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| grid[i]).collect()
}

/// Grids for `n` subjects: shared equispaced grids for the dense design,
/// random subsets of them (45 to 54 covariate and 35 to 44 response points)
/// for the sparse design.
pub fn sample_design<R: Rng + ?Sized>(
    rng: &mut R,
    design: Design,
    n: usize,
    m_s: usize,
    m_t: usize,
) -> Vec<SubjectGrid> {
    let s = Interval::unit().linspace(m_s);
    let t = Interval::unit().linspace(m_t);
    (0..n)
        .map(|_| match design {
            Design::Dense => SubjectGrid {
                s: s.clone(),
                t: t.clone(),
            },
            Design::Sparse => SubjectGrid {
                s: subsample(rng, &s, 45, 54),
                t: subsample(rng, &t, 35, 44),
            },
        })
        .collect()
}

/// Composite Simpson weights on an equispaced grid with an odd number of
/// points; trapezoid weights otherwise.
fn simpson_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    if n < 3 || n.is_multiple_of(2) {
        return trapezoid_weights(grid);
    }
    let h = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// `∫ F(X(s), s, t) ds` on `t` by composite Simpson with `quad_points` nodes.
pub fn integrate_kernel(x: &CovariateDraw, kernel: Kernel, t: &[f64], quad_points: usize) -> Vec<f64> {
    let s = Interval::unit().linspace(quad_points);
    let w = simpson_weights(&s);
    let xs: Vec<f64> = s.iter().map(|&u| x.eval(u)).collect();
    t.iter()
        .map(|&v| {
            s.iter()
                .zip(&xs)
                .zip(&w)
                .map(|((&u, &xv), &wi)| wi * kernel.eval(xv, u, v))
                .sum()
        })
        .collect()
}

/// A simulated response: noise-free signal and noisy observations on `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResponse {
    pub t: Vec<f64>,
    pub signal: Vec<f64>,
    pub observed: Vec<f64>,
}

pub fn gen_response<R: Rng + ?Sized>(
    rng: &mut R,
    x: &CovariateDraw,
    kernel: Kernel,
    error: Option<ErrorKind>,
    t: &[f64],
    quad_points: usize,
) -> SimResponse {
    let signal = integrate_kernel(x, kernel, t, quad_points);
    let observed = match error {
        Some(kind) => signal.iter().zip(gen_error(rng, kind, t)).map(|(a, b)| a + b).collect(),
        None => signal.clone(),
    };
    SimResponse {
        t: t.to_vec(),
        signal,
        observed,
    }
}

/// Root mean squared prediction error: per-curve mean squares averaged over
/// curves, then the square root.
pub fn rmspe(predictions: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::GridMismatch(format!(
            "{} predicted curves for {} observed",
            predictions.len(),
            truths.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, y)) in predictions.iter().zip(truths).enumerate() {
        if p.len() != y.len() || p.is_empty() {
            return Err(Error::GridMismatch(format!(
                "curve {i}: {} predictions for {} observations",
                p.len(),
                y.len()
            )));
        }
        total += p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    }
    Ok((total / predictions.len() as f64).sqrt())
}

/// Percent improvement of `a` over the baseline `b`.
pub fn relative_gain(a: f64, b: f64) -> f64 {
    100.0 * (1.0 - a / b)
}

/// Bootstrap bands for the test subjects of every replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSpec {
    pub replicates: usize,
    /// Nominal levels `1 − α`.
    pub levels: Vec<f64>,
    pub averaged_error_cov: bool,
}

impl Default for CoverageSpec {
    fn default() -> Self {
        Self {
            replicates: 100,
            levels: vec![0.85, 0.90, 0.95],
            averaged_error_cov: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub n_test: usize,
    pub design: Design,
    pub kernel: Kernel,
    pub error: ErrorKind,
    pub noise_sd_x: f64,
    pub seed: u64,
    pub n_mc: usize,
    pub m_s: usize,
    pub m_t: usize,
    /// Quadrature nodes for the response integral.
    pub quad_points: usize,
    pub fit: FitOptions,
    pub coverage: Option<CoverageSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            n_test: 50,
            design: Design::Dense,
            kernel: Kernel::F2,
            error: ErrorKind::E1,
            noise_sd_x: 0.5f64.sqrt(),
            seed: 1,
            n_mc: 100,
            m_s: 81,
            m_t: 101,
            quad_points: 401,
            fit: FitOptions::default(),
            coverage: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(Error::InvalidConfig("n_mc must be at least 1".into()));
        }
        if self.n < 2 || self.n_test == 0 {
            return Err(Error::InvalidConfig("need n >= 2 and n_test >= 1".into()));
        }
        if self.m_s < 2 || self.m_t < 3 || self.quad_points < 2 {
            return Err(Error::InvalidConfig("grids are too short".into()));
        }
        if !(self.noise_sd_x >= 0.0) {
            return Err(Error::InvalidConfig("noise_sd_x must be nonnegative".into()));
        }
        if let Some(c) = &self.coverage {
            if c.replicates == 1 || c.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
                return Err(Error::InvalidConfig(
                    "coverage needs 0 or >= 2 replicates and levels in (0, 1)".into(),
                ));
            }
        }
        self.fit.validate()
    }
}

/// One simulated sample: training data plus a dense test set.
#[derive(Debug, Clone)]
pub struct SimSample {
    pub train: FunctionalDataset,
    pub train_signal: Vec<Vec<f64>>,
    pub test: FunctionalDataset,
    pub test_signal: Vec<Vec<f64>>,
}

fn build_set<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SimConfig,
    grids: &[SubjectGrid],
    prefix: &str,
) -> Result<(FunctionalDataset, Vec<Vec<f64>>)> {
    let s_grids: Vec<Vec<f64>> = grids.iter().map(|g| g.s.clone()).collect();
    let covs = gen_covariate(rng, &s_grids, config.noise_sd_x);
    let mut subjects = Vec::with_capacity(grids.len());
    let mut signals = Vec::with_capacity(grids.len());
    for (i, (g, c)) in grids.iter().zip(covs).enumerate() {
        let y = gen_response(rng, &c.draw, config.kernel, Some(config.error), &g.t, config.quad_points);
        subjects.push(SubjectRecord::new(
            format!("{prefix}{i:04}"),
            c.grid,
            c.observed,
            y.t,
            y.observed,
        ));
        signals.push(y.signal);
    }
    Ok((
        FunctionalDataset::new(subjects, Interval::unit(), Interval::unit())?,
        signals,
    ))
}

/// Draw the training and test sets of replicate `replicate`.
pub fn simulate(config: &SimConfig, replicate: usize) -> Result<SimSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(replicate as u64);
    let train_grids = sample_design(&mut rng, config.design, config.n, config.m_s, config.m_t);
    let (train, train_signal) = build_set(&mut rng, config, &train_grids, "train")?;
    let test_grids = sample_design(&mut rng, Design::Dense, config.n_test, config.m_s, config.m_t);
    let (test, test_signal) = build_set(&mut rng, config, &test_grids, "test")?;
    Ok(SimSample {
        train,
        train_signal,
        test,
        test_signal,
    })
}

/// Metrics of one replicate, index 0 for the additive model and 1 for the
/// linear baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub rmspe_in: [f64; 2],
    /// Test-set error against the noise-free signal.
    pub rmspe_out: [f64; 2],
    /// Test-set error against the noisy test responses.
    pub rmspe_out_observed: [f64; 2],
    /// Band coverage of the noisy test responses, one entry per level.
    pub coverage: Vec<f64>,
    /// Per-t coverage at each level.
    pub coverage_per_t: Vec<Vec<f64>>,
    pub k: usize,
    pub lambda: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Monte Carlo standard error of the mean.
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub rmspe_in: Stat,
    pub rmspe_out: Stat,
    pub rmspe_out_observed: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCoverage {
    pub nominal: f64,
    pub coverage: Stat,
    pub per_t: Vec<f64>,
}

/// Wall-clock timings; kept apart from the results so that reruns with the
/// same configuration produce identical results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_fit_seconds: [f64; 2],
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResults {
    pub config: SimConfig,
    pub completed: usize,
    pub failed: usize,
    pub methods: Vec<MethodSummary>,
    /// `100 (1 − RMSPE_additive / RMSPE_linear)` on the averaged errors.
    pub relative_gain_in: f64,
    pub relative_gain_out: f64,
    pub relative_gain_out_observed: f64,
    pub coverage: Vec<LevelCoverage>,
    pub replicates: Vec<ReplicateResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub results: McResults,
    pub timing: Timing,
}

impl McReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.results)?)
    }

    /// Long-format table, one row per method and metric.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let r = &self.results;
        let c = &r.config;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["kernel", "error", "design", "n", "method", "metric", "value", "se"])?;
        let mut row = |method: &str, metric: &str, value: f64, se: f64| -> Result<()> {
            w.write_record([
                c.kernel.to_string(),
                c.error.to_string(),
                c.design.to_string(),
                c.n.to_string(),
                method.to_string(),
                metric.to_string(),
                format!("{value:?}"),
                format!("{se:?}"),
            ])?;
            Ok(())
        };
        for m in &r.methods {
            row(&m.method, "rmspe_in", m.rmspe_in.mean, m.rmspe_in.se)?;
            row(&m.method, "rmspe_out", m.rmspe_out.mean, m.rmspe_out.se)?;
            row(&m.method, "rmspe_out_observed", m.rmspe_out_observed.mean, m.rmspe_out_observed.se)?;
        }
        row("affpc", "relative_gain_in", r.relative_gain_in, f64::NAN)?;
        row("affpc", "relative_gain_out", r.relative_gain_out, f64::NAN)?;
        row("affpc", "relative_gain_out_observed", r.relative_gain_out_observed, f64::NAN)?;
        for l in &r.coverage {
            row("affpc", &format!("coverage_{}", l.nominal), l.coverage.mean, l.coverage.se)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bootstrap_seed(seed: u64, replicate: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (replicate as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Run one replicate; returns the metrics and the two fit times.
pub fn run_replicate(config: &SimConfig, replicate: usize) -> Result<(ReplicateResult, [f64; 2])> {
    let sample = simulate(config, replicate)?;
    let data = TrainingData::new(&sample.train, &config.fit)?;
    let mut seconds = [0.0; 2];
    let mut fits = Vec::with_capacity(2);
    for (m, kind) in [ModelKind::Additive, ModelKind::Linear].into_iter().enumerate() {
        let opts = FitOptions {
            kind,
            ..config.fit.clone()
        };
        let start = Instant::now();
        fits.push(fit_prepared(&data, &opts, m == 0)?);
        seconds[m] = start.elapsed().as_secs_f64();
    }
    let train_obs: Vec<Vec<f64>> = sample.train.subjects().iter().map(|s| s.y_values.clone()).collect();
    let test_obs: Vec<Vec<f64>> = sample.test.subjects().iter().map(|s| s.y_values.clone()).collect();
    let mut rmspe_in = [0.0; 2];
    let mut rmspe_out = [0.0; 2];
    let mut rmspe_out_observed = [0.0; 2];
    for (m, fit) in fits.iter().enumerate() {
        let p_in: Vec<Vec<f64>> = fit.predict_dataset(&sample.train, None)?.into_iter().map(|p| p.y_hat).collect();
        let p_out: Vec<Vec<f64>> = fit.predict_dataset(&sample.test, None)?.into_iter().map(|p| p.y_hat).collect();
        rmspe_in[m] = rmspe(&p_in, &train_obs)?;
        rmspe_out[m] = rmspe(&p_out, &sample.test_signal)?;
        rmspe_out_observed[m] = rmspe(&p_out, &test_obs)?;
    }
    let mut coverage = Vec::new();
    let mut coverage_per_t = Vec::new();
    if let Some(spec) = &config.coverage {
        let t = Interval::unit().linspace(config.m_t);
        let targets = sample
            .test
            .subjects()
            .iter()
            .map(|s| data.prepare(Curve::new(s.s_grid.clone(), s.x_values.clone()), None))
            .collect::<Result<Vec<_>>>()?;
        let boot = BootstrapConfig {
            replicates: spec.replicates,
            seed: bootstrap_seed(config.seed, replicate),
            averaged_error_cov: spec.averaged_error_cov,
        };
        let level0 = spec.levels.first().copied().unwrap_or(0.9);
        let bands = prediction_bands(&fits[0], &data, &targets, &t, 1.0 - level0, &boot)?;
        for &level in &spec.levels {
            let at: Vec<_> = bands.iter().map(|b| b.at_level(1.0 - level)).collect::<Result<_>>()?;
            let c = coverage_evaluate(&at, &test_obs)?;
            coverage.push(c.overall);
            coverage_per_t.push(c.per_t);
        }
    }
    Ok((
        ReplicateResult {
            replicate,
            rmspe_in,
            rmspe_out,
            rmspe_out_observed,
            coverage,
            coverage_per_t,
            k: fits[0].k(),
            lambda: (fits[0].lambda.lambda_x, fits[0].lambda.lambda_s),
        },
        seconds,
    ))
}

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Run `config.n_mc` replicates. Numerical failures are logged and excluded;
/// more than 5% of them aborts the experiment.
pub fn run_experiment(config: &SimConfig) -> Result<McReport> {
    config.validate()?;
    let start = Instant::now();
    let outcomes: Vec<Result<(ReplicateResult, [f64; 2])>> = (0..config.n_mc)
        .into_par_iter()
        .map(|r| run_replicate(config, r))
        .collect();
    let mut ok = Vec::new();
    let mut times = Vec::new();
    let mut failed = 0;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok((res, secs)) => {
                ok.push(res);
                times.push(secs);
            }
            Err(e) if e.is_numerical() => {
                log::warn!("replicate {r} failed: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if failed as f64 > MAX_FAILURE_RATE * config.n_mc as f64 || ok.is_empty() {
        return Err(Error::ExperimentUnstable {
            failed,
            total: config.n_mc,
        });
    }
    let pick = |f: &dyn Fn(&ReplicateResult) -> f64| -> Vec<f64> { ok.iter().map(f).collect() };
    let methods: Vec<MethodSummary> = ["affpc", "flm"]
        .iter()
        .enumerate()
        .map(|(m, name)| MethodSummary {
            method: name.to_string(),
            rmspe_in: Stat::of(&pick(&|r| r.rmspe_in[m])),
            rmspe_out: Stat::of(&pick(&|r| r.rmspe_out[m])),
            rmspe_out_observed: Stat::of(&pick(&|r| r.rmspe_out_observed[m])),
        })
        .collect();
    let coverage = config
        .coverage
        .as_ref()
        .map(|spec| {
            spec.levels
                .iter()
                .enumerate()
                .map(|(l, &nominal)| {
                    let g = ok[0].coverage_per_t[l].len();
                    let mut per_t = vec![0.0; g];
                    for r in &ok {
                        for (acc, v) in per_t.iter_mut().zip(&r.coverage_per_t[l]) {
                            *acc += v / ok.len() as f64;
                        }
                    }
                    LevelCoverage {
                        nominal,
                        coverage: Stat::of(&pick(&|r| r.coverage[l])),
                        per_t,
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    let gain = |f: fn(&MethodSummary) -> Stat| relative_gain(f(&methods[0]).mean, f(&methods[1]).mean);
    let results = McResults {
        config: config.clone(),
        completed: ok.len(),
        failed,
        relative_gain_in: gain(|m| m.rmspe_in),
        relative_gain_out: gain(|m| m.rmspe_out),
        relative_gain_out_observed: gain(|m| m.rmspe_out_observed),
        methods,
        coverage,
        replicates: ok,
    };
    let nt = times.len() as f64;
    Ok(McReport {
        results,
        timing: Timing {
            mean_fit_seconds: [
                times.iter().map(|t| t[0]).sum::<f64>() / nt,
                times.iter().map(|t| t[1]).sum::<f64>() / nt,
            ],
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}
