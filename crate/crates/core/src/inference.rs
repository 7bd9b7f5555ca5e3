//! Prediction variance and pointwise prediction bands.
//!
//! The total variance of a new prediction splits into a model part (the
//! conditional variance given the estimated eigenbasis, averaged over
//! bootstrap replicates), an eigenbasis part (the spread of the replicate
//! predictions) and the response error variance.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fpca::ErrorCovariance;
use crate::linalg::sym_eigen_desc;
use crate::model::{fit_prepared, AffpcFit, FitOptions, PreparedCovariate, TrainingData};

/// Redraws allowed for one replicate before giving up.
pub const MAX_REDRAWS: usize = 10;

/// `Ω₀ = z₀' H (Σ z_i z_i') H z₀`.
pub fn omega(fit: &AffpcFit, z0: &DVector<f64>) -> f64 {
    let hz = &fit.solver * z0;
    hz.dot(&(&fit.gram * &hz))
}

/// Variance of the prediction at `t` given the estimated eigenbasis:
/// `Ω₀ φ(t)' ν φ(t)`.
pub fn conditional_variance(fit: &AffpcFit, z0: &DVector<f64>, t: &[f64]) -> Result<Vec<f64>> {
    let nu = &fit.score_cov;
    if nu.nrows() > 0 {
        let (vals, _) = sym_eigen_desc(nu);
        let min = vals.min();
        if min < -1e-10 * vals.max().abs().max(1e-300) {
            return Err(Error::InvalidScoreCov(min));
        }
    }
    let om = omega(fit, z0);
    let phi = fit.response.phi_matrix(t);
    Ok((0..t.len())
        .map(|i| {
            let p = phi.row(i).transpose();
            om * p.dot(&(nu * &p))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of replicates; 0 skips the bootstrap.
    pub replicates: usize,
    pub seed: u64,
    /// Use the replicate average of the error covariance instead of the base fit's.
    pub averaged_error_cov: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            seed: 1,
            averaged_error_cov: false,
        }
    }
}

/// Bootstrap output for one prediction target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVariance {
    pub var_model: Vec<f64>,
    pub var_eigen: Vec<f64>,
    /// Replicate predictions, one row per replicate.
    pub predictions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BootstrapOutput {
    pub targets: Vec<TargetVariance>,
    /// Replicate average of the error covariance when requested.
    pub error_cov: Option<ErrorCovariance>,
    /// Redraws spent on degenerate resamples, over all replicates.
    pub redraws: usize,
}

struct Replicate {
    preds: Vec<(Vec<f64>, Vec<f64>)>,
    error_cov: Option<ErrorCovariance>,
    redraws: usize,
}

fn run_replicate(
    data: &TrainingData,
    options: &FitOptions,
    targets: &[PreparedCovariate],
    t: &[f64],
    config: &BootstrapConfig,
    b: usize,
) -> Result<Replicate> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(b as u64);
    let n = data.len();
    let mut last = String::new();
    for attempt in 0..=MAX_REDRAWS {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let sample = data.subset(&idx);
        match fit_prepared(&sample, options, config.averaged_error_cov) {
            Ok(fit) => {
                let preds = targets
                    .iter()
                    .map(|x0| {
                        let p = fit.predict_prepared(x0, t)?;
                        let v = conditional_variance(&fit, &p.z, t)?;
                        Ok((p.y_hat, v))
                    })
                    .collect::<Result<Vec<_>>>()?;
                return Ok(Replicate {
                    preds,
                    error_cov: config.averaged_error_cov.then(|| fit.error_cov.clone()),
                    redraws: attempt,
                });
            }
            Err(e) if e.is_numerical() => {
                log::debug!("replicate {b} attempt {attempt} degenerate: {e}");
                last = e.to_string();
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::BootstrapDegenerate {
        replicate: b,
        attempts: MAX_REDRAWS,
        reason: last,
    })
}

/// Bootstrap of subjects: resample (covariate, response) pairs, refit the
/// whole pipeline and predict every target on `t`. Replicate `b` draws from
/// stream `b` of the seeded generator, so results do not depend on the
/// number of worker threads.
pub fn bootstrap_variance(
    data: &TrainingData,
    options: &FitOptions,
    targets: &[PreparedCovariate],
    t: &[f64],
    config: &BootstrapConfig,
) -> Result<BootstrapOutput> {
    if config.replicates == 1 {
        return Err(Error::InvalidConfig("the bootstrap needs at least 2 replicates".into()));
    }
    let reps: Vec<Replicate> = (0..config.replicates)
        .into_par_iter()
        .map(|b| run_replicate(data, options, targets, t, config, b))
        .collect::<Result<_>>()?;
    let bf = config.replicates as f64;
    let out = (0..targets.len())
        .map(|j| {
            let predictions: Vec<Vec<f64>> = reps.iter().map(|r| r.preds[j].0.clone()).collect();
            let mut var_model = vec![0.0; t.len()];
            let mut mean = vec![0.0; t.len()];
            for r in &reps {
                for g in 0..t.len() {
                    var_model[g] += r.preds[j].1[g] / bf;
                    mean[g] += r.preds[j].0[g] / bf;
                }
            }
            let mut var_eigen = vec![0.0; t.len()];
            for p in &predictions {
                for g in 0..t.len() {
                    var_eigen[g] += (p[g] - mean[g]).powi(2) / bf;
                }
            }
            TargetVariance {
                var_model,
                var_eigen,
                predictions,
            }
        })
        .collect();
    let error_cov = if config.averaged_error_cov && config.replicates > 0 {
        let parts: Vec<ErrorCovariance> = reps.iter().filter_map(|r| r.error_cov.clone()).collect();
        Some(ErrorCovariance::average(&parts)?)
    } else {
        None
    };
    Ok(BootstrapOutput {
        targets: out,
        error_cov,
        redraws: reps.iter().map(|r| r.redraws).sum(),
    })
}

/// Upper `alpha/2` quantile of the standard normal.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(1.0 - alpha / 2.0))
}

/// Pointwise band `ŷ ± z·se` with its variance components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub t: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub var_model: Vec<f64>,
    pub var_eigen: Vec<f64>,
    pub var_noise: Vec<f64>,
    pub se_total: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub z: f64,
    /// False when no bootstrap was run and `var_eigen` is zero by construction.
    pub bootstrapped: bool,
}

impl PredictionBand {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Band at another level from the same components.
    pub fn at_level(&self, alpha: f64) -> Result<PredictionBand> {
        prediction_band(
            &self.t,
            &self.y_hat,
            &self.var_model,
            &self.var_eigen,
            &self.var_noise,
            alpha,
            self.bootstrapped,
        )
    }
}

fn clip(name: &str, v: &[f64]) -> Vec<f64> {
    let bad = v.iter().filter(|x| **x < 0.0).count();
    if bad > 0 {
        log::warn!("{bad} negative {name} value(s) clipped at 0");
    }
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Combine the components into a band at level `1 − alpha`.
pub fn prediction_band(
    t: &[f64],
    y_hat: &[f64],
    var_model: &[f64],
    var_eigen: &[f64],
    var_noise: &[f64],
    alpha: f64,
    bootstrapped: bool,
) -> Result<PredictionBand> {
    let g = t.len();
    if [y_hat.len(), var_model.len(), var_eigen.len(), var_noise.len()]
        .iter()
        .any(|&l| l != g)
    {
        return Err(Error::GridMismatch("band components differ in length".into()));
    }
    let z = normal_quantile(alpha)?;
    let var_model = clip("model variance", var_model);
    let var_eigen = clip("eigenbasis variance", var_eigen);
    let var_noise = clip("noise variance", var_noise);
    let se_total: Vec<f64> = (0..g)
        .map(|i| (var_model[i] + var_eigen[i] + var_noise[i]).sqrt())
        .collect();
    Ok(PredictionBand {
        t: t.to_vec(),
        y_hat: y_hat.to_vec(),
        lower: (0..g).map(|i| y_hat[i] - z * se_total[i]).collect(),
        upper: (0..g).map(|i| y_hat[i] + z * se_total[i]).collect(),
        var_model,
        var_eigen,
        var_noise,
        se_total,
        alpha,
        z,
        bootstrapped,
    })
}

/// Bands for every target from a base fit and, when `config.replicates > 0`,
/// a bootstrap of the training subjects. Without the bootstrap the model
/// variance is the base fit's conditional variance and the eigenbasis part
/// is zero.
pub fn prediction_bands(
    fit: &AffpcFit,
    data: &TrainingData,
    targets: &[PreparedCovariate],
    t: &[f64],
    alpha: f64,
    config: &BootstrapConfig,
) -> Result<Vec<PredictionBand>> {
    let base: Vec<(Vec<f64>, Vec<f64>)> = targets
        .iter()
        .map(|x0| {
            let p = fit.predict_prepared(x0, t)?;
            let v = conditional_variance(fit, &p.z, t)?;
            Ok((p.y_hat, v))
        })
        .collect::<Result<_>>()?;
    if config.replicates == 0 {
        let noise = fit.error_cov.variance_on(t);
        return base
            .iter()
            .map(|(y, v)| prediction_band(t, y, v, &vec![0.0; t.len()], &noise, alpha, false))
            .collect();
    }
    let boot = bootstrap_variance(data, &fit.options, targets, t, config)?;
    let noise = boot.error_cov.as_ref().unwrap_or(&fit.error_cov).variance_on(t);
    base.iter()
        .zip(&boot.targets)
        .map(|((y, _), tv)| prediction_band(t, y, &tv.var_model, &tv.var_eigen, &noise, alpha, true))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Fraction of (curve, t) pairs inside their band.
    pub overall: f64,
    /// Per-t fraction over curves; empty when the bands use different grids.
    pub per_t: Vec<f64>,
    pub pairs: usize,
}

/// Empirical coverage of `truths`, each given on its band's grid.
pub fn coverage_evaluate(bands: &[PredictionBand], truths: &[Vec<f64>]) -> Result<Coverage> {
    if bands.len() != truths.len() {
        return Err(Error::GridMismatch(format!(
            "{} bands for {} curves",
            bands.len(),
            truths.len()
        )));
    }
    let mut hits = 0usize;
    let mut pairs = 0usize;
    let common = bands.windows(2).all(|w| w[0].t == w[1].t);
    let g = bands.first().map_or(0, PredictionBand::len);
    let mut per_t = vec![0.0; if common { g } else { 0 }];
    for (i, (band, y)) in bands.iter().zip(truths).enumerate() {
        if band.len() != y.len() {
            return Err(Error::GridMismatch(format!(
                "curve {i} has {} values on a {}-point band",
                y.len(),
                band.len()
            )));
        }
        for j in 0..y.len() {
            let inside = band.lower[j] <= y[j] && y[j] <= band.upper[j];
            pairs += 1;
            if inside {
                hits += 1;
                if common {
                    per_t[j] += 1.0;
                }
            }
        }
    }
    let n = bands.len().max(1) as f64;
    per_t.iter_mut().for_each(|v| *v /= n);
    Ok(Coverage {
        overall: if pairs == 0 { f64::NAN } else { hits as f64 / pairs as f64 },
        per_t,
        pairs,
    })
}
