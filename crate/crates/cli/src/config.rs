//! Run configuration.
//!
//! Settings are flat `key = value` pairs. They come from three layers, later
//! ones winning: built-in defaults, an optional config file, and command-line
//! overrides. The file grammar is one pair per line; blank lines and lines
//! starting with `#` are ignored; keys are lowercase identifiers and may
//! appear at most once per file. List values are comma separated.
//!
//! ```text
//! # fit settings
//! input = data/train.csv
//! kx = 7
//! lambda = search
//! criterion = gcv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use affpc::fpca::Design;
use affpc::model::{
    CovariateSmoothing, Criterion, FitOptions, LambdaGrid, LambdaSpec, ModelKind,
};
use affpc::sim::{CoverageSpec, ErrorKind, Kernel, SimConfig};

use crate::error::CliError;

/// Every accepted key with its default (empty when unset) and a one-line
/// description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("input", "", "training CSV (long format), or the hourly bike CSV for prepare-bike"),
    ("covariates", "", "CSV of new covariate curves for predict and band"),
    ("model", "", "model JSON written by fit"),
    ("out", "out", "output directory"),
    ("kind", "additive", "additive or linear"),
    ("kx", "7", "B-spline functions in the covariate-value direction"),
    ("ks", "7", "B-spline functions in the covariate-time direction"),
    ("degree_x", "3", "spline degree in the covariate-value direction"),
    ("degree_s", "3", "spline degree in the covariate-time direction"),
    ("pve", "0.95", "proportion of response variance kept by the eigenbasis"),
    ("design", "auto", "response design: auto, dense or sparse"),
    ("covariate_smoothing", "fpca", "none, curve or fpca"),
    ("covariate_pve", "0.99", "variance kept when smoothing covariates by FPCA"),
    ("standardize", "true", "center and scale the covariate pointwise"),
    ("intercept", "false", "add an unpenalized intercept column"),
    ("lambda", "search", "search or fixed"),
    ("lambda_x", "1", "fixed smoothing parameter for the covariate-value direction"),
    ("lambda_s", "1", "fixed smoothing parameter for the covariate-time direction"),
    ("criterion", "gcv", "gcv or reml"),
    ("lambda_lo", "1e-6", "smallest smoothing parameter searched"),
    ("lambda_hi", "1e6", "largest smoothing parameter searched"),
    ("lambda_points", "11", "log-spaced search points per direction"),
    ("lambda_refine", "true", "refine around the best grid point"),
    ("replicates", "100", "bootstrap replicates (0 disables the bootstrap)"),
    ("alpha", "0.05", "band level is 1 - alpha"),
    ("averaged_error_cov", "false", "use the bootstrap-averaged error covariance"),
    ("grid_points", "0", "prediction grid size; 0 uses the model's response grid"),
    ("seed", "1", "seed for every random draw"),
    ("workers", "0", "worker threads; 0 uses all cores"),
    ("n", "300", "training subjects per simulated data set (comma list allowed)"),
    ("n_test", "50", "test subjects per simulated data set"),
    ("kernel", "F2", "F1, F2 or F3 (comma list allowed)"),
    ("error", "E1", "E1 to E4 (comma list allowed)"),
    ("sim_design", "dense", "dense or sparse (comma list allowed)"),
    ("noise_sd_x", "0.7071067811865476", "covariate measurement-noise sd"),
    ("n_mc", "100", "Monte Carlo replicates"),
    ("m_s", "81", "covariate grid points"),
    ("m_t", "101", "response grid points"),
    ("quad_points", "401", "quadrature nodes for simulated responses"),
    ("levels", "0.85,0.90,0.95", "nominal coverage levels"),
    ("train_size", "89", "training days for prepare-bike"),
];

pub fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

fn check_key(key: &str, origin: &str) -> Result<(), CliError> {
    if default_of(key).is_none() {
        return Err(CliError::Input(format!("{origin}: unknown key '{key}'")));
    }
    Ok(())
}

/// Parse the flat key-value grammar.
pub fn parse_settings(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let where_ = format!("{origin}:{}", i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("{where_}: expected 'key = value'")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
            return Err(CliError::Input(format!("{where_}: invalid key '{k}'")));
        }
        check_key(k, &where_)?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Input(format!("{where_}: key '{k}' given twice")));
        }
    }
    Ok(out)
}

/// Merged settings: defaults, then the file, then overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
            values.extend(parse_settings(&text, &path.display().to_string())?);
        }
        for (k, v) in overrides {
            check_key(k, "command line")?;
            values.insert(k.clone(), v.clone());
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>()
            .map_err(|e| CliError::Input(format!("key '{key}': cannot parse '{raw}': {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let items: Vec<&str> = self.get(key).split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(CliError::Input(format!("key '{key}' needs at least one value")));
        }
        items
            .into_iter()
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| CliError::Input(format!("key '{key}': cannot parse '{s}': {e}")))
            })
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)
            .ok_or_else(|| CliError::Input(format!("key '{key}' is required for this command")))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out").unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn workers(&self) -> Result<usize, CliError> {
        self.parse("workers")
    }

    pub fn fit_options(&self) -> Result<FitOptions, CliError> {
        let kind = match self.get("kind") {
            "additive" => ModelKind::Additive,
            "linear" => ModelKind::Linear,
            other => return Err(CliError::Input(format!("key 'kind': expected additive or linear, got '{other}'"))),
        };
        let design = match self.get("design") {
            "auto" => None,
            other => Some(Design::from_str(other).map_err(|e| CliError::Input(format!("key 'design': {e}")))?),
        };
        let covariate_smoothing = match self.get("covariate_smoothing") {
            "none" => CovariateSmoothing::None,
            "curve" => CovariateSmoothing::Curve,
            "fpca" => CovariateSmoothing::Fpca {
                pve: self.parse("covariate_pve")?,
            },
            other => {
                return Err(CliError::Input(format!(
                    "key 'covariate_smoothing': expected none, curve or fpca, got '{other}'"
                )))
            }
        };
        let lambda = match self.get("lambda") {
            "search" => LambdaSpec::Search {
                criterion: self.parse::<Criterion>("criterion")?,
                grid: LambdaGrid {
                    lo: self.parse("lambda_lo")?,
                    hi: self.parse("lambda_hi")?,
                    points: self.parse("lambda_points")?,
                    refine: self.parse("lambda_refine")?,
                },
            },
            "fixed" => LambdaSpec::Fixed {
                x: self.parse("lambda_x")?,
                s: self.parse("lambda_s")?,
            },
            other => return Err(CliError::Input(format!("key 'lambda': expected search or fixed, got '{other}'"))),
        };
        let options = FitOptions {
            kind,
            kx: self.parse("kx")?,
            ks: self.parse("ks")?,
            degree_x: self.parse("degree_x")?,
            degree_s: self.parse("degree_s")?,
            pve: self.parse("pve")?,
            design,
            covariate_smoothing,
            standardize: self.parse("standardize")?,
            lambda,
            intercept: self.parse("intercept")?,
            response_grid: None,
            covariate_grid: None,
        };
        options.validate()?;
        Ok(options)
    }

    pub fn replicates(&self) -> Result<usize, CliError> {
        self.parse("replicates")
    }

    pub fn alpha(&self) -> Result<f64, CliError> {
        let a: f64 = self.parse("alpha")?;
        if !(a > 0.0 && a < 1.0) {
            return Err(CliError::Input(format!("key 'alpha' must lie in (0, 1), got {a}")));
        }
        Ok(a)
    }

    pub fn averaged_error_cov(&self) -> Result<bool, CliError> {
        self.parse("averaged_error_cov")
    }

    pub fn grid_points(&self) -> Result<usize, CliError> {
        self.parse("grid_points")
    }

    pub fn train_size(&self) -> Result<usize, CliError> {
        self.parse("train_size")
    }

    /// One simulation configuration per combination of the listed kernels,
    /// error processes, designs and sample sizes.
    pub fn sim_configs(&self, with_coverage: bool) -> Result<Vec<SimConfig>, CliError> {
        let kernels: Vec<Kernel> = self.list("kernel")?;
        let errors: Vec<ErrorKind> = self.list("error")?;
        let designs: Vec<Design> = self.list("sim_design")?;
        let ns: Vec<usize> = self.list("n")?;
        let fit = self.fit_options()?;
        let coverage = if with_coverage {
            let levels: Vec<f64> = self.list("levels")?;
            if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
                return Err(CliError::Input(format!("key 'levels': {l} is not in (0, 1)")));
            }
            Some(CoverageSpec {
                replicates: self.replicates()?,
                levels,
                averaged_error_cov: self.averaged_error_cov()?,
            })
        } else {
            None
        };
        let mut out = Vec::new();
        for &kernel in &kernels {
            for &error in &errors {
                for &design in &designs {
                    for &n in &ns {
                        let config = SimConfig {
                            n,
                            n_test: self.parse("n_test")?,
                            design,
                            kernel,
                            error,
                            noise_sd_x: self.parse("noise_sd_x")?,
                            seed: self.seed()?,
                            n_mc: self.parse("n_mc")?,
                            m_s: self.parse("m_s")?,
                            m_t: self.parse("m_t")?,
                            quad_points: self.parse("quad_points")?,
                            fit: fit.clone(),
                            coverage: coverage.clone(),
                        };
                        config.validate()?;
                        out.push(config);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Split `key=value` override strings.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>, CliError> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Input(format!("override '{s}' is not key=value")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nkx = 5\n\nks=4\n").unwrap();
        let s = Settings::resolve(Some(&path), &[("kx".into(), "6".into())]).unwrap();
        assert_eq!(s.get("kx"), "6");
        assert_eq!(s.get("ks"), "4");
        assert_eq!(s.get("pve"), "0.95");
        let o = s.fit_options().unwrap();
        assert_eq!((o.kx, o.ks), (6, 4));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(parse_settings("kz = 3", "f").is_err());
        assert!(parse_settings("kx = 3\nkx = 4", "f").is_err());
        assert!(parse_settings("just text", "f").is_err());
        assert!(Settings::resolve(None, &[("bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn bad_values_are_reported_by_key() {
        let s = Settings::resolve(None, &[("kx".into(), "seven".into())]).unwrap();
        let err = s.fit_options().unwrap_err().to_string();
        assert!(err.contains("'kx'"), "{err}");
        let s = Settings::resolve(None, &[("n_mc".into(), "0".into())]).unwrap();
        assert!(s.sim_configs(false).is_err());
    }

    #[test]
    fn lists_expand_to_a_grid_of_configs() {
        let s = Settings::resolve(
            None,
            &[("kernel".into(), "F1,F3".into()), ("n".into(), "50, 100".into())],
        )
        .unwrap();
        let configs = s.sim_configs(true).unwrap();
        assert_eq!(configs.len(), 4);
        assert_eq!(configs[3].kernel, Kernel::F3);
        assert_eq!(configs[3].n, 100);
        assert_eq!(configs[0].coverage.as_ref().unwrap().levels, vec![0.85, 0.90, 0.95]);
    }

    #[test]
    fn every_default_parses() {
        let s = Settings::resolve(None, &[]).unwrap();
        let o = s.fit_options().unwrap();
        assert_eq!(o, FitOptions::default());
        s.sim_configs(true).unwrap();
        assert_eq!(s.replicates().unwrap(), 100);
        assert_eq!(s.alpha().unwrap(), 0.05);
    }
}
