//! The subcommands. Each writes its artifacts plus `manifest.json` into the
//! output directory and never touches its inputs.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use affpc::fpca::Curve;
use affpc::funcdata::{load_csv, save_csv, CsvFormat, FunctionalDataset};
use affpc::inference::{
    conditional_variance, prediction_band, prediction_bands, BootstrapConfig, PredictionBand,
};
use affpc::model::{fit, AffpcFit, PreparedCovariate, TrainingData};
use affpc::sim::{rmspe, run_experiment, McReport};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bike;
use crate::config::Settings;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Predict,
    Band,
    Simulate,
    Coverage,
    PrepareBike,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Band => "band",
            Command::Simulate => "simulate",
            Command::Coverage => "coverage",
            Command::PrepareBike => "prepare-bike",
        }
    }
}

/// Files written by a run, relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub outputs: Vec<String>,
}

struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(CliError::io(format!("cannot create {}", dir.display())))?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io(format!("cannot create {}", parent.display())))?;
        }
        fs::write(&path, bytes).map_err(CliError::io(format!("cannot write {}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
        self.write(name, &bytes)
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = fs::File::open(path).map_err(CliError::io(format!("cannot open {}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(CliError::io(format!("cannot read {}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn input_record(key: &str, path: &Path) -> Result<Value, CliError> {
    Ok(json!({
        "key": key,
        "path": path.display().to_string(),
        "sha256": sha256_file(path)?,
    }))
}

fn load_training(path: &Path) -> Result<(FunctionalDataset, usize), CliError> {
    let report = load_csv(path, &CsvFormat::training())
        .map_err(|e| with_file(e, path))?;
    Ok((report.dataset, report.dropped_rows))
}

fn load_covariates(path: &Path, model: &AffpcFit) -> Result<FunctionalDataset, CliError> {
    let format = CsvFormat {
        covariate_domain: Some(model.covariate_domain),
        response_domain: Some(model.response_domain),
        require_response: false,
    };
    Ok(load_csv(path, &format).map_err(|e| with_file(e, path))?.dataset)
}

fn with_file(e: affpc::Error, path: &Path) -> CliError {
    match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn load_model(path: &Path) -> Result<AffpcFit, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read model {}: {e}", path.display())))?;
    AffpcFit::from_json(&text).map_err(|e| CliError::Compatibility(format!("{}: {e}", path.display())))
}

fn prediction_grid(model: &AffpcFit, points: usize) -> Vec<f64> {
    if points == 0 {
        model.response.grid.clone()
    } else {
        model.response_domain.linspace(points.max(2))
    }
}

fn curve_of(s: &affpc::funcdata::SubjectRecord) -> Curve {
    Curve::new(s.s_grid.clone(), s.x_values.clone())
}

/// Run `command` with `settings`, inside a pool of `workers` threads when
/// that is nonzero.
pub fn run(command: Command, settings: &Settings) -> Result<RunSummary, CliError> {
    let workers = settings.workers()?;
    if workers == 0 {
        return run_inner(command, settings);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Input(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| run_inner(command, settings))
}

fn run_inner(command: Command, settings: &Settings) -> Result<RunSummary, CliError> {
    let start = Instant::now();
    let mut out = Output::new(settings.out_dir())?;
    let mut inputs = Vec::new();
    let mut timings = serde_json::Map::new();
    match command {
        Command::Fit => cmd_fit(settings, &mut out, &mut inputs)?,
        Command::Predict => cmd_predict(settings, &mut out, &mut inputs)?,
        Command::Band => cmd_band(settings, &mut out, &mut inputs)?,
        Command::Simulate => cmd_simulate(settings, &mut out, &mut timings, false)?,
        Command::Coverage => cmd_simulate(settings, &mut out, &mut timings, true)?,
        Command::PrepareBike => cmd_prepare_bike(settings, &mut out, &mut inputs)?,
    }
    timings.insert("total_seconds".into(), json!(start.elapsed().as_secs_f64()));
    let mut outputs = out.written.clone();
    outputs.push("manifest.json".into());
    let manifest = json!({
        "tool": "affpc",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command.name(),
        "seed": settings.get("seed"),
        "settings": settings.iter().collect::<std::collections::BTreeMap<_, _>>(),
        "inputs": inputs,
        "outputs": outputs,
        "timings": timings,
    });
    out.json("manifest.json", &manifest)?;
    Ok(RunSummary { outputs: out.written })
}

fn cmd_fit(settings: &Settings, out: &mut Output, inputs: &mut Vec<Value>) -> Result<(), CliError> {
    let options = settings.fit_options()?;
    let input = settings.require_path("input")?;
    inputs.push(input_record("input", &input)?);
    let (ds, dropped) = load_training(&input)?;
    let model = fit(&ds, &options)?;

    out.write("model.json", model.to_json()?.as_bytes())?;

    let mut rows = Vec::new();
    let mut fitted_all = Vec::new();
    let mut observed_all = Vec::new();
    for s in ds.subjects() {
        let p = model.predict_curve(&curve_of(s), s.scalar_covariates.as_deref(), &s.t_grid)?;
        for ((t, y), f) in s.t_grid.iter().zip(&s.y_values).zip(&p.y_hat) {
            rows.push(vec![s.id.clone(), num(*t), num(*y), num(*f), num(y - f)]);
        }
        fitted_all.push(p.y_hat);
        observed_all.push(s.y_values.clone());
    }
    out.csv("residuals.csv", &["subject_id", "t", "y", "fitted", "residual"], rows)?;

    let ec = &model.error_cov;
    out.json(
        "error_covariance.json",
        &json!({
            "grid": ec.grid,
            "nugget": ec.nugget,
            "eigenvalues": ec.eigenvalues,
            "variance": ec.variance_on(&ec.grid),
        }),
    )?;

    let sel = &model.lambda;
    let trace_rows: Vec<Vec<String>> = if sel.trace.is_empty() {
        vec![vec![sel.method.clone(), num(sel.lambda_x), num(sel.lambda_s), String::new(), String::new(), String::new()]]
    } else {
        sel.trace
            .iter()
            .map(|tr| {
                vec![
                    sel.method.clone(),
                    num(tr.lambda_x),
                    num(tr.lambda_s),
                    tr.score.map(num).unwrap_or_default(),
                    num(tr.edf),
                    if tr.refinement { "refine" } else { "grid" }.into(),
                ]
            })
            .collect()
    };
    out.csv("lambda_trace.csv", &["method", "lambda_x", "lambda_s", "score", "edf", "stage"], trace_rows)?;

    out.json(
        "fit_report.json",
        &json!({
            "subjects": ds.len(),
            "dropped_rows": dropped,
            "kind": model.kind(),
            "response_design": model.response_design,
            "k": model.k(),
            "pve": model.response.pve,
            "eigenvalues": model.response.eigenvalues,
            "lambda_method": sel.method,
            "lambda_x": sel.lambda_x,
            "lambda_s": sel.lambda_s,
            "rmspe_in": rmspe(&fitted_all, &observed_all)?,
        }),
    )?;
    log::info!("fitted {} subjects with K = {}", ds.len(), model.k());
    Ok(())
}

fn cmd_predict(settings: &Settings, out: &mut Output, inputs: &mut Vec<Value>) -> Result<(), CliError> {
    let points = settings.grid_points()?;
    let model_path = settings.require_path("model")?;
    let cov_path = settings.require_path("covariates")?;
    inputs.push(input_record("model", &model_path)?);
    inputs.push(input_record("covariates", &cov_path)?);
    let model = load_model(&model_path)?;
    let ds = load_covariates(&cov_path, &model)?;
    let t = prediction_grid(&model, points);
    let mut rows = Vec::new();
    for s in ds.subjects() {
        let p = model.predict_curve(&curve_of(s), s.scalar_covariates.as_deref(), &t)?;
        for (tv, y) in t.iter().zip(&p.y_hat) {
            rows.push(vec![s.id.clone(), num(*tv), num(*y)]);
        }
    }
    out.csv("predictions.csv", &["subject_id", "t", "y_hat"], rows)
}

/// Fraction of observed (subject, t) responses that fall inside their band;
/// only band grid points where the subject has an observation count.
pub fn observed_coverage(bands: &[PredictionBand], subjects: &[affpc::funcdata::SubjectRecord]) -> Option<(f64, usize)> {
    let mut hits = 0usize;
    let mut pairs = 0usize;
    for (band, s) in bands.iter().zip(subjects) {
        for (j, &t) in band.t.iter().enumerate() {
            if let Some(k) = s.t_grid.iter().position(|&u| (u - t).abs() <= 1e-9 * (1.0 + t.abs())) {
                pairs += 1;
                if band.lower[j] <= s.y_values[k] && s.y_values[k] <= band.upper[j] {
                    hits += 1;
                }
            }
        }
    }
    (pairs > 0).then(|| (hits as f64 / pairs as f64, pairs))
}

/// Bands without the bootstrap: conditional model variance plus noise.
fn base_bands(model: &AffpcFit, targets: &[PreparedCovariate], t: &[f64], alpha: f64) -> Result<Vec<PredictionBand>, CliError> {
    let noise = model.error_cov.variance_on(t);
    targets
        .iter()
        .map(|x0| {
            let p = model.predict_prepared(x0, t)?;
            let v = conditional_variance(model, &p.z, t)?;
            Ok(prediction_band(t, &p.y_hat, &v, &vec![0.0; t.len()], &noise, alpha, false)?)
        })
        .collect()
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn cmd_band(settings: &Settings, out: &mut Output, inputs: &mut Vec<Value>) -> Result<(), CliError> {
    let points = settings.grid_points()?;
    let alpha = settings.alpha()?;
    let replicates = settings.replicates()?;
    if replicates == 1 {
        return Err(CliError::Input("key 'replicates': the bootstrap needs 0 or at least 2 replicates".into()));
    }
    let config = BootstrapConfig {
        replicates,
        seed: settings.seed()?,
        averaged_error_cov: settings.averaged_error_cov()?,
    };
    let model_path = settings.require_path("model")?;
    let cov_path = settings.require_path("covariates")?;
    inputs.push(input_record("model", &model_path)?);
    inputs.push(input_record("covariates", &cov_path)?);
    let model = load_model(&model_path)?;
    let ds = load_covariates(&cov_path, &model)?;
    let t = prediction_grid(&model, points);
    let bands = if replicates == 0 {
        let targets: Vec<PreparedCovariate> = ds
            .subjects()
            .iter()
            .map(|s| model.prepare(curve_of(s), s.scalar_covariates.clone()))
            .collect::<Result<_, _>>()?;
        base_bands(&model, &targets, &t, alpha)?
    } else {
        let input = settings.require_path("input")?;
        inputs.push(input_record("input", &input)?);
        let (train, _) = load_training(&input)?;
        let data = TrainingData::new(&train, &model.options)?;
        let targets: Vec<PreparedCovariate> = ds
            .subjects()
            .iter()
            .map(|s| data.prepare(curve_of(s), s.scalar_covariates.clone()))
            .collect::<Result<_, _>>()?;
        prediction_bands(&model, &data, &targets, &t, alpha, &config)?
    };

    let header = ["t", "y_hat", "se_total", "lower", "upper", "var_model", "var_eigen", "var_noise"];
    let mut names = Vec::new();
    for (s, band) in ds.subjects().iter().zip(&bands) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for j in 0..band.t.len() {
            w.write_record([
                num(band.t[j]),
                num(band.y_hat[j]),
                num(band.se_total[j]),
                num(band.lower[j]),
                num(band.upper[j]),
                num(band.var_model[j]),
                num(band.var_eigen[j]),
                num(band.var_noise[j]),
            ])?;
        }
        let body = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
        let mut bytes = Vec::new();
        if !band.bootstrapped {
            bytes.extend_from_slice(b"# no bootstrap (replicates = 0): var_eigen is zero; model and noise variance only\n");
        }
        bytes.extend_from_slice(&body);
        let mut name = format!("bands/{}.csv", file_stem(&s.id));
        if names.contains(&name) {
            name = format!("bands/{}_{}.csv", file_stem(&s.id), names.len());
        }
        out.write(&name, &bytes)?;
        names.push(name);
    }
    let coverage = observed_coverage(&bands, ds.subjects());
    out.json(
        "band_summary.json",
        &json!({
            "subjects": ds.len(),
            "alpha": alpha,
            "replicates": replicates,
            "bootstrapped": replicates > 0,
            "files": names,
            "coverage": coverage.map(|c| c.0),
            "coverage_pairs": coverage.map(|c| c.1),
        }),
    )
}

fn cmd_simulate(
    settings: &Settings,
    out: &mut Output,
    timings: &mut serde_json::Map<String, Value>,
    with_coverage: bool,
) -> Result<(), CliError> {
    let configs = settings.sim_configs(with_coverage)?;
    let mut reports: Vec<McReport> = Vec::new();
    for config in &configs {
        log::info!(
            "running {} x {} n={} {} ({} replicates)",
            config.kernel,
            config.error,
            config.n,
            config.design,
            config.n_mc
        );
        reports.push(run_experiment(config)?);
    }

    let mut long = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        let text = String::from_utf8(buf).expect("csv is utf-8");
        let skip = if i == 0 { 0 } else { 1 };
        for line in text.lines().skip(skip) {
            long.extend_from_slice(line.as_bytes());
            long.push(b'\n');
        }
    }
    out.write("results.csv", &long)?;

    let gains = reports.iter().map(|r| {
        let res = &r.results;
        let c = &res.config;
        let m = |name: &str| res.methods.iter().find(|m| m.method == name).expect("both methods summarized");
        let (a, b) = (m("affpc"), m("flm"));
        vec![
            c.kernel.to_string(),
            c.error.to_string(),
            c.design.to_string(),
            c.n.to_string(),
            res.completed.to_string(),
            res.failed.to_string(),
            num(a.rmspe_in.mean),
            num(b.rmspe_in.mean),
            num(res.relative_gain_in),
            num(a.rmspe_out.mean),
            num(b.rmspe_out.mean),
            num(res.relative_gain_out),
            num(res.relative_gain_out_observed),
        ]
    });
    out.csv(
        "relative_gains.csv",
        &[
            "kernel",
            "error",
            "design",
            "n",
            "completed",
            "failed",
            "rmspe_in_affpc",
            "rmspe_in_flm",
            "gain_in",
            "rmspe_out_affpc",
            "rmspe_out_flm",
            "gain_out",
            "gain_out_observed",
        ],
        gains.collect::<Vec<_>>(),
    )?;

    if with_coverage {
        let rows = reports.iter().flat_map(|r| {
            let c = &r.results.config;
            r.results.coverage.iter().map(move |l| {
                vec![
                    c.kernel.to_string(),
                    c.error.to_string(),
                    c.design.to_string(),
                    c.n.to_string(),
                    num(l.nominal),
                    num(l.coverage.mean),
                    num(l.coverage.se),
                ]
            })
        });
        out.csv(
            "coverage.csv",
            &["kernel", "error", "design", "n", "nominal", "coverage", "se"],
            rows.collect::<Vec<_>>(),
        )?;
    }

    let summaries: Vec<_> = reports.iter().map(|r| &r.results).collect();
    out.json("summary.json", &summaries)?;
    let per_config: Vec<Value> = reports
        .iter()
        .map(|r| {
            let c = &r.results.config;
            json!({
                "kernel": c.kernel.to_string(),
                "error": c.error.to_string(),
                "design": c.design.to_string(),
                "n": c.n,
                "mean_fit_seconds": r.timing.mean_fit_seconds,
                "total_seconds": r.timing.total_seconds,
            })
        })
        .collect();
    timings.insert("experiments".into(), Value::Array(per_config));
    Ok(())
}

fn cmd_prepare_bike(settings: &Settings, out: &mut Output, inputs: &mut Vec<Value>) -> Result<(), CliError> {
    let train_size = settings.train_size()?;
    let seed = settings.seed()?;
    let input = settings.require_path("input")?;
    inputs.push(input_record("input", &input)?);
    let file = fs::File::open(&input).map_err(|e| CliError::Input(format!("cannot open {}: {e}", input.display())))?;
    let days = bike::read_saturdays(file)?;
    let ds = bike::to_dataset(&days)?;
    let (train, test) = bike::split(ds.len(), train_size, seed)?;
    for (name, idx) in [("bike_train.csv", &train), ("bike_test.csv", &test)] {
        let path = out.path(name);
        let file = fs::File::create(&path).map_err(CliError::io(format!("cannot write {}", path.display())))?;
        let mut w = BufWriter::new(file);
        save_subset(&ds, idx, &mut w)?;
        w.flush().map_err(CliError::io(format!("cannot write {}", path.display())))?;
        out.written.push(name.into());
    }
    log::info!("{} Saturdays: {} training, {} test", ds.len(), train.len(), test.len());
    Ok(())
}

fn save_subset<W: Write>(ds: &FunctionalDataset, idx: &[usize], w: W) -> Result<(), CliError> {
    affpc::funcdata::write_csv(&ds.resample(idx), w)?;
    Ok(())
}

/// Write `ds` in the long CSV format.
pub fn save_dataset(ds: &FunctionalDataset, path: &Path) -> Result<(), CliError> {
    save_csv(ds, path)?;
    Ok(())
}
