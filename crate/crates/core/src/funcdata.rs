//! Discretely observed functional data: the dataset model, trapezoid
//! quadrature, a penalized-spline curve smoother and long-format CSV I/O.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{make_basis, BSplineBasis};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn unit() -> Self {
        Self::new(0.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        let slack = 1e-12 * self.width().abs().max(1.0);
        x >= self.lo - slack && x <= self.hi + slack
    }

    /// Smallest interval holding every value; `None` for an empty input.
    pub fn hull<I: IntoIterator<Item = f64>>(values: I) -> Option<Self> {
        let mut it = values.into_iter();
        let first = it.next()?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Self::new(lo, hi))
    }

    /// `n` equally spaced points from `lo` to `hi` inclusive.
    pub fn linspace(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![self.lo],
            _ => (0..n)
                .map(|i| {
                    if i == n - 1 {
                        self.hi
                    } else {
                        self.lo + self.width() * i as f64 / (n - 1) as f64
                    }
                })
                .collect(),
        }
    }
}

/// One subject: a sampled covariate curve and a sampled response curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub s_grid: Vec<f64>,
    pub x_values: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub y_values: Vec<f64>,
    pub scalar_covariates: Option<Vec<f64>>,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        s_grid: Vec<f64>,
        x_values: Vec<f64>,
        t_grid: Vec<f64>,
        y_values: Vec<f64>,
    ) -> Self {
        Self {
            id: id.into(),
            s_grid,
            x_values,
            t_grid,
            y_values,
            scalar_covariates: None,
        }
    }

    pub fn with_scalars(mut self, scalars: Vec<f64>) -> Self {
        self.scalar_covariates = Some(scalars);
        self
    }

    /// The covariate half of the record.
    pub fn covariate(&self) -> CovariateCurve {
        CovariateCurve {
            grid: self.s_grid.clone(),
            values: self.x_values.clone(),
            scalars: self.scalar_covariates.clone(),
        }
    }
}

/// A covariate curve on its own grid, with optional scalar covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub scalars: Option<Vec<f64>>,
}

/// A collection of subjects sharing response and covariate domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalDataset {
    subjects: Vec<SubjectRecord>,
    response_domain: Interval,
    covariate_domain: Interval,
    scalar_names: Vec<String>,
    has_response: bool,
}

fn check_strictly_increasing(grid: &[f64], what: &str, id: &str) -> Result<()> {
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset(format!(
            "subject '{id}': non-finite {what} argument"
        )));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidDataset(format!(
            "subject '{id}': {what} grid is not strictly increasing"
        )));
    }
    Ok(())
}

impl FunctionalDataset {
    /// Validate and assemble a dataset whose subjects all carry a response.
    pub fn new(
        subjects: Vec<SubjectRecord>,
        response_domain: Interval,
        covariate_domain: Interval,
    ) -> Result<Self> {
        Self::build(subjects, response_domain, covariate_domain, true)
    }

    /// A dataset of covariates only, e.g. new curves to predict for.
    pub fn covariates_only(subjects: Vec<SubjectRecord>, covariate_domain: Interval) -> Result<Self> {
        Self::build(subjects, Interval::unit(), covariate_domain, false)
    }

    fn build(
        subjects: Vec<SubjectRecord>,
        response_domain: Interval,
        covariate_domain: Interval,
        has_response: bool,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::NoSubjects);
        }
        let n_scalars = subjects[0].scalar_covariates.as_ref().map(Vec::len);
        for s in &subjects {
            if s.s_grid.len() != s.x_values.len() || s.t_grid.len() != s.y_values.len() {
                return Err(Error::InvalidDataset(format!(
                    "subject '{}': argument and value lengths differ",
                    s.id
                )));
            }
            if s.s_grid.len() < 2 {
                return Err(Error::InvalidDataset(format!(
                    "subject '{}': needs at least 2 covariate points, has {}",
                    s.id,
                    s.s_grid.len()
                )));
            }
            if has_response && s.t_grid.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "subject '{}': no response observations",
                    s.id
                )));
            }
            check_strictly_increasing(&s.s_grid, "covariate", &s.id)?;
            check_strictly_increasing(&s.t_grid, "response", &s.id)?;
            if let Some(bad) = s.s_grid.iter().find(|&&v| !covariate_domain.contains(v)) {
                return Err(Error::InvalidDataset(format!(
                    "subject '{}': covariate argument {bad} outside [{}, {}]",
                    s.id, covariate_domain.lo, covariate_domain.hi
                )));
            }
            if has_response {
                if let Some(bad) = s.t_grid.iter().find(|&&v| !response_domain.contains(v)) {
                    return Err(Error::InvalidDataset(format!(
                        "subject '{}': response argument {bad} outside [{}, {}]",
                        s.id, response_domain.lo, response_domain.hi
                    )));
                }
            }
            if s.scalar_covariates.as_ref().map(Vec::len) != n_scalars {
                return Err(Error::InvalidDataset(format!(
                    "subject '{}': scalar covariate count differs from other subjects",
                    s.id
                )));
            }
        }
        let scalar_names = (0..n_scalars.unwrap_or(0)).map(|j| format!("z{}", j + 1)).collect();
        Ok(Self {
            subjects,
            response_domain,
            covariate_domain,
            scalar_names,
            has_response,
        })
    }

    pub fn with_scalar_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.scalar_names.len() {
            return Err(Error::InvalidDataset(format!(
                "{} scalar names for {} scalar covariates",
                names.len(),
                self.scalar_names.len()
            )));
        }
        self.scalar_names = names;
        Ok(self)
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn response_domain(&self) -> Interval {
        self.response_domain
    }

    pub fn covariate_domain(&self) -> Interval {
        self.covariate_domain
    }

    pub fn scalar_names(&self) -> &[String] {
        &self.scalar_names
    }

    pub fn n_scalars(&self) -> usize {
        self.scalar_names.len()
    }

    pub fn has_response(&self) -> bool {
        self.has_response
    }

    /// New dataset made of the subjects at `indices` (repeats allowed).
    pub fn resample(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            ..self.clone_empty()
        }
    }

    /// Replace response values, keeping grids and covariates.
    pub fn with_responses(&self, responses: Vec<Vec<f64>>) -> Result<Self> {
        if responses.len() != self.subjects.len() {
            return Err(Error::InvalidDataset("response count mismatch".into()));
        }
        let mut subjects = self.subjects.clone();
        for (s, y) in subjects.iter_mut().zip(responses) {
            if y.len() != s.t_grid.len() {
                return Err(Error::InvalidDataset(format!(
                    "subject '{}': response length mismatch",
                    s.id
                )));
            }
            s.y_values = y;
        }
        Ok(Self {
            subjects,
            ..self.clone_empty()
        })
    }

    fn clone_empty(&self) -> Self {
        Self {
            subjects: Vec::new(),
            response_domain: self.response_domain,
            covariate_domain: self.covariate_domain,
            scalar_names: self.scalar_names.clone(),
            has_response: self.has_response,
        }
    }

    /// Sorted union of all response arguments.
    pub fn response_union(&self) -> Vec<f64> {
        union_of(self.subjects.iter().map(|s| s.t_grid.as_slice()))
    }

    /// Sorted union of all covariate arguments.
    pub fn covariate_union(&self) -> Vec<f64> {
        union_of(self.subjects.iter().map(|s| s.s_grid.as_slice()))
    }
}

/// Sorted union of several grids, merging points closer than 1e-9 relative.
pub fn union_of<'a, I: IntoIterator<Item = &'a [f64]>>(grids: I) -> Vec<f64> {
    let mut all: Vec<f64> = grids.into_iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let span = match (all.first(), all.last()) {
        (Some(a), Some(b)) => (b - a).abs().max(1.0),
        _ => return all,
    };
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for v in all {
        if out.last().is_none_or(|&last| v - last > 1e-9 * span) {
            out.push(v);
        }
    }
    out
}

/// Nodes and nonnegative weights of a quadrature rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.weights.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    pub fn integrate_fn<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

/// Trapezoid weights on an increasing grid.
pub fn trapezoid_rule(grid: &[f64]) -> Result<QuadratureRule> {
    if grid.len() < 2 {
        return Err(Error::InvalidGrid(format!(
            "trapezoid rule needs at least 2 points, got {}",
            grid.len()
        )));
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidGrid("grid is not strictly increasing".into()));
    }
    Ok(QuadratureRule {
        nodes: grid.to_vec(),
        weights: trapezoid_weights(grid),
    })
}

/// Trapezoid weights without validation (callers guarantee an increasing grid).
pub(crate) fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for j in 0..n.saturating_sub(1) {
        let h = 0.5 * (grid[j + 1] - grid[j]);
        w[j] += h;
        w[j + 1] += h;
    }
    w
}

/// Controls for [`smooth_curve`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Smoothing {
    /// Number of cubic B-splines; chosen from the number of points when `None`.
    pub n_basis: Option<usize>,
    /// Fixed penalty; selected by GCV when `None`.
    pub lambda: Option<f64>,
    /// Domain of the smooth; the hull of the grid when `None`.
    pub domain: Option<Interval>,
}

impl Smoothing {
    pub fn gcv() -> Self {
        Self::default()
    }

    pub fn on(domain: Interval) -> Self {
        Self {
            domain: Some(domain),
            ..Self::default()
        }
    }
}

/// A fitted cubic penalized spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothCurve {
    basis: BSplineBasis,
    coef: DVector<f64>,
    lambda: f64,
    edf: f64,
}

impl SmoothCurve {
    /// Value at `t`; points outside the basis domain are clamped to it.
    pub fn eval(&self, t: f64) -> f64 {
        self.basis
            .values_clamped(t)
            .iter()
            .zip(self.coef.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn eval_many(&self, ts: &[f64]) -> Vec<f64> {
        ts.iter().map(|&t| self.eval(t)).collect()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Effective degrees of freedom `tr(S)`.
    pub fn edf(&self) -> f64 {
        self.edf
    }
}

fn default_n_basis(m: usize) -> usize {
    (m / 3 + 4).clamp(4, 40).min(m)
}

/// Every B-spline needs at least one point inside its support for the
/// unpenalized normal equations to be well posed.
fn supports_covered(basis: &BSplineBasis, grid: &[f64]) -> bool {
    let k = basis.knots();
    let p = basis.degree();
    (0..basis.n_basis()).all(|j| {
        let (a, b) = (k[j], k[j + p + 1]);
        grid.iter().any(|&t| t > a && t < b) || grid.iter().any(|&t| t == a || t == b)
    })
}

/// Smooth noisy samples of one curve with a cubic penalized spline whose
/// penalty is chosen by generalized cross-validation.
pub fn smooth_curve(grid: &[f64], values: &[f64], smoothing: Smoothing) -> Result<SmoothCurve> {
    let m = grid.len();
    if m < 4 {
        return Err(Error::TooFewPoints { needed: 4, got: m });
    }
    if values.len() != m {
        return Err(Error::GridMismatch(format!(
            "{} arguments but {} values",
            m,
            values.len()
        )));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidGrid("smoothing grid is not strictly increasing".into()));
    }
    let hull = Interval::new(grid[0], grid[m - 1]);
    let domain = smoothing.domain.map_or(hull, |d| {
        Interval::new(d.lo.min(hull.lo), d.hi.max(hull.hi))
    });
    let mut k = smoothing.n_basis.unwrap_or_else(|| default_n_basis(m)).clamp(4, m);
    let basis = loop {
        let b = make_basis(domain, k, 3)?;
        if k == 4 || supports_covered(&b, grid) {
            break b;
        }
        k -= 1;
    };
    fit_penalized_spline(basis, grid, values, None, smoothing.lambda)
}

/// Weighted penalized least squares with a cubic B-spline basis.
pub(crate) fn fit_penalized_spline(
    basis: BSplineBasis,
    grid: &[f64],
    values: &[f64],
    weights: Option<&[f64]>,
    lambda: Option<f64>,
) -> Result<SmoothCurve> {
    let k = basis.n_basis();
    let mut btb = DMatrix::<f64>::zeros(k, k);
    let mut bty = DVector::<f64>::zeros(k);
    let mut yty = 0.0;
    let mut wsum = 0.0;
    for (i, (&t, &y)) in grid.iter().zip(values).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let row = basis.raw_values(t)?;
        for a in 0..k {
            if row[a] == 0.0 {
                continue;
            }
            bty[a] += w * row[a] * y;
            for b in 0..k {
                btb[(a, b)] += w * row[a] * row[b];
            }
        }
        yty += w * y * y;
        wsum += w;
    }
    let penalty = basis.second_derivative_penalty().matrix;
    let sol = penalized_ls(&btb, &bty, yty, &penalty, wsum, lambda)?;
    Ok(SmoothCurve {
        basis,
        coef: sol.coef,
        lambda: sol.lambda,
        edf: sol.edf,
    })
}

/// Solution of a penalized least-squares problem.
#[derive(Debug, Clone)]
pub(crate) struct PlsSolution {
    pub coef: DVector<f64>,
    pub lambda: f64,
    pub edf: f64,
}

/// Minimize `|y - Bc|² + λ c'Pc` given the cross products `B'B`, `B'y` and
/// `y'y`, choosing λ by GCV unless fixed. Uses the Demmler-Reinsch
/// diagonalization so every candidate λ costs O(K).
pub(crate) fn penalized_ls(
    btb: &DMatrix<f64>,
    bty: &DVector<f64>,
    yty: f64,
    penalty: &DMatrix<f64>,
    n_eff: f64,
    lambda: Option<f64>,
) -> Result<PlsSolution> {
    let k = btb.nrows();
    let ridge = 1e-10 * btb.diagonal().max().max(1e-300);
    let chol = (0..6)
        .find_map(|e| {
            let bump = if e == 0 { 0.0 } else { ridge * 10f64.powi(2 * e) };
            (btb + DMatrix::identity(k, k) * bump).cholesky()
        })
        .ok_or_else(|| Error::SingularSystem("smoother normal equations".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem("smoother factor".into()))?;
    let reduced = &l_inv * penalty * l_inv.transpose();
    let (d, u) = sym_eigen_desc(&reduced);
    let d = d.map(|v| v.max(0.0));
    // in the rotated system the fit has coordinates s_j f_j
    let f = u.tr_mul(&(&l_inv * bty));
    let eval = |lam: f64| -> (f64, f64) {
        let mut edf = 0.0;
        let mut fit_sq = 0.0;
        let mut cross = 0.0;
        for j in 0..k {
            let s = 1.0 / (1.0 + lam * d[j]);
            edf += s;
            cross += s * f[j] * f[j];
            fit_sq += s * s * f[j] * f[j];
        }
        ((yty - 2.0 * cross + fit_sq).max(0.0), edf)
    };
    let lam = match lambda {
        Some(l) if l >= 0.0 && l.is_finite() => l,
        Some(l) => return Err(Error::InvalidLambda(l)),
        None => {
            let dmax = d.max().max(1e-300);
            let lo = 1e-10 / dmax;
            let hi = 1e12 / dmax;
            let n_grid = 81;
            let mut best = (f64::INFINITY, lo);
            for i in 0..n_grid {
                let lam = lo * (hi / lo).powf(i as f64 / (n_grid - 1) as f64);
                let (rss, edf) = eval(lam);
                let denom = n_eff - edf;
                if denom <= 1e-8 * n_eff {
                    continue;
                }
                let gcv = n_eff * rss / (denom * denom);
                if gcv < best.0 {
                    best = (gcv, lam);
                }
            }
            best.1
        }
    };
    let (_, edf) = eval(lam);
    let scaled = DVector::from_iterator(k, (0..k).map(|j| f[j] / (1.0 + lam * d[j])));
    let coef = l_inv.transpose() * (&u * scaled);
    Ok(PlsSolution {
        coef,
        lambda: lam,
        edf,
    })
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Default)]
pub struct CsvFormat {
    /// Response domain; the hull of the observed response arguments when `None`.
    pub response_domain: Option<Interval>,
    /// Covariate domain; the hull of the observed covariate arguments when `None`.
    pub covariate_domain: Option<Interval>,
    /// Require response (`Y`) rows for every subject.
    pub require_response: bool,
}

impl CsvFormat {
    pub fn training() -> Self {
        Self {
            require_response: true,
            ..Self::default()
        }
    }

    pub fn covariates() -> Self {
        Self::default()
    }
}

/// Result of reading a long-format CSV.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: FunctionalDataset,
    /// Rows dropped because their value was missing or NaN.
    pub dropped_rows: usize,
}

pub fn load_csv(path: impl AsRef<Path>, format: &CsvFormat) -> Result<LoadReport> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, format)
}

fn parse_value(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| !v.is_nan())
}

/// Parse the long format `subject_id,var,arg,value[,scalar...]`.
pub fn read_csv<R: Read>(reader: R, format: &CsvFormat) -> Result<LoadReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["subject_id", "var", "arg", "value"];
    if headers.len() < 4 || headers.iter().take(4).zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Format(format!(
            "header must start with subject_id,var,arg,value; found '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let scalar_names: Vec<String> = headers.iter().skip(4).map(str::to_string).collect();

    struct Acc {
        x: Vec<(f64, f64)>,
        y: Vec<(f64, f64)>,
        scalars: Option<Vec<f64>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, Acc> = HashMap::new();
    let mut dropped = 0usize;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        if rec.len() != headers.len() {
            return Err(Error::Format(format!(
                "row {row}: expected {} columns, found {}",
                headers.len(),
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::Format(format!("row {row}: empty subject_id")));
        }
        let var = &rec[1];
        let arg: f64 = rec[2]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Format(format!("row {row}: column 'arg' is not a number")))?;
        let scalars = scalar_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                parse_value(&rec[4 + j]).ok_or_else(|| {
                    Error::Format(format!("row {row}: scalar column '{name}' is not a number"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let entry = acc.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc {
                x: Vec::new(),
                y: Vec::new(),
                scalars: None,
            }
        });
        if !scalar_names.is_empty() {
            match &entry.scalars {
                None => entry.scalars = Some(scalars),
                Some(prev) if *prev != scalars => {
                    return Err(Error::Format(format!(
                        "row {row}: scalar covariates for subject '{id}' differ from earlier rows"
                    )))
                }
                Some(_) => {}
            }
        }
        let Some(value) = parse_value(&rec[3]) else {
            dropped += 1;
            continue;
        };
        match var {
            "X" => entry.x.push((arg, value)),
            "Y" => entry.y.push((arg, value)),
            other => {
                return Err(Error::Format(format!(
                    "row {row}: column 'var' must be X or Y, found '{other}'"
                )))
            }
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} row(s) with missing values");
    }
    if order.is_empty() {
        return Err(Error::NoSubjects);
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut a = acc.remove(&id).expect("subject recorded");
        for (name, pts) in [("X", &mut a.x), ("Y", &mut a.y)] {
            pts.sort_by(|p, q| p.0.total_cmp(&q.0));
            if let Some(w) = pts.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::DuplicateArgument {
                    subject: id.clone(),
                    var: name.to_string(),
                    arg: w[0].0,
                });
            }
        }
        let (s_grid, x_values) = a.x.into_iter().unzip();
        let (t_grid, y_values) = a.y.into_iter().unzip();
        subjects.push(SubjectRecord {
            id,
            s_grid,
            x_values,
            t_grid,
            y_values,
            scalar_covariates: a.scalars,
        });
    }
    let cov_dom = format
        .covariate_domain
        .or_else(|| Interval::hull(subjects.iter().flat_map(|s| s.s_grid.iter().copied())))
        .ok_or_else(|| Error::Format("no covariate (X) rows".into()))?;
    let ds = if format.require_response {
        let resp_dom = format
            .response_domain
            .or_else(|| Interval::hull(subjects.iter().flat_map(|s| s.t_grid.iter().copied())))
            .ok_or_else(|| Error::Format("no response (Y) rows".into()))?;
        FunctionalDataset::new(subjects, resp_dom, cov_dom)?
    } else {
        let mut ds = FunctionalDataset::covariates_only(subjects, cov_dom)?;
        if let Some(d) = format.response_domain {
            ds.response_domain = d;
        }
        ds
    };
    let ds = ds.with_scalar_names(scalar_names)?;
    Ok(LoadReport {
        dataset: ds,
        dropped_rows: dropped,
    })
}

/// Write a dataset in the long format read by [`read_csv`].
pub fn write_csv<W: Write>(dataset: &FunctionalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "var".into(), "arg".into(), "value".into()];
    header.extend(dataset.scalar_names().iter().cloned());
    w.write_record(&header)?;
    for s in dataset.subjects() {
        let scalars: Vec<String> = s
            .scalar_covariates
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        let rows = s
            .s_grid
            .iter()
            .zip(&s.x_values)
            .map(|p| ("X", p))
            .chain(s.t_grid.iter().zip(&s.y_values).map(|p| ("Y", p)));
        for (var, (arg, val)) in rows {
            let mut rec = vec![s.id.clone(), var.to_string(), format!("{arg:?}"), format!("{val:?}")];
            rec.extend(scalars.iter().cloned());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &FunctionalDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn trapezoid_uniform_weights() {
        let q = trapezoid_rule(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(q.weights, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn trapezoid_integrates_sine() {
        let grid = Interval::new(0.0, std::f64::consts::PI).linspace(101);
        let q = trapezoid_rule(&grid).unwrap();
        assert!((q.integrate_fn(f64::sin) - 2.0).abs() < 1e-3);
    }

    #[test]
    fn trapezoid_exact_on_constants_and_rejects_bad_grids() {
        let q = trapezoid_rule(&[0.0, 1.0]).unwrap();
        assert_eq!(q.integrate(&[3.0, 3.0]), 3.0);
        assert!(matches!(trapezoid_rule(&[0.0, 0.0, 1.0]), Err(Error::InvalidGrid(_))));
        assert!(matches!(trapezoid_rule(&[1.0, 0.5]), Err(Error::InvalidGrid(_))));
        assert!(matches!(trapezoid_rule(&[1.0]), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn smoother_reproduces_lines_and_constants() {
        let grid = Interval::unit().linspace(37);
        let line: Vec<f64> = grid.iter().map(|t| 2.0 * t + 1.0).collect();
        for lambda in [None, Some(0.0), Some(1e3)] {
            let s = smooth_curve(&grid, &line, Smoothing { lambda, ..Smoothing::default() }).unwrap();
            for (t, y) in grid.iter().zip(&line) {
                assert_abs_diff_eq!(s.eval(*t), *y, epsilon = 1e-8);
            }
        }
        let c = vec![-0.7; 20];
        let g = Interval::unit().linspace(20);
        let s = smooth_curve(&g, &c, Smoothing::gcv()).unwrap();
        for i in 0..=100 {
            assert_abs_diff_eq!(s.eval(i as f64 / 100.0), -0.7, epsilon = 1e-10);
        }
    }

    #[test]
    fn smoother_recovers_noisy_sine() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let grid = Interval::unit().linspace(101);
        let truth = |t: f64| (2.0 * std::f64::consts::PI * t).sin();
        let y: Vec<f64> = grid.iter().map(|&t| truth(t) + noise.sample(&mut rng)).collect();
        let s = smooth_curve(&grid, &y, Smoothing::gcv()).unwrap();
        let err = grid.iter().map(|&t| (s.eval(t) - truth(t)).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "max error {err}");
    }

    #[test]
    fn smoother_needs_four_points() {
        let r = smooth_curve(&[0.0, 0.5, 1.0], &[1.0, 2.0, 3.0], Smoothing::gcv());
        assert!(matches!(r, Err(Error::TooFewPoints { needed: 4, got: 3 })));
    }

    #[test]
    fn smoother_is_idempotent_on_its_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let grid = Interval::unit().linspace(101);
        let y: Vec<f64> = grid.iter().map(|&t| (5.0 * t).cos() + noise.sample(&mut rng)).collect();
        let first = smooth_curve(&grid, &y, Smoothing::gcv()).unwrap().eval_many(&grid);
        let second = smooth_curve(&grid, &first, Smoothing::gcv()).unwrap().eval_many(&grid);
        let diff = first.iter().zip(&second).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "refit moved values by {diff}");
    }

    const TWO_SUBJECTS: &str = "subject_id,var,arg,value\n\
        a,X,0.5,1.5\na,X,0.0,1.0\na,X,1.0,2.0\na,Y,0.0,3.0\na,Y,1.0,4.0\n\
        b,X,0.0,-1.0\nb,X,0.5,-1.5\nb,X,1.0,-2.0\nb,Y,0.2,0.0\nb,Y,0.9,1.0\n";

    #[test]
    fn reads_well_formed_file() {
        let r = read_csv(TWO_SUBJECTS.as_bytes(), &CsvFormat::training()).unwrap();
        assert_eq!(r.dropped_rows, 0);
        let ds = r.dataset;
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.subjects()[0].s_grid, vec![0.0, 0.5, 1.0]);
        assert_eq!(ds.subjects()[0].x_values, vec![1.0, 1.5, 2.0]);
        assert_eq!(ds.subjects()[1].t_grid.len(), 2);
    }

    #[test]
    fn drops_nan_rows_and_counts_them() {
        let text = TWO_SUBJECTS.replace("b,Y,0.9,1.0", "b,Y,0.9,NaN");
        let r = read_csv(text.as_bytes(), &CsvFormat::training()).unwrap();
        assert_eq!(r.dropped_rows, 1);
        assert_eq!(r.dataset.subjects()[1].y_values, vec![0.0]);
    }

    #[test]
    fn rejects_duplicates_missing_columns_and_empty_files() {
        let dup = TWO_SUBJECTS.replace("a,X,0.5,1.5", "a,X,0.0,1.5");
        assert!(matches!(
            read_csv(dup.as_bytes(), &CsvFormat::training()),
            Err(Error::DuplicateArgument { .. })
        ));
        let bad = "subject_id,var,value\na,X,1\n";
        assert!(matches!(read_csv(bad.as_bytes(), &CsvFormat::training()), Err(Error::Format(_))));
        let empty = "subject_id,var,arg,value\n";
        assert!(matches!(read_csv(empty.as_bytes(), &CsvFormat::training()), Err(Error::NoSubjects)));
    }

    #[test]
    fn scalar_columns_must_be_consistent() {
        let text = "subject_id,var,arg,value,hum\na,X,0,1,0.5\na,X,1,2,0.5\na,Y,0,1,0.5\n";
        let ds = read_csv(text.as_bytes(), &CsvFormat::training()).unwrap().dataset;
        assert_eq!(ds.scalar_names(), ["hum".to_string()]);
        assert_eq!(ds.subjects()[0].scalar_covariates, Some(vec![0.5]));
        let bad = text.replace("a,Y,0,1,0.5", "a,Y,0,1,0.6");
        assert!(matches!(read_csv(bad.as_bytes(), &CsvFormat::training()), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_invariants_are_enforced() {
        let s = SubjectRecord::new("a", vec![0.0], vec![1.0], vec![0.0], vec![1.0]);
        assert!(FunctionalDataset::new(vec![s], Interval::unit(), Interval::unit()).is_err());
        let s = SubjectRecord::new("a", vec![0.0, 2.0], vec![1.0, 1.0], vec![0.0], vec![1.0]);
        assert!(FunctionalDataset::new(vec![s], Interval::unit(), Interval::unit()).is_err());
        let s = SubjectRecord::new("a", vec![0.5, 0.2], vec![1.0, 1.0], vec![0.0], vec![1.0]);
        assert!(FunctionalDataset::new(vec![s], Interval::unit(), Interval::unit()).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = FunctionalDataset> {
        let subject = (
            proptest::collection::btree_set(0u32..1000, 2..8),
            proptest::collection::btree_set(0u32..1000, 1..8),
            proptest::collection::vec(-1e3f64..1e3, 16),
            -5.0f64..5.0,
        );
        proptest::collection::vec(subject, 1..5).prop_map(|subs| {
            let subjects = subs
                .into_iter()
                .enumerate()
                .map(|(i, (s, t, vals, z))| {
                    let s_grid: Vec<f64> = s.into_iter().map(|v| v as f64 / 999.0).collect();
                    let t_grid: Vec<f64> = t.into_iter().map(|v| v as f64 / 999.0).collect();
                    let x = vals.iter().take(s_grid.len()).map(|v| v / 7.0).collect();
                    let y = vals.iter().rev().take(t_grid.len()).map(|v| v * 1.3).collect();
                    SubjectRecord::new(format!("s{i}"), s_grid, x, t_grid, y).with_scalars(vec![z])
                })
                .collect();
            FunctionalDataset::new(subjects, Interval::unit(), Interval::unit()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn quadrature_is_linear(
            f in proptest::collection::vec(-10.0f64..10.0, 12),
            g in proptest::collection::vec(-10.0f64..10.0, 12),
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
            gaps in proptest::collection::vec(0.01f64..1.0, 11),
        ) {
            let mut grid = vec![0.0];
            for h in gaps { grid.push(grid.last().unwrap() + h); }
            let q = trapezoid_rule(&grid).unwrap();
            let comb: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
            let lhs = q.integrate(&comb);
            let rhs = a * q.integrate(&f) + b * q.integrate(&g);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
        }

        #[test]
        fn csv_round_trip(ds in arb_dataset()) {
            let mut buf = Vec::new();
            let ds = ds.with_scalar_names(vec!["z".into()]).unwrap();
            write_csv(&ds, &mut buf).unwrap();
            let fmt = CsvFormat { response_domain: Some(Interval::unit()), covariate_domain: Some(Interval::unit()), require_response: true };
            let back = read_csv(buf.as_slice(), &fmt).unwrap().dataset;
            prop_assert_eq!(back.len(), ds.len());
            for (a, b) in back.subjects().iter().zip(ds.subjects()) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(&a.s_grid, &b.s_grid);
                prop_assert_eq!(&a.t_grid, &b.t_grid);
                for (u, v) in a.x_values.iter().zip(&b.x_values).chain(a.y_values.iter().zip(&b.y_values)) {
                    prop_assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
                }
                prop_assert_eq!(&a.scalar_covariates, &b.scalar_covariates);
            }
        }
    }
}
