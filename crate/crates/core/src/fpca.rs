//! Functional principal components of a sample of curves: mean and
//! covariance estimation, the quadrature-weighted eigenproblem, subject
//! scores, and the smooth-plus-nugget decomposition of an error covariance.
//!
//! Two paths are supported. The dense path smooths every curve, evaluates the
//! smooths on a common grid and works with sample moments. The sparse path
//! pools observations: a penalized-spline mean, a bivariate smooth of the
//! off-diagonal cross products for the covariance, and best linear
//! prediction for the scores.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::make_basis;
use crate::error::{Error, Result};
use crate::funcdata::{
    penalized_ls, smooth_curve, trapezoid_weights, union_of, FunctionalDataset, Interval,
    Smoothing,
};
use crate::linalg::{interp_linear, kron, sym_eigen_desc, PsdInverse};

/// Largest evaluation grid built from the union of observed arguments.
pub const MAX_GRID_POINTS: usize = 101;

/// Fraction of the evaluation grid each subject must observe for the dense path.
pub const DENSE_COVERAGE: f64 = 0.8;

/// Observation design of a sample of curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Dense,
    Sparse,
}

impl std::str::FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Design::Dense),
            "sparse" => Ok(Design::Sparse),
            other => Err(Error::InvalidConfig(format!(
                "design must be dense or sparse, got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Design::Dense => "dense",
            Design::Sparse => "sparse",
        })
    }
}

/// One sampled curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Self {
        Self { grid, values }
    }
}

/// Response curves of a dataset.
pub fn response_curves(dataset: &FunctionalDataset) -> Vec<Curve> {
    dataset
        .subjects()
        .iter()
        .map(|s| Curve::new(s.t_grid.clone(), s.y_values.clone()))
        .collect()
}

/// Covariate curves of a dataset.
pub fn covariate_curves(dataset: &FunctionalDataset) -> Vec<Curve> {
    dataset
        .subjects()
        .iter()
        .map(|s| Curve::new(s.s_grid.clone(), s.x_values.clone()))
        .collect()
}

/// Evaluation grid for a set of argument grids: their union when it has at
/// most [`MAX_GRID_POINTS`] points, otherwise that many equispaced points
/// spanning it.
pub fn evaluation_grid<'a, I: IntoIterator<Item = &'a [f64]>>(grids: I) -> Vec<f64> {
    let union = union_of(grids);
    if union.len() <= MAX_GRID_POINTS {
        return union;
    }
    Interval::new(union[0], union[union.len() - 1]).linspace(MAX_GRID_POINTS)
}

/// Dense when every curve observes at least [`DENSE_COVERAGE`] of the grid.
pub fn choose_design(curves: &[Curve], grid: &[f64]) -> Design {
    let needed = ((DENSE_COVERAGE * grid.len() as f64).ceil() as usize).max(4);
    if curves.iter().all(|c| c.grid.len() >= needed) {
        Design::Dense
    } else {
        Design::Sparse
    }
}

/// Estimated eigenstructure of a sample of curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenBasis {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// `grid.len() x K`; columns are L²-orthonormal under the trapezoid rule.
    pub eigenfunctions: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Cumulative proportion of variance explained by the retained components.
    pub pve: f64,
    pub total_variance: f64,
}

impl EigenBasis {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn with_mean(mut self, mean: Vec<f64>) -> Self {
        self.mean = mean;
        self
    }

    pub fn weights(&self) -> Vec<f64> {
        trapezoid_weights(&self.grid)
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        interp_linear(&self.grid, &self.mean, t)
    }

    /// All eigenfunctions at `t`.
    pub fn phi_at(&self, t: f64) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let col: Vec<f64> = self.eigenfunctions.column(k).iter().copied().collect();
                interp_linear(&self.grid, &col, t)
            })
            .collect()
    }

    /// `ts.len() x K` matrix of eigenfunction values.
    pub fn phi_matrix(&self, ts: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(ts.len(), self.k());
        for k in 0..self.k() {
            let col: Vec<f64> = self.eigenfunctions.column(k).iter().copied().collect();
            for (i, &t) in ts.iter().enumerate() {
                m[(i, k)] = interp_linear(&self.grid, &col, t);
            }
        }
        m
    }

    pub fn mean_on(&self, ts: &[f64]) -> Vec<f64> {
        ts.iter().map(|&t| self.mean_at(t)).collect()
    }

    /// `mean + Σ_k scores_k φ_k` on the basis grid.
    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, &s) in scores.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.eigenfunctions.column(k).iter()) {
                *o += s * p;
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Subject scores and their covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    /// `n x K`.
    pub scores: DMatrix<f64>,
    /// `K x K`.
    pub score_cov: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn k(&self) -> usize {
        self.scores.ncols()
    }
}

/// Smooth part plus white-noise nugget of an error covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCovariance {
    pub grid: Vec<f64>,
    /// Operator eigenvalues of the smooth part (positive, descending).
    pub eigenvalues: Vec<f64>,
    /// `grid.len() x L`, L²-orthonormal columns.
    pub eigenfunctions: DMatrix<f64>,
    pub nugget: f64,
}

impl ErrorCovariance {
    pub fn zero(grid: Vec<f64>) -> Self {
        let g = grid.len();
        Self {
            grid,
            eigenvalues: Vec::new(),
            eigenfunctions: DMatrix::zeros(g, 0),
            nugget: 0.0,
        }
    }

    /// Smooth part on the grid.
    pub fn smooth_matrix(&self) -> DMatrix<f64> {
        let g = self.grid.len();
        let mut m = DMatrix::zeros(g, g);
        for (l, &v) in self.eigenvalues.iter().enumerate() {
            let col = self.eigenfunctions.column(l);
            m += col * col.transpose() * v;
        }
        m
    }

    /// Smooth part on the diagonal of the grid.
    pub fn smooth_diagonal(&self) -> Vec<f64> {
        (0..self.grid.len())
            .map(|i| {
                self.eigenvalues
                    .iter()
                    .enumerate()
                    .map(|(l, v)| v * self.eigenfunctions[(i, l)].powi(2))
                    .sum()
            })
            .collect()
    }

    /// `Σ(t,t) + σ²` at arbitrary `t`.
    pub fn variance_at(&self, t: f64) -> f64 {
        interp_linear(&self.grid, &self.smooth_diagonal(), t) + self.nugget
    }

    pub fn variance_on(&self, ts: &[f64]) -> Vec<f64> {
        let diag = self.smooth_diagonal();
        ts.iter()
            .map(|&t| interp_linear(&self.grid, &diag, t) + self.nugget)
            .collect()
    }

    /// Elementwise average of several estimates on the same grid.
    pub fn average(parts: &[ErrorCovariance]) -> Result<ErrorCovariance> {
        let first = parts.first().ok_or(Error::NoSubjects)?;
        let g = first.grid.len();
        let mut sum = DMatrix::zeros(g, g);
        let mut nugget = 0.0;
        for p in parts {
            if p.grid != first.grid {
                return Err(Error::GridMismatch("error covariances on different grids".into()));
            }
            sum += p.smooth_matrix();
            nugget += p.nugget;
        }
        let n = parts.len() as f64;
        let (eigenvalues, eigenfunctions) = weighted_eigen(&(sum / n), &first.grid);
        Ok(ErrorCovariance {
            grid: first.grid.clone(),
            eigenvalues,
            eigenfunctions,
            nugget: nugget / n,
        })
    }
}

/// Operator eigenpairs of a PSD surface, keeping the positive ones.
fn weighted_eigen(cov: &DMatrix<f64>, grid: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let w = trapezoid_weights(grid);
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let g = grid.len();
    let m = DMatrix::from_fn(g, g, |i, j| sw[i] * cov[(i, j)] * sw[j]);
    let (vals, vecs) = sym_eigen_desc(&m);
    let max = vals.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..g).filter(|&i| max > 0.0 && vals[i] > 1e-10 * max).collect();
    let mut funcs = DMatrix::zeros(g, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        for r in 0..g {
            funcs[(r, c)] = vecs[(r, i)] / sw[r];
        }
    }
    (keep.iter().map(|&i| vals[i]).collect(), funcs)
}

/// Fitted principal-component decomposition of a sample of curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaFit {
    pub basis: EigenBasis,
    pub scores: ScoreMatrix,
    pub design: Design,
    /// White-noise variance used by best linear prediction (sparse path).
    pub noise_var: f64,
}

impl FpcaFit {
    pub fn k(&self) -> usize {
        self.basis.k()
    }

    /// Scores of a new curve, computed exactly as for the training curves.
    pub fn project(&self, curve: &Curve) -> Result<Vec<f64>> {
        match self.design {
            Design::Dense => {
                let smooth = smooth_onto(curve, &self.basis.grid)?;
                Ok(dense_scores_row(&smooth, &self.basis))
            }
            Design::Sparse => Ok(blup_scores(curve, &self.basis, self.noise_var)?.0),
        }
    }

    /// Scores of a curve already smoothed onto the basis grid (dense path).
    pub fn project_smoothed(&self, smooth: &[f64]) -> Vec<f64> {
        dense_scores_row(smooth, &self.basis)
    }

    /// `mean + Σ_k scores_k φ_k` evaluated on `ts`.
    pub fn reconstruct_scores_on(&self, scores: &[f64], ts: &[f64]) -> Vec<f64> {
        let phi = self.basis.phi_matrix(ts);
        let mean = self.basis.mean_on(ts);
        (0..ts.len())
            .map(|i| mean[i] + (0..scores.len()).map(|k| phi[(i, k)] * scores[k]).sum::<f64>())
            .collect()
    }

    /// Smoothed reconstruction of a new curve on `ts`.
    pub fn reconstruct_on(&self, curve: &Curve, ts: &[f64]) -> Result<Vec<f64>> {
        Ok(self.reconstruct_scores_on(&self.project(curve)?, ts))
    }
}

/// Curves prepared once for repeated decompositions (e.g. across bootstrap
/// replicates): dense-path smooths are computed a single time.
#[derive(Debug, Clone)]
pub struct PreparedCurves {
    grid: Vec<f64>,
    design: Design,
    curves: Vec<Curve>,
    /// Dense path only: `n x grid.len()` smoothed curves.
    smoothed: Option<DMatrix<f64>>,
}

impl PreparedCurves {
    /// `grid` defaults to [`evaluation_grid`] and `design` to [`choose_design`].
    pub fn new(curves: Vec<Curve>, grid: Option<Vec<f64>>, design: Option<Design>) -> Result<Self> {
        let grid = grid.unwrap_or_else(|| evaluation_grid(curves.iter().map(|c| c.grid.as_slice())));
        if grid.len() < 3 {
            return Err(Error::GridTooShort(grid.len()));
        }
        let design = design.unwrap_or_else(|| choose_design(&curves, &grid));
        let smoothed = match design {
            Design::Dense => Some(smooth_all(&curves, &grid)?),
            Design::Sparse => None,
        };
        Ok(Self {
            grid,
            design,
            curves,
            smoothed,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn smoothed(&self) -> Option<&DMatrix<f64>> {
        self.smoothed.as_ref()
    }

    /// The curves at `indices`, repeats allowed, without re-smoothing.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            grid: self.grid.clone(),
            design: self.design,
            curves: indices.iter().map(|&i| self.curves[i].clone()).collect(),
            smoothed: self
                .smoothed
                .as_ref()
                .map(|s| DMatrix::from_fn(indices.len(), s.ncols(), |r, c| s[(indices[r], c)])),
        }
    }

    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.curves.len() < 2 {
            return Err(Error::TooFewSubjects(self.curves.len()));
        }
        match &self.smoothed {
            Some(s) => Ok(column_means(s)),
            None => pooled_mean(&self.curves, &self.grid),
        }
    }

    /// Covariance on the grid around `mean`, plus the nugget estimate of
    /// the sparse path (zero on the dense path).
    pub fn covariance(&self, mean: &[f64]) -> Result<(DMatrix<f64>, f64)> {
        if self.curves.len() < 2 {
            return Err(Error::TooFewSubjects(self.curves.len()));
        }
        match &self.smoothed {
            Some(s) => Ok((sample_covariance(s, mean), 0.0)),
            None => {
                let centered = center_curves(&self.curves, &self.grid, mean);
                let est = smooth_cross_products(&centered, &self.grid)?;
                Ok((psd_clip(&est.surface), est.nugget))
            }
        }
    }

    /// Full decomposition with truncation by proportion of variance explained.
    pub fn fit(&self, pve: f64) -> Result<FpcaFit> {
        if !(pve > 0.0 && pve <= 1.0) {
            return Err(Error::InvalidConfig(format!("pve must lie in (0, 1], got {pve}")));
        }
        let mean = self.mean()?;
        let (cov, noise_var) = self.covariance(&mean)?;
        let basis = eigendecompose(&cov, &self.grid, pve)?.with_mean(mean);
        let scores = match &self.smoothed {
            Some(s) => dense_scores(s, &basis),
            None => sparse_scores(&self.curves, &basis, noise_var)?,
        };
        Ok(FpcaFit {
            basis,
            scores,
            design: self.design,
            noise_var,
        })
    }
}

/// Options for [`fit_fpca`].
#[derive(Debug, Clone, PartialEq)]
pub struct FpcaOptions {
    pub pve: f64,
    pub design: Option<Design>,
    pub grid: Option<Vec<f64>>,
}

impl Default for FpcaOptions {
    fn default() -> Self {
        Self {
            pve: 0.95,
            design: None,
            grid: None,
        }
    }
}

/// Decompose the response curves of a dataset.
pub fn fit_fpca(dataset: &FunctionalDataset, options: &FpcaOptions) -> Result<FpcaFit> {
    for s in dataset.subjects() {
        if s.t_grid.is_empty() {
            return Err(Error::ScoreUndefined(s.id.clone()));
        }
    }
    PreparedCurves::new(response_curves(dataset), options.grid.clone(), options.design)?.fit(options.pve)
}

/// Mean of the response curves on `grid`.
pub fn estimate_mean(dataset: &FunctionalDataset, grid: &[f64], design: Design) -> Result<Vec<f64>> {
    if dataset.len() < 2 {
        return Err(Error::TooFewSubjects(dataset.len()));
    }
    PreparedCurves::new(response_curves(dataset), Some(grid.to_vec()), Some(design))?.mean()
}

/// Covariance of the response curves on `grid` around `mean`.
pub fn estimate_covariance(
    dataset: &FunctionalDataset,
    mean: &[f64],
    grid: &[f64],
    design: Design,
) -> Result<DMatrix<f64>> {
    if grid.len() < 3 {
        return Err(Error::GridTooShort(grid.len()));
    }
    if mean.len() != grid.len() {
        return Err(Error::GridMismatch("mean and grid lengths differ".into()));
    }
    Ok(PreparedCurves::new(response_curves(dataset), Some(grid.to_vec()), Some(design))?
        .covariance(mean)?
        .0)
}

/// Eigenpairs of the covariance operator discretized with trapezoid
/// weights, truncated at the smallest K reaching `pve`. The returned basis
/// has a zero mean; attach one with [`EigenBasis::with_mean`].
pub fn eigendecompose(cov: &DMatrix<f64>, grid: &[f64], pve: f64) -> Result<EigenBasis> {
    let g = grid.len();
    if g < 3 {
        return Err(Error::GridTooShort(g));
    }
    if cov.nrows() != g || cov.ncols() != g {
        return Err(Error::GridMismatch(format!(
            "covariance is {}x{} but the grid has {g} points",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let w = trapezoid_weights(grid);
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let m = DMatrix::from_fn(g, g, |i, j| sw[i] * cov[(i, j)] * sw[j]);
    let (vals, vecs) = sym_eigen_desc(&m);
    let vals: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let max = vals.first().copied().unwrap_or(0.0);
    if !(total > 1e-20) {
        return Err(Error::DegenerateCovariance);
    }
    let n_pos = vals.iter().filter(|&&v| v > 1e-12 * max).count();

    let mut funcs: Vec<Vec<f64>> = (0..g)
        .map(|c| (0..g).map(|r| vecs[(r, c)] / sw[r]).collect())
        .collect();
    for f in funcs.iter_mut() {
        orient(f);
    }
    // `vals` is already descending. Runs of numerically tied eigenvalues are
    // ordered by where their function first changes sign, so the order does
    // not depend on rounding inside the eigensolver.
    let changes: Vec<usize> = funcs.iter().map(|f| first_sign_change(f)).collect();
    let mut order: Vec<usize> = (0..g).collect();
    let mut start = 0;
    while start < g {
        let mut end = start + 1;
        while end < g && vals[end - 1] - vals[end] <= 1e-10 * max {
            end += 1;
        }
        order[start..end].sort_by_key(|&i| (changes[i], i));
        start = end;
    }

    let mut k = 0;
    let mut cum = 0.0;
    while k < n_pos {
        cum += vals[order[k]];
        k += 1;
        if cum >= pve * total * (1.0 - 1e-12) {
            break;
        }
    }
    let mut eigenfunctions = DMatrix::zeros(g, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        for r in 0..g {
            eigenfunctions[(r, c)] = funcs[i][r];
        }
    }
    Ok(EigenBasis {
        grid: grid.to_vec(),
        mean: vec![0.0; g],
        eigenfunctions,
        eigenvalues: order.iter().take(k).map(|&i| vals[i]).collect(),
        pve: cum / total,
        total_variance: total,
    })
}

/// Flip `f` so that its first clearly nonzero coordinate is positive.
fn orient(f: &mut [f64]) {
    let scale = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if let Some(first) = f.iter().find(|v| v.abs() > 1e-10 * scale) {
        if *first < 0.0 {
            f.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

fn first_sign_change(f: &[f64]) -> usize {
    let scale = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut prev = 0.0;
    for (i, &v) in f.iter().enumerate() {
        if v.abs() <= 1e-10 * scale {
            continue;
        }
        if prev != 0.0 && v.signum() != prev {
            return i;
        }
        prev = v.signum();
    }
    f.len()
}

/// Scores of the response curves of `dataset` against `basis`.
pub fn compute_scores(
    dataset: &FunctionalDataset,
    basis: &EigenBasis,
    design: Design,
    noise_var: f64,
) -> Result<ScoreMatrix> {
    for s in dataset.subjects() {
        if s.t_grid.is_empty() {
            return Err(Error::ScoreUndefined(s.id.clone()));
        }
    }
    let curves = response_curves(dataset);
    match design {
        Design::Dense => Ok(dense_scores(&smooth_all(&curves, &basis.grid)?, basis)),
        Design::Sparse => sparse_scores(&curves, basis, noise_var),
    }
}

/// Smooth one curve by penalized splines and evaluate it on `grid`.
pub fn smooth_onto(curve: &Curve, grid: &[f64]) -> Result<Vec<f64>> {
    Ok(smooth_curve(&curve.grid, &curve.values, Smoothing::gcv())?.eval_many(grid))
}

fn smooth_all(curves: &[Curve], grid: &[f64]) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = curves
        .par_iter()
        .map(|c| smooth_onto(c, grid))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(rows.len(), grid.len(), |r, c| rows[r][c]))
}

fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    m.column_iter().map(|c| c.sum() / n).collect()
}

fn sample_covariance(smoothed: &DMatrix<f64>, mean: &[f64]) -> DMatrix<f64> {
    let n = smoothed.nrows();
    let centered = DMatrix::from_fn(n, smoothed.ncols(), |r, c| smoothed[(r, c)] - mean[c]);
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    (&cov + cov.transpose()) * 0.5
}

fn dense_scores_row(smooth: &[f64], basis: &EigenBasis) -> Vec<f64> {
    let w = basis.weights();
    (0..basis.k())
        .map(|k| {
            (0..w.len())
                .map(|g| w[g] * (smooth[g] - basis.mean[g]) * basis.eigenfunctions[(g, k)])
                .sum()
        })
        .collect()
}

fn dense_scores(smoothed: &DMatrix<f64>, basis: &EigenBasis) -> ScoreMatrix {
    let n = smoothed.nrows();
    let k = basis.k();
    let mut scores = DMatrix::zeros(n, k);
    for i in 0..n {
        let row: Vec<f64> = smoothed.row(i).iter().copied().collect();
        for (c, v) in dense_scores_row(&row, basis).into_iter().enumerate() {
            scores[(i, c)] = v;
        }
    }
    ScoreMatrix {
        scores,
        score_cov: DMatrix::from_diagonal(&DVector::from_vec(basis.eigenvalues.clone())),
    }
}

/// Best linear predictor of one curve's scores and its covariance
/// `ΛΦ'(ΦΛΦ' + σ²I)⁻¹ΦΛ`.
fn blup_scores(curve: &Curve, basis: &EigenBasis, noise_var: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k = basis.k();
    let m = curve.grid.len();
    if m == 0 {
        return Err(Error::ScoreUndefined("curve without observations".into()));
    }
    let phi = basis.phi_matrix(&curve.grid);
    let resid = DVector::from_iterator(
        m,
        curve.grid.iter().zip(&curve.values).map(|(&t, &y)| y - basis.mean_at(t)),
    );
    let lambda = DMatrix::from_diagonal(&DVector::from_vec(basis.eigenvalues.clone()));
    let lphi_t = &lambda * phi.transpose(); // K x m
    let mut sigma = &phi * &lphi_t;
    for i in 0..m {
        sigma[(i, i)] += noise_var;
    }
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let gain = match sigma.clone().cholesky() {
        Some(ch) if noise_var > 0.0 => ch.solve(&lphi_t.transpose()).transpose(),
        _ => &lphi_t * PsdInverse::new(&sigma).matrix(),
    }; // K x m
    let xi = &gain * resid;
    let cov = &gain * lphi_t.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    debug_assert_eq!(cov.nrows(), k);
    Ok((xi.iter().copied().collect(), cov))
}

fn sparse_scores(curves: &[Curve], basis: &EigenBasis, noise_var: f64) -> Result<ScoreMatrix> {
    let k = basis.k();
    let parts: Vec<(Vec<f64>, DMatrix<f64>)> = curves
        .par_iter()
        .map(|c| blup_scores(c, basis, noise_var))
        .collect::<Result<_>>()?;
    let n = parts.len();
    let mut scores = DMatrix::zeros(n, k);
    let mut cov = DMatrix::zeros(k, k);
    for (i, (xi, c)) in parts.iter().enumerate() {
        for j in 0..k {
            scores[(i, j)] = xi[j];
        }
        cov += c;
    }
    Ok(ScoreMatrix {
        scores,
        score_cov: cov / n as f64,
    })
}

fn default_surface_basis(g: usize) -> usize {
    (g / 3).clamp(4, 12)
}

/// Penalized-spline mean of all observations pooled together.
pub(crate) fn pooled_mean(curves: &[Curve], grid: &[f64]) -> Result<Vec<f64>> {
    let ts: Vec<f64> = curves.iter().flat_map(|c| c.grid.iter().copied()).collect();
    let ys: Vec<f64> = curves.iter().flat_map(|c| c.values.iter().copied()).collect();
    let domain = Interval::hull(ts.iter().copied().chain(grid.iter().copied()))
        .ok_or(Error::NoSubjects)?;
    let distinct = union_of(curves.iter().map(|c| c.grid.as_slice())).len();
    if distinct < 4 {
        return Err(Error::TooFewPoints { needed: 4, got: distinct });
    }
    let n_basis = (distinct / 3 + 4).clamp(4, 20).min(distinct);
    let fit = smooth_pooled(&ts, &ys, domain, n_basis)?;
    Ok(fit.eval_many(grid))
}

fn smooth_pooled(
    ts: &[f64],
    ys: &[f64],
    domain: Interval,
    n_basis: usize,
) -> Result<crate::funcdata::SmoothCurve> {
    let basis = make_basis(domain, n_basis, 3)?;
    crate::funcdata::fit_penalized_spline(basis, ts, ys, None, None)
}

fn center_curves(curves: &[Curve], grid: &[f64], mean: &[f64]) -> Vec<Curve> {
    curves
        .iter()
        .map(|c| {
            Curve::new(
                c.grid.clone(),
                c.grid
                    .iter()
                    .zip(&c.values)
                    .map(|(&t, &y)| y - interp_linear(grid, mean, t))
                    .collect(),
            )
        })
        .collect()
}

fn nearest_index(grid: &[f64], t: f64) -> usize {
    let j = grid.partition_point(|&g| g < t);
    if j == 0 {
        0
    } else if j == grid.len() {
        grid.len() - 1
    } else if t - grid[j - 1] <= grid[j] - t {
        j - 1
    } else {
        j
    }
}

/// Smoothed covariance surface and nugget from cross products.
struct SurfaceEstimate {
    surface: DMatrix<f64>,
    nugget: f64,
}

/// Bin within-curve cross products of (already centered) curves on the grid,
/// smooth the off-diagonal bins with a tensor-product penalized spline, and
/// estimate the nugget as the average diagonal excess.
fn smooth_cross_products(curves: &[Curve], grid: &[f64]) -> Result<SurfaceEstimate> {
    let g = grid.len();
    let mut sum = DMatrix::<f64>::zeros(g, g);
    let mut count = DMatrix::<f64>::zeros(g, g);
    let mut diag_sq = 0.0;
    let mut n_obs = 0usize;
    let mut diag_count = vec![0usize; g];
    for c in curves {
        let idx: Vec<usize> = c.grid.iter().map(|&t| nearest_index(grid, t)).collect();
        for a in 0..idx.len() {
            diag_sq += c.values[a] * c.values[a];
            diag_count[idx[a]] += 1;
            n_obs += 1;
            for b in 0..idx.len() {
                if a == b || idx[a] == idx[b] {
                    continue;
                }
                sum[(idx[a], idx[b])] += c.values[a] * c.values[b];
                count[(idx[a], idx[b])] += 1.0;
            }
        }
    }
    if n_obs == 0 {
        return Err(Error::NoSubjects);
    }
    let surface = if count.iter().all(|&c| c == 0.0) {
        DMatrix::zeros(g, g)
    } else {
        smooth_surface(&sum, &count, grid)?
    };
    let excess: f64 = diag_sq
        - diag_count
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * surface[(i, i)])
            .sum::<f64>();
    let mut nugget = excess / n_obs as f64;
    if nugget < 0.0 {
        log::warn!("estimated nugget {nugget:.3e} is negative; clipped at 0");
        nugget = 0.0;
    }
    Ok(SurfaceEstimate { surface, nugget })
}

fn smooth_surface(sum: &DMatrix<f64>, count: &DMatrix<f64>, grid: &[f64]) -> Result<DMatrix<f64>> {
    let g = grid.len();
    let kc = default_surface_basis(g);
    let basis = make_basis(Interval::new(grid[0], grid[g - 1]), kc, 3)?;
    let rows: Vec<Vec<f64>> = grid.iter().map(|&t| basis.raw_values(t)).collect::<Result<_>>()?;
    let nz: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| (0..kc).filter(|&j| r[j] != 0.0).collect())
        .collect();
    let p = kc * kc;
    let mut btb = DMatrix::<f64>::zeros(p, p);
    let mut bty = DVector::<f64>::zeros(p);
    let mut yty = 0.0;
    let mut wsum = 0.0;
    for i in 0..g {
        for j in 0..g {
            let w = count[(i, j)];
            if w == 0.0 {
                continue;
            }
            let y = sum[(i, j)] / w;
            let mut idx = Vec::with_capacity(16);
            let mut val = Vec::with_capacity(16);
            for &a in &nz[i] {
                for &b in &nz[j] {
                    idx.push(a * kc + b);
                    val.push(rows[i][a] * rows[j][b]);
                }
            }
            for (x, &u) in idx.iter().enumerate() {
                bty[u] += w * val[x] * y;
                for (z, &v) in idx.iter().enumerate() {
                    btb[(u, v)] += w * val[x] * val[z];
                }
            }
            yty += w * y * y;
            wsum += w;
        }
    }
    let pen1 = basis.second_derivative_penalty().matrix;
    let eye = DMatrix::identity(kc, kc);
    let penalty = kron(&pen1, &eye) + kron(&eye, &pen1);
    let sol = penalized_ls(&btb, &bty, yty, &penalty, wsum, None)?;
    let coef = DMatrix::from_fn(kc, kc, |a, b| sol.coef[a * kc + b]);
    let coef = (&coef + coef.transpose()) * 0.5;
    let bmat = DMatrix::from_fn(g, kc, |i, a| rows[i][a]);
    let surface = &bmat * coef * bmat.transpose();
    Ok((&surface + surface.transpose()) * 0.5)
}

/// Project a symmetric matrix onto the PSD cone by clipping eigenvalues.
fn psd_clip(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let n = vals.len();
    let scaled = DMatrix::from_fn(n, n, |i, j| vecs[(i, j)] * vals[j].max(0.0));
    let out = &scaled * vecs.transpose();
    (&out + out.transpose()) * 0.5
}

/// Split the covariance of residual curves into a smooth part and a nugget.
pub fn decompose_error_covariance(residuals: &FunctionalDataset, grid: &[f64]) -> Result<ErrorCovariance> {
    decompose_curves(&response_curves(residuals), grid)
}

pub(crate) fn decompose_curves(curves: &[Curve], grid: &[f64]) -> Result<ErrorCovariance> {
    if grid.len() < 3 {
        return Err(Error::GridTooShort(grid.len()));
    }
    let est = smooth_cross_products(curves, grid)?;
    let (eigenvalues, eigenfunctions) = weighted_eigen(&psd_clip(&est.surface), grid);
    Ok(ErrorCovariance {
        grid: grid.to_vec(),
        eigenvalues,
        eigenfunctions,
        nugget: est.nugget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::SubjectRecord;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::{PI, SQRT_2};

    fn grid101() -> Vec<f64> {
        Interval::unit().linspace(101)
    }

    fn dataset_from(curves: Vec<Vec<f64>>, grid: &[f64]) -> FunctionalDataset {
        let subjects = curves
            .into_iter()
            .enumerate()
            .map(|(i, y)| {
                SubjectRecord::new(format!("s{i}"), vec![0.0, 1.0], vec![0.0, 0.0], grid.to_vec(), y)
            })
            .collect();
        FunctionalDataset::new(subjects, Interval::unit(), Interval::unit()).unwrap()
    }

    fn l2_norm_diff(a: &[f64], b: &[f64], grid: &[f64]) -> f64 {
        let w = trapezoid_weights(grid);
        (0..grid.len()).map(|i| w[i] * (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    }

    fn smooth_f(t: f64) -> f64 {
        1.0 + 0.5 * t - 0.3 * t * t
    }

    #[test]
    fn mean_of_identical_and_symmetric_curves() {
        let g = grid101();
        let f: Vec<f64> = g.iter().map(|&t| smooth_f(t)).collect();
        let ds = dataset_from(vec![f.clone(); 5], &g);
        for design in [Design::Dense, Design::Sparse] {
            let m = estimate_mean(&ds, &g, design).unwrap();
            assert!(m.iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-6), "{design}");
        }
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        let ds = dataset_from(vec![f.clone(), neg.clone(), f, neg], &g);
        for design in [Design::Dense, Design::Sparse] {
            let m = estimate_mean(&ds, &g, design).unwrap();
            assert!(m.iter().all(|v| v.abs() < 1e-6), "{design}");
        }
    }

    #[test]
    fn mean_needs_two_subjects() {
        let g = grid101();
        let ds = dataset_from(vec![vec![0.0; 101]], &g);
        assert!(matches!(estimate_mean(&ds, &g, Design::Dense), Err(Error::TooFewSubjects(1))));
    }

    #[test]
    fn noisy_mean_is_close() {
        let g = grid101();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let f = |t: f64| (2.0 * PI * t).sin();
        let curves = (0..200)
            .map(|_| g.iter().map(|&t| f(t) + noise.sample(&mut rng)).collect())
            .collect();
        let ds = dataset_from(curves, &g);
        let m = estimate_mean(&ds, &g, Design::Dense).unwrap();
        let err = g.iter().zip(&m).map(|(&t, v)| (v - f(t)).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "sup error {err}");
    }

    #[test]
    fn rank_one_covariance_recovered() {
        let g = grid101();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sd2 = Normal::new(0.0, 2.0).unwrap();
        let phi = |t: f64| SQRT_2 * (PI * t).sin();
        let curves = (0..500)
            .map(|_| {
                let xi = sd2.sample(&mut rng);
                g.iter().map(|&t| xi * phi(t)).collect()
            })
            .collect();
        let ds = dataset_from(curves, &g);
        let fit = fit_fpca(&ds, &FpcaOptions::default()).unwrap();
        assert_eq!(fit.k(), 1);
        assert!((fit.basis.eigenvalues[0] - 4.0).abs() < 0.4, "{:?}", fit.basis.eigenvalues);
        let truth: Vec<f64> = g.iter().map(|&t| phi(t)).collect();
        let est: Vec<f64> = fit.basis.eigenfunctions.column(0).iter().copied().collect();
        assert!(l2_norm_diff(&est, &truth, &g) < 1e-2);
    }

    #[test]
    fn identical_curves_have_zero_covariance() {
        let g = grid101();
        let f: Vec<f64> = g.iter().map(|&t| (3.0 * t).cos()).collect();
        let ds = dataset_from(vec![f; 4], &g);
        let mean = estimate_mean(&ds, &g, Design::Dense).unwrap();
        let c = estimate_covariance(&ds, &mean, &g, Design::Dense).unwrap();
        assert!(c.amax() < 1e-8);
        assert!(matches!(eigendecompose(&c, &g, 0.95), Err(Error::DegenerateCovariance)));
    }

    #[test]
    fn covariance_is_exactly_symmetric_and_needs_a_grid() {
        let g = Interval::unit().linspace(30);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let curves: Vec<Vec<f64>> = (0..20).map(|_| (0..30).map(|_| rng.random::<f64>()).collect()).collect();
        let ds = dataset_from(curves, &g);
        for design in [Design::Dense, Design::Sparse] {
            let mean = estimate_mean(&ds, &g, design).unwrap();
            let c = estimate_covariance(&ds, &mean, &g, design).unwrap();
            assert_eq!(c, c.transpose());
        }
        assert!(matches!(
            estimate_covariance(&ds, &[0.0, 0.0], &[0.0, 1.0], Design::Dense),
            Err(Error::GridTooShort(2))
        ));
    }

    #[test]
    fn rank_one_eigendecomposition_and_parseval() {
        let g = grid101();
        let phi: Vec<f64> = g.iter().map(|&t| SQRT_2 * (PI * t).cos()).collect();
        let c = DMatrix::from_fn(101, 101, |i, j| 4.0 * phi[i] * phi[j]);
        let b = eigendecompose(&c, &g, 0.95).unwrap();
        assert_eq!(b.k(), 1);
        // the trapezoid norm of the sampled cosine is not exactly 1
        let w = trapezoid_weights(&g);
        let norm2: f64 = (0..101).map(|i| w[i] * phi[i] * phi[i]).sum();
        assert_abs_diff_eq!(b.eigenvalues[0], 4.0 * norm2, epsilon = 1e-10);
        let est: Vec<f64> = b.eigenfunctions.column(0).iter().copied().collect();
        let scaled: Vec<f64> = phi.iter().map(|v| v / norm2.sqrt()).collect();
        assert!(l2_norm_diff(&est, &scaled, &g) < 1e-8);
        assert!(est[0] > 0.0);
    }

    #[test]
    fn equal_eigenvalues_are_ordered_deterministically() {
        let g = grid101();
        let p1: Vec<f64> = g.iter().map(|&t| SQRT_2 * (2.0 * PI * t).sin()).collect();
        let p2: Vec<f64> = g.iter().map(|&t| SQRT_2 * (2.0 * PI * t).cos()).collect();
        let c = DMatrix::from_fn(101, 101, |i, j| p1[i] * p1[j] + p2[i] * p2[j]);
        let a = eigendecompose(&c, &g, 0.999).unwrap();
        let b = eigendecompose(&c, &g, 0.999).unwrap();
        assert_eq!(a.k(), 2);
        assert_eq!(a, b);
        let changes: Vec<usize> = (0..2)
            .map(|k| first_sign_change(&a.eigenfunctions.column(k).iter().copied().collect::<Vec<_>>()))
            .collect();
        assert!(changes[0] <= changes[1]);
    }

    #[test]
    fn chains_of_near_ties_do_not_break_the_ordering() {
        // Eigenvalues 1e-11 apart: each neighbour pair is tied, the ends are not.
        let g = grid101();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = DMatrix::from_fn(101, 101, |_, _| rng.random::<f64>() - 0.5).qr().q();
        let d = DMatrix::from_fn(101, 101, |i, j| if i == j { 1.0 - 1e-11 * i as f64 } else { 0.0 });
        let c = &q * d * q.transpose();
        let b = eigendecompose(&c, &g, 0.5).unwrap();
        assert!(b.k() > 1);
        assert_eq!(b, eigendecompose(&c, &g, 0.5).unwrap());
    }

    fn kl_dataset(n: usize, noise_sd: f64, seed: u64) -> FunctionalDataset {
        let g = grid101();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let curves = (0..n)
            .map(|_| {
                let a = 2.0 * z.sample(&mut rng);
                let b = z.sample(&mut rng);
                g.iter()
                    .map(|&t| {
                        a * SQRT_2 * (2.0 * PI * t).sin()
                            + b * SQRT_2 * (2.0 * PI * t).cos()
                            + noise_sd * z.sample(&mut rng)
                    })
                    .collect()
            })
            .collect();
        dataset_from(curves, &g)
    }

    #[test]
    fn scores_of_exact_eigenfunction_and_of_zero() {
        let ds = kl_dataset(100, 0.0, 1);
        let fit = fit_fpca(&ds, &FpcaOptions::default()).unwrap();
        let g = fit.basis.grid.clone();
        let phi1: Vec<f64> = fit.basis.eigenfunctions.column(0).iter().copied().collect();
        let y: Vec<f64> = (0..g.len()).map(|i| fit.basis.mean[i] + 2.0 * phi1[i]).collect();
        let s = fit.project(&Curve::new(g.clone(), y)).unwrap();
        assert_abs_diff_eq!(s[0], 2.0, epsilon = 1e-6);
        assert!(s[1..].iter().all(|v| v.abs() < 1e-6));
        let zero = Curve::new(g.clone(), vec![0.0; g.len()]);
        let mut basis = fit.basis.clone();
        basis.mean = vec![0.0; g.len()];
        let zfit = FpcaFit { basis, ..fit };
        assert!(zfit.project(&zero).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn simulated_score_variance_and_reconstruction() {
        let ds = kl_dataset(300, 0.0, 2);
        let fit = fit_fpca(&ds, &FpcaOptions { pve: 0.999, ..FpcaOptions::default() }).unwrap();
        assert_eq!(fit.k(), 2);
        let s = fit.scores.scores.column(0);
        let var = s.iter().map(|v| v * v).sum::<f64>() / (s.len() as f64 - 1.0);
        assert!((var - 4.0).abs() < 0.6, "score variance {var}");
        // reconstruction of the smoothed, de-meaned curves
        let smoothed = smooth_all(&response_curves(&ds), &fit.basis.grid).unwrap();
        for i in 0..10 {
            let scores: Vec<f64> = fit.scores.scores.row(i).iter().copied().collect();
            let rec = fit.basis.reconstruct(&scores);
            let row: Vec<f64> = smoothed.row(i).iter().copied().collect();
            assert!(l2_norm_diff(&rec, &row, &fit.basis.grid) < 1e-4);
        }
        // dense score covariance is diagonal
        let nu = &fit.scores.score_cov;
        assert!(nu[(0, 1)].abs() <= 1e-4 * (nu[(0, 0)] * nu[(1, 1)]).sqrt());
    }

    #[test]
    fn empty_response_has_undefined_score() {
        let g = grid101();
        let mut ds_subjects = kl_dataset(5, 0.0, 3).subjects().to_vec();
        ds_subjects[2].t_grid.clear();
        ds_subjects[2].y_values.clear();
        let ds = FunctionalDataset::covariates_only(ds_subjects, Interval::unit()).unwrap();
        let b = fit_fpca(&kl_dataset(10, 0.0, 4), &FpcaOptions::default()).unwrap().basis;
        assert!(matches!(
            compute_scores(&ds, &b, Design::Dense, 0.0),
            Err(Error::ScoreUndefined(id)) if id == "s2"
        ));
        let _ = g;
    }

    #[test]
    fn sparse_path_recovers_leading_eigenvalue() {
        let g = grid101();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Normal::new(0.0, 1.0).unwrap();
        let subjects = (0..300)
            .map(|i| {
                let m = rng.random_range(35..=44);
                let mut idx = rand::seq::index::sample(&mut rng, 101, m).into_vec();
                idx.sort_unstable();
                let t: Vec<f64> = idx.iter().map(|&j| g[j]).collect();
                let a = 2.0 * z.sample(&mut rng);
                let b = z.sample(&mut rng);
                let y = t
                    .iter()
                    .map(|&t| {
                        a * SQRT_2 * (2.0 * PI * t).sin() + b * SQRT_2 * (2.0 * PI * t).cos()
                            + 0.3 * z.sample(&mut rng)
                    })
                    .collect();
                SubjectRecord::new(format!("s{i}"), vec![0.0, 1.0], vec![0.0, 0.0], t, y)
            })
            .collect();
        let ds = FunctionalDataset::new(subjects, Interval::unit(), Interval::unit()).unwrap();
        let fit = fit_fpca(&ds, &FpcaOptions::default()).unwrap();
        assert_eq!(fit.design, Design::Sparse);
        assert!(fit.k() >= 2);
        assert!((fit.basis.eigenvalues[0] - 4.0).abs() < 0.8, "{:?}", fit.basis.eigenvalues);
        assert!((fit.noise_var - 0.09).abs() < 0.05, "nugget {}", fit.noise_var);
        let nu = &fit.scores.score_cov;
        assert!(sym_eigen_desc(nu).0.min() > -1e-10);
    }

    #[test]
    fn white_noise_residuals_give_a_nugget() {
        let g = grid101();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let curves: Vec<Curve> = (0..200)
            .map(|_| Curve::new(g.clone(), g.iter().map(|_| noise.sample(&mut rng)).collect()))
            .collect();
        let e = decompose_curves(&curves, &g).unwrap();
        assert!((e.nugget - 0.25).abs() < 0.05, "nugget {}", e.nugget);
        assert!(e.eigenvalues.first().copied().unwrap_or(0.0) < 0.05);
    }

    #[test]
    fn smooth_residuals_have_no_nugget() {
        let g = grid101();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let z = Normal::new(0.0, 1.0).unwrap();
        let curves: Vec<Curve> = (0..200)
            .map(|_| {
                let zeta = z.sample(&mut rng);
                Curve::new(g.clone(), g.iter().map(|&t| zeta * (2.0 * PI * t).sin()).collect())
            })
            .collect();
        let e = decompose_curves(&curves, &g).unwrap();
        assert!(e.nugget < 0.02, "nugget {}", e.nugget);
        assert!(e.eigenvalues[0] > 0.2);
        let rest: f64 = e.eigenvalues[1..].iter().sum();
        assert!(rest < 0.05 * e.eigenvalues[0], "{:?}", e.eigenvalues);
    }

    #[test]
    fn zero_residuals_decompose_to_zero() {
        let g = grid101();
        let curves = vec![Curve::new(g.clone(), vec![0.0; 101]); 5];
        let e = decompose_curves(&curves, &g).unwrap();
        assert_eq!(e.nugget, 0.0);
        assert!(e.smooth_matrix().amax() < 1e-14);
    }

    #[test]
    fn eigenbasis_json_round_trip() {
        let fit = fit_fpca(&kl_dataset(30, 0.1, 6), &FpcaOptions::default()).unwrap();
        let back = EigenBasis::from_json(&fit.basis.to_json().unwrap()).unwrap();
        assert_eq!(back.grid, fit.basis.grid);
        assert_eq!(back.k(), fit.basis.k());
        assert!((back.eigenfunctions - &fit.basis.eigenfunctions).amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn eigenbasis_invariants(seed in 0u64..1000, pve in 0.5f64..0.999) {
            let fit = fit_fpca(&kl_dataset(40, 0.2, seed), &FpcaOptions { pve, ..FpcaOptions::default() }).unwrap();
            let b = &fit.basis;
            let w = b.weights();
            for k in 0..b.k() {
                for l in 0..b.k() {
                    let ip: f64 = (0..w.len()).map(|g| w[g] * b.eigenfunctions[(g, k)] * b.eigenfunctions[(g, l)]).sum();
                    let want = if k == l { 1.0 } else { 0.0 };
                    prop_assert!((ip - want).abs() < 1e-6);
                }
                let first = b.eigenfunctions.column(k).iter().copied().find(|v| v.abs() > 1e-8).unwrap();
                prop_assert!(first > 0.0);
            }
            prop_assert!(b.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
            prop_assert!(b.eigenvalues.iter().all(|&v| v >= 0.0));
            prop_assert!(b.pve >= pve - 1e-12);
            let min_nu = sym_eigen_desc(&fit.scores.score_cov).0.min();
            prop_assert!(min_nu >= -1e-10);
        }

        #[test]
        fn parseval_on_dense_path(seed in 0u64..1000) {
            let ds = kl_dataset(30, 0.3, seed);
            let g = grid101();
            let mean = estimate_mean(&ds, &g, Design::Dense).unwrap();
            let c = estimate_covariance(&ds, &mean, &g, Design::Dense).unwrap();
            let b = eigendecompose(&c, &g, 1.0).unwrap();
            let w = trapezoid_weights(&g);
            let trace: f64 = (0..g.len()).map(|i| w[i] * c[(i, i)]).sum();
            let sum: f64 = b.eigenvalues.iter().sum();
            prop_assert!((sum - trace).abs() < 1e-6 * (1.0 + trace));
        }
    }
}
