//! Estimation and prediction for additive function-on-function models.
//!
//! The response is reduced to principal-component scores; each score is
//! regressed on the subject's design vector `z_i` whose entries are
//! `∫ B_X,l(x̃_i(s)) B_S,l'(s) ds`, with a tensor-product roughness penalty.
//! All K regressions share one design and one penalty, so a single
//! decomposition of `Z'Z + P_λ` serves every score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{make_basis, BSplineBasis};
use crate::error::{Error, Result};
use crate::fpca::{
    covariate_curves, decompose_curves, pooled_mean, response_curves, smooth_onto, Curve, Design,
    EigenBasis, ErrorCovariance, FpcaFit, PreparedCurves,
};
use crate::funcdata::{trapezoid_weights, FunctionalDataset, Interval};
use crate::linalg::{gauss_legendre, interp_linear, kron, sym_eigen_desc, PsdInverse};

pub const MODEL_FORMAT: &str = "affpc-model";
pub const MODEL_VERSION: u32 = 1;

/// Pointwise covariate standard deviations below this are degenerate.
pub const SD_FLOOR: f64 = 1e-6;

/// Quadrature nodes per covariate-grid interval when assembling the design.
const NODES_PER_INTERVAL: usize = 3;

/// Padding of the standardized-value range on each side, as a fraction of its width.
pub const CLAMP_PAD: f64 = 0.05;

/// How raw covariate samples are turned into curves before the design is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum CovariateSmoothing {
    /// Use the observations as they are.
    None,
    /// Penalized-spline smooth of each curve on its own.
    Curve,
    /// Principal-component reconstruction retaining `pve` of the variance.
    Fpca { pve: f64 },
}

impl Default for CovariateSmoothing {
    fn default() -> Self {
        CovariateSmoothing::Fpca { pve: 0.99 }
    }
}

/// Criterion for choosing the smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gcv,
    Reml,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcv" => Ok(Criterion::Gcv),
            "reml" => Ok(Criterion::Reml),
            other => Err(Error::InvalidConfig(format!(
                "criterion must be gcv or reml, got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Gcv => "gcv",
            Criterion::Reml => "reml",
        })
    }
}

/// Log-spaced candidate values shared by both smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// Follow the grid search with one local pass at half and quarter steps.
    pub refine: bool,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            lo: 1e-6,
            hi: 1e6,
            points: 11,
            refine: true,
        }
    }
}

impl LambdaGrid {
    pub fn single(lambda: f64) -> Self {
        Self {
            lo: lambda,
            hi: lambda,
            points: 1,
            refine: false,
        }
    }

    fn validate(&self) -> Result<()> {
        for v in [self.lo, self.hi] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidLambda(v));
            }
        }
        if self.points == 0 || self.hi < self.lo || (self.points > 1 && self.hi == self.lo) {
            return Err(Error::InvalidConfig(format!(
                "lambda grid [{}, {}] with {} points is empty or reversed",
                self.lo, self.hi, self.points
            )));
        }
        Ok(())
    }

    fn log_step(&self) -> f64 {
        if self.points < 2 {
            0.0
        } else {
            (self.hi.log10() - self.lo.log10()) / (self.points - 1) as f64
        }
    }

    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        let step = self.log_step();
        (0..self.points)
            .map(|i| 10f64.powf(self.lo.log10() + step * i as f64))
            .collect()
    }
}

/// Fixed smoothing parameters or a search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LambdaSpec {
    Fixed { x: f64, s: f64 },
    Search { criterion: Criterion, grid: LambdaGrid },
}

impl Default for LambdaSpec {
    fn default() -> Self {
        LambdaSpec::Search {
            criterion: Criterion::Gcv,
            grid: LambdaGrid::default(),
        }
    }
}

/// Additive model `∫F(X(s), s, t) ds` or its functional linear special case
/// `∫β(s,t) X(s) ds` (untransformed covariate, unpenalized intercept).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Additive,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub kind: ModelKind,
    pub kx: usize,
    pub ks: usize,
    pub degree_x: usize,
    pub degree_s: usize,
    /// Proportion of response variance retained by the eigenbasis.
    pub pve: f64,
    /// Response design; chosen from the data when `None`.
    pub design: Option<Design>,
    pub covariate_smoothing: CovariateSmoothing,
    /// Pointwise center/scale the covariate before evaluating `B_X`.
    pub standardize: bool,
    pub lambda: LambdaSpec,
    /// Prepend an unpenalized intercept column even without scalar covariates.
    pub intercept: bool,
    pub response_grid: Option<Vec<f64>>,
    pub covariate_grid: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            kind: ModelKind::Additive,
            kx: 7,
            ks: 7,
            degree_x: 3,
            degree_s: 3,
            pve: 0.95,
            design: None,
            covariate_smoothing: CovariateSmoothing::default(),
            standardize: true,
            lambda: LambdaSpec::default(),
            intercept: false,
            response_grid: None,
            covariate_grid: None,
        }
    }
}

impl FitOptions {
    /// The functional linear model baseline with otherwise identical settings.
    pub fn linear(&self) -> Self {
        Self {
            kind: ModelKind::Linear,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kx == 0 || self.ks == 0 {
            return Err(Error::InvalidConfig("kx and ks must be positive".into()));
        }
        if !(self.pve > 0.0 && self.pve <= 1.0) {
            return Err(Error::InvalidConfig(format!("pve must lie in (0, 1], got {}", self.pve)));
        }
        if let CovariateSmoothing::Fpca { pve } = self.covariate_smoothing {
            if !(pve > 0.0 && pve <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "covariate pve must lie in (0, 1], got {pve}"
                )));
            }
        }
        match self.lambda {
            LambdaSpec::Fixed { x, s } => {
                for v in [x, s] {
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(Error::InvalidLambda(v));
                    }
                }
            }
            LambdaSpec::Search { grid, .. } => grid.validate()?,
        }
        Ok(())
    }
}

/// Pointwise center/scale map of the covariate, with the clamp range that
/// doubles as the domain of `B_X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransform {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub clamp: Interval,
}

impl CovariateTransform {
    pub fn standardize(&self, s: f64, x: f64) -> f64 {
        (x - interp_linear(&self.grid, &self.mean, s)) / interp_linear(&self.grid, &self.sd, s)
    }

    /// Standardize and clamp a curve; returns the number of clamped points.
    pub fn apply(&self, curve: &Curve) -> (Curve, usize) {
        let mut clamped = 0;
        let values = curve
            .grid
            .iter()
            .zip(&curve.values)
            .map(|(&s, &x)| {
                let z = self.standardize(s, x);
                if z < self.clamp.lo || z > self.clamp.hi {
                    clamped += 1;
                }
                z.clamp(self.clamp.lo, self.clamp.hi)
            })
            .collect();
        (Curve::new(curve.grid.clone(), values), clamped)
    }
}

fn padded(lo: f64, hi: f64) -> Interval {
    let pad = CLAMP_PAD * (hi - lo).max(f64::EPSILON * lo.abs().max(hi.abs()).max(1.0));
    Interval::new(lo - pad, hi + pad)
}

/// Fit the pointwise transform to training curves. Curves sharing `grid`
/// use pointwise moments; otherwise the moments are smoothed from the pooled
/// observations. With `standardize` false the map is the identity and only
/// the clamp range is estimated.
pub fn fit_transform(curves: &[Curve], grid: &[f64], standardize: bool) -> Result<CovariateTransform> {
    let n = curves.len();
    if n < 2 {
        return Err(Error::TooFewSubjects(n));
    }
    let (mean, sd) = if !standardize {
        (vec![0.0; grid.len()], vec![1.0; grid.len()])
    } else if curves.iter().all(|c| c.grid == grid) {
        let g = grid.len();
        let mut mean = vec![0.0; g];
        for c in curves {
            for (m, v) in mean.iter_mut().zip(&c.values) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; g];
        for c in curves {
            for j in 0..g {
                var[j] += (c.values[j] - mean[j]).powi(2) / (n as f64 - 1.0);
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    } else {
        let mean = pooled_mean(curves, grid)?;
        let sq: Vec<Curve> = curves
            .iter()
            .map(|c| {
                Curve::new(
                    c.grid.clone(),
                    c.grid
                        .iter()
                        .zip(&c.values)
                        .map(|(&s, &x)| (x - interp_linear(grid, &mean, s)).powi(2))
                        .collect(),
                )
            })
            .collect();
        let var = pooled_mean(&sq, grid)?;
        (mean, var.into_iter().map(|v| v.max(0.0).sqrt()).collect())
    };
    if let Some((j, &s)) = sd.iter().enumerate().find(|(_, &s)| !(s >= SD_FLOOR)) {
        return Err(Error::DegenerateCovariate { s: grid[j], sd: s });
    }
    let mut t = CovariateTransform {
        grid: grid.to_vec(),
        mean,
        sd,
        clamp: Interval::new(f64::NEG_INFINITY, f64::INFINITY),
    };
    let (lo, hi) = curves
        .iter()
        .flat_map(|c| c.grid.iter().zip(&c.values))
        .map(|(&s, &x)| t.standardize(s, x))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z), hi.max(z)));
    t.clamp = padded(lo, hi);
    Ok(t)
}

/// Fitted covariate smoother, applied identically to training and new curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum CovariateSmoother {
    None,
    Curve { grid: Vec<f64> },
    Fpca { grid: Vec<f64>, fit: Box<FpcaFit> },
}

impl CovariateSmoother {
    fn needs_smooth(&self) -> bool {
        match self {
            CovariateSmoother::None => false,
            CovariateSmoother::Curve { .. } => true,
            CovariateSmoother::Fpca { fit, .. } => fit.design == Design::Dense,
        }
    }

    fn grid(&self) -> Option<&[f64]> {
        match self {
            CovariateSmoother::None => None,
            CovariateSmoother::Curve { grid } | CovariateSmoother::Fpca { grid, .. } => Some(grid),
        }
    }

    fn apply(&self, cov: &PreparedCovariate) -> Result<Curve> {
        let smooth = || -> Result<Vec<f64>> {
            match &cov.smooth {
                Some(s) => Ok(s.clone()),
                None => smooth_onto(&cov.curve, self.grid().expect("smoothing grid")),
            }
        };
        match self {
            CovariateSmoother::None => Ok(cov.curve.clone()),
            CovariateSmoother::Curve { grid } => Ok(Curve::new(grid.clone(), smooth()?)),
            CovariateSmoother::Fpca { grid, fit } => {
                let scores = match fit.design {
                    Design::Dense => fit.project_smoothed(&smooth()?),
                    Design::Sparse => fit.project(&cov.curve)?,
                };
                Ok(Curve::new(grid.clone(), fit.reconstruct_scores_on(&scores, grid)))
            }
        }
    }
}

/// A covariate curve with optional scalar covariates, plus its smooth on
/// the covariate grid when the smoother needs one.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCovariate {
    pub curve: Curve,
    pub scalars: Option<Vec<f64>>,
    smooth: Option<Vec<f64>>,
}

impl PreparedCovariate {
    pub fn raw(curve: Curve, scalars: Option<Vec<f64>>) -> Self {
        Self {
            curve,
            scalars,
            smooth: None,
        }
    }
}

/// Training data with the subject-level work (curve smoothing) done once,
/// so that bootstrap replicates only redo the sample-level estimation.
#[derive(Debug, Clone)]
pub struct TrainingData {
    response: PreparedCurves,
    covariates: PreparedCurves,
    scalars: Vec<Option<Vec<f64>>>,
    scalar_names: Vec<String>,
    ids: Vec<String>,
    covariate_domain: Interval,
    response_domain: Interval,
    smoothing: CovariateSmoothing,
}

impl TrainingData {
    pub fn new(dataset: &FunctionalDataset, options: &FitOptions) -> Result<Self> {
        options.validate()?;
        if !dataset.has_response() {
            return Err(Error::InvalidDataset("training data needs responses".into()));
        }
        if dataset.len() < 2 {
            return Err(Error::TooFewSubjects(dataset.len()));
        }
        let response = PreparedCurves::new(
            response_curves(dataset),
            options.response_grid.clone(),
            options.design,
        )?;
        let cov_design = match options.covariate_smoothing {
            CovariateSmoothing::None => Some(Design::Sparse),
            CovariateSmoothing::Curve => Some(Design::Dense),
            CovariateSmoothing::Fpca { .. } => None,
        };
        let covariates =
            PreparedCurves::new(covariate_curves(dataset), options.covariate_grid.clone(), cov_design)?;
        Ok(Self {
            response,
            covariates,
            scalars: dataset.subjects().iter().map(|s| s.scalar_covariates.clone()).collect(),
            scalar_names: dataset.scalar_names().to_vec(),
            ids: dataset.subjects().iter().map(|s| s.id.clone()).collect(),
            covariate_domain: dataset.covariate_domain(),
            response_domain: dataset.response_domain(),
            smoothing: options.covariate_smoothing,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn response(&self) -> &PreparedCurves {
        &self.response
    }

    pub fn covariate_grid(&self) -> &[f64] {
        self.covariates.grid()
    }

    pub fn response_grid(&self) -> &[f64] {
        self.response.grid()
    }

    /// Subjects at `indices`, repeats allowed.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            response: self.response.subset(indices),
            covariates: self.covariates.subset(indices),
            scalars: indices.iter().map(|&i| self.scalars[i].clone()).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            scalar_names: self.scalar_names.clone(),
            ..*self
        }
    }

    fn training_covariate(&self, i: usize) -> PreparedCovariate {
        PreparedCovariate {
            curve: self.covariates.curves()[i].clone(),
            scalars: self.scalars[i].clone(),
            smooth: self
                .covariates
                .smoothed()
                .map(|s| s.row(i).iter().copied().collect()),
        }
    }

    /// Prepare a new covariate curve the way training curves were prepared.
    pub fn prepare(&self, curve: Curve, scalars: Option<Vec<f64>>) -> Result<PreparedCovariate> {
        let needs = match self.smoothing {
            CovariateSmoothing::None => false,
            CovariateSmoothing::Curve => true,
            CovariateSmoothing::Fpca { .. } => self.covariates.design() == Design::Dense,
        };
        let smooth = if needs {
            Some(smooth_onto(&curve, self.covariates.grid())?)
        } else {
            None
        };
        Ok(PreparedCovariate {
            curve,
            scalars,
            smooth,
        })
    }
}

/// Design matrix with augmentation columns first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub rows: DMatrix<f64>,
    pub n_aug: usize,
    pub kx: usize,
    pub ks: usize,
}

impl DesignMatrix {
    pub fn new(rows: DMatrix<f64>, n_aug: usize, kx: usize, ks: usize) -> Result<Self> {
        if rows.ncols() != n_aug + kx * ks {
            return Err(Error::InvalidConfig(format!(
                "design has {} columns, expected {}",
                rows.ncols(),
                n_aug + kx * ks
            )));
        }
        Ok(Self { rows, n_aug, kx, ks })
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Column of the tensor coefficient `(l, l')`.
    pub fn column_index(&self, l: usize, lp: usize) -> usize {
        self.n_aug + l * self.ks + lp
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let g = self.rows.tr_mul(&self.rows);
        (&g + g.transpose()) * 0.5
    }
}

/// Feature map shared by training and prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Features {
    kind: ModelKind,
    basis_x: Option<BSplineBasis>,
    basis_s: BSplineBasis,
    n_aug: usize,
    n_scalars: usize,
}

impl Features {
    fn kx(&self) -> usize {
        self.basis_x.as_ref().map_or(1, BSplineBasis::n_basis)
    }

    fn dim(&self) -> usize {
        self.n_aug + self.kx() * self.basis_s.n_basis()
    }

    /// `curve` is already transformed (additive) or raw (linear).
    fn row(&self, curve: &Curve, scalars: Option<&[f64]>) -> Result<DVector<f64>> {
        let mut row = DVector::zeros(self.dim());
        if self.n_aug > 0 {
            row[0] = 1.0;
            if self.n_scalars > 0 {
                let z = scalars.ok_or(Error::MissingCovariate {
                    expected: self.n_scalars,
                    got: 0,
                })?;
                if z.len() != self.n_scalars {
                    return Err(Error::MissingCovariate {
                        expected: self.n_scalars,
                        got: z.len(),
                    });
                }
                for (j, v) in z.iter().enumerate() {
                    row[1 + j] = *v;
                }
            }
        }
        if curve.grid.len() < 2 {
            return Err(Error::InvalidDataset(
                "covariate curve needs at least 2 points".into(),
            ));
        }
        // Gauss-Legendre on each interval of the subject grid, with the
        // covariate linearly interpolated between observations.
        let (nodes, weights) = gauss_legendre(NODES_PER_INTERVAL);
        let ks = self.basis_s.n_basis();
        for (sv, xv) in curve.grid.windows(2).zip(curve.values.windows(2)) {
            let half = 0.5 * (sv[1] - sv[0]);
            for (u, wu) in nodes.iter().zip(&weights) {
                let frac = 0.5 * (u + 1.0);
                let s = sv[0] + frac * (sv[1] - sv[0]);
                let x = xv[0] + frac * (xv[1] - xv[0]);
                let w = half * wu;
                let bs = self.basis_s.values_clamped(s);
                match &self.basis_x {
                    Some(bx) => {
                        for (l, a) in bx.values_clamped(x).iter().enumerate() {
                            let base = self.n_aug + l * ks;
                            for (lp, b) in bs.iter().enumerate() {
                                row[base + lp] += w * a * b;
                            }
                        }
                    }
                    None => {
                        for (lp, b) in bs.iter().enumerate() {
                            row[self.n_aug + lp] += w * x * b;
                        }
                    }
                }
            }
        }
        Ok(row)
    }

    fn penalties(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let ps = self.basis_s.second_derivative_penalty().matrix;
        let px = match &self.basis_x {
            Some(bx) => bx.second_derivative_penalty().matrix,
            None => DMatrix::zeros(1, 1),
        };
        (px, ps)
    }
}

/// `λx Px ⊗ I + λs I ⊗ Ps` with a zero block for the augmentation columns.
pub fn assemble_penalty(
    px: &DMatrix<f64>,
    ps: &DMatrix<f64>,
    lambda_x: f64,
    lambda_s: f64,
    n_aug: usize,
) -> Result<DMatrix<f64>> {
    for v in [lambda_x, lambda_s] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidLambda(v));
        }
    }
    let (kx, ks) = (px.nrows(), ps.nrows());
    let block = kron(px, &DMatrix::identity(ks, ks)) * lambda_x
        + kron(&DMatrix::identity(kx, kx), ps) * lambda_s;
    let m = n_aug + kx * ks;
    let mut p = DMatrix::zeros(m, m);
    p.view_mut((n_aug, n_aug), (kx * ks, kx * ks)).copy_from(&block);
    Ok((&p + p.transpose()) * 0.5)
}

/// Coefficients and the shared decomposition of `Z'Z + P_λ`.
#[derive(Debug, Clone)]
pub struct Solution {
    /// `M x K`, one column per score.
    pub theta: DMatrix<f64>,
    pub solver: PsdInverse,
}

/// Solve `(Z'Z + P_λ) Θ_k = Z'ξ_k` for every score column at once. The
/// system is solved in the least-norm sense: directions that neither the
/// data nor the penalty determine are set to zero and never affect fitted
/// values.
pub fn solve(design: &DesignMatrix, scores: &DMatrix<f64>, penalty: &DMatrix<f64>) -> Result<Solution> {
    if scores.nrows() != design.n() {
        return Err(Error::InvalidConfig(format!(
            "{} score rows for {} design rows",
            scores.nrows(),
            design.n()
        )));
    }
    let rhs = design.rows.tr_mul(scores);
    solve_normal(&design.gram(), &rhs, penalty)
}

fn solve_normal(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, penalty: &DMatrix<f64>) -> Result<Solution> {
    let a = gram + penalty;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("non-finite entries".into()));
    }
    let solver = PsdInverse::new(&a);
    if solver.rank() == 0 {
        return Err(Error::SingularSystem("the system matrix is zero".into()));
    }
    Ok(Solution {
        theta: solver.solve_matrix(rhs),
        solver,
    })
}

/// One evaluated candidate of the smoothing-parameter search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrial {
    pub lambda_x: f64,
    pub lambda_s: f64,
    /// GCV (minimized) or restricted log-likelihood (maximized); `None` when
    /// undefined at this candidate.
    pub score: Option<f64>,
    pub edf: f64,
    pub refinement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda_x: f64,
    pub lambda_s: f64,
    /// `"fixed"`, `"gcv"` or `"reml"`.
    pub method: String,
    pub trace: Vec<LambdaTrial>,
}

struct CrossProducts {
    gram: DMatrix<f64>,
    rhs: DMatrix<f64>,
    yy: Vec<f64>,
    n: usize,
}

impl CrossProducts {
    fn new(design: &DesignMatrix, scores: &DMatrix<f64>) -> Self {
        Self {
            gram: design.gram(),
            rhs: design.rows.tr_mul(scores),
            yy: scores.column_iter().map(|c| c.norm_squared()).collect(),
            n: design.n(),
        }
    }

    /// Per-score residual sums of squares and penalty values.
    fn rss(&self, theta: &DMatrix<f64>, penalty: &DMatrix<f64>) -> Vec<(f64, f64)> {
        (0..theta.ncols())
            .map(|k| {
                let th = theta.column(k);
                let fit = th.dot(&(&self.gram * th));
                let rss = (self.yy[k] - 2.0 * th.dot(&self.rhs.column(k)) + fit).max(0.0);
                (rss, th.dot(&(penalty * th)))
            })
            .collect()
    }

    fn evaluate(
        &self,
        px: &DMatrix<f64>,
        ps: &DMatrix<f64>,
        n_aug: usize,
        lx: f64,
        ls: f64,
        criterion: Criterion,
    ) -> Result<(Option<f64>, f64)> {
        let penalty = assemble_penalty(px, ps, lx, ls, n_aug)?;
        let sol = solve_normal(&self.gram, &self.rhs, &penalty)?;
        let h = sol.solver.matrix();
        let edf: f64 = h.component_mul(&self.gram).sum();
        let n = self.n as f64;
        let parts = self.rss(&sol.theta, &penalty);
        let score = match criterion {
            Criterion::Gcv => {
                let denom = 1.0 - edf / n;
                if denom <= 1e-8 {
                    None
                } else {
                    Some(parts.iter().map(|p| p.0).sum::<f64>() / (denom * denom))
                }
            }
            Criterion::Reml => {
                let (pvals, _) = sym_eigen_desc(&penalty);
                let pmax = pvals.iter().cloned().fold(0.0_f64, f64::max);
                let tol = 1e-10 * pmax.max(f64::MIN_POSITIVE);
                let log_pdet_p: f64 = pvals.iter().filter(|&&v| v > tol).map(|v| v.ln()).sum();
                let null_p = pvals.iter().filter(|&&v| v <= tol).count();
                let null_a = sol.solver.dim() - sol.solver.rank();
                let mp = null_p.saturating_sub(null_a) as f64;
                let dof = n - mp;
                if dof <= 0.0 {
                    None
                } else {
                    let log_det_a = sol.solver.log_pdet();
                    let mut total = 0.0;
                    let mut ok = true;
                    for (rss, pen) in &parts {
                        let sigma2 = (rss + pen) / dof;
                        if !(sigma2 > 0.0) {
                            ok = false;
                            break;
                        }
                        total += -0.5
                            * (dof * (1.0 + (2.0 * std::f64::consts::PI * sigma2).ln()) + log_det_a
                                - log_pdet_p);
                    }
                    ok.then_some(total)
                }
            }
        };
        Ok((score, edf))
    }
}

/// Choose `(λx, λs)` on a log grid, optionally refined once around the best
/// candidate. Ties go to the lexicographically smallest pair.
pub fn select_lambda(
    design: &DesignMatrix,
    scores: &DMatrix<f64>,
    px: &DMatrix<f64>,
    ps: &DMatrix<f64>,
    criterion: Criterion,
    grid: &LambdaGrid,
) -> Result<LambdaSelection> {
    grid.validate()?;
    let cp = CrossProducts::new(design, scores);
    let x_free = px.amax() > 0.0;
    let values = grid.values();
    let xs: Vec<f64> = if x_free { values.clone() } else { vec![values[0]] };
    let better = |a: f64, b: f64| match criterion {
        Criterion::Gcv => a < b,
        Criterion::Reml => a > b,
    };
    let mut trace: Vec<LambdaTrial> = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    let consider = |lx: f64,
                    ls: f64,
                    refinement: bool,
                    trace: &mut Vec<LambdaTrial>,
                    best: &mut Option<(f64, f64, f64)>|
     -> Result<()> {
        if trace.iter().any(|t| (t.lambda_x, t.lambda_s) == (lx, ls)) {
            return Ok(());
        }
        let (score, edf) = cp.evaluate(px, ps, design.n_aug, lx, ls, criterion)?;
        trace.push(LambdaTrial {
            lambda_x: lx,
            lambda_s: ls,
            score,
            edf,
            refinement,
        });
        if let Some(sc) = score {
            let replace = match best {
                None => true,
                Some((bx, bs, bsc)) => better(sc, *bsc) || (sc == *bsc && (lx, ls) < (*bx, *bs)),
            };
            if replace {
                *best = Some((lx, ls, sc));
            }
        }
        Ok(())
    };
    for &lx in &xs {
        for &ls in &values {
            consider(lx, ls, false, &mut trace, &mut best)?;
        }
    }
    let Some((bx, bs, _)) = best else {
        return Err(Error::GcvDegenerate);
    };
    if grid.refine && grid.points > 1 {
        let step = grid.log_step();
        let offsets = [-0.5, -0.25, 0.0, 0.25, 0.5];
        let x_offsets: &[f64] = if x_free { &offsets } else { &[0.0] };
        for &dx in x_offsets {
            for &ds in &offsets {
                let lx = 10f64.powf(bx.log10() + dx * step).clamp(grid.lo, grid.hi);
                let ls = 10f64.powf(bs.log10() + ds * step).clamp(grid.lo, grid.hi);
                consider(lx, ls, true, &mut trace, &mut best)?;
            }
        }
    }
    let (lambda_x, lambda_s, _) = best.expect("grid search found a candidate");
    Ok(LambdaSelection {
        lambda_x,
        lambda_s,
        method: criterion.to_string(),
        trace,
    })
}

/// Penalized score-space objective `Σ_k |ξ_k − ZΘ_k|² + Θ_k' P Θ_k`.
pub fn score_objective(
    design: &DesignMatrix,
    scores: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
) -> f64 {
    let resid = scores - &design.rows * theta;
    let pen: f64 = (0..theta.ncols())
        .map(|k| theta.column(k).dot(&(penalty * theta.column(k))))
        .sum();
    resid.norm_squared() + pen
}

/// Penalized functional objective: integrated squared error of the
/// de-meaned curves (rows of `centered`, on `grid`, trapezoid rule) plus the
/// roughness of the fitted surface `F(x,s,t) = Σ_k φ_k(t) G_k(x,s)`, with the
/// second derivatives in x and s integrated by Gauss-Legendre quadrature
/// over the spline domains. Only the tensor (non-augmented) part of `theta`
/// enters the roughness.
#[allow(clippy::too_many_arguments)]
pub fn functional_objective(
    design: &DesignMatrix,
    centered: &DMatrix<f64>,
    grid: &[f64],
    phi: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    basis_x: &BSplineBasis,
    basis_s: &BSplineBasis,
    lambda_x: f64,
    lambda_s: f64,
) -> f64 {
    let w = trapezoid_weights(grid);
    let fitted = &design.rows * theta * phi.transpose(); // n x G
    let mut sse = 0.0;
    for i in 0..centered.nrows() {
        for g in 0..grid.len() {
            sse += w[g] * (centered[(i, g)] - fitted[(i, g)]).powi(2);
        }
    }
    // ∫ φ_k φ_k' dt on the grid
    let k = phi.ncols();
    let tgram = DMatrix::<f64>::from_fn(k, k, |a, b| (0..grid.len()).map(|g| w[g] * phi[(g, a)] * phi[(g, b)]).sum::<f64>());
    let (kx, ks) = (basis_x.n_basis(), basis_s.n_basis());
    let per_x = basis_x.degree() + 3;
    let per_s = basis_s.degree() + 3;
    let (xn, xw) = basis_x.span_quadrature(per_x);
    let (sn, sw) = basis_s.span_quadrature(per_s);
    let mut rough = 0.0;
    for (&x, &wx) in xn.iter().zip(&xw) {
        let bx = basis_x.values(x).expect("node in domain");
        let bxx = basis_x.derivative(x, 2).expect("node in domain");
        for (&s, &ws) in sn.iter().zip(&sw) {
            let bs = basis_s.values(s).expect("node in domain");
            let bss = basis_s.derivative(s, 2).expect("node in domain");
            let mut gxx = DVector::<f64>::zeros(k);
            let mut gss = DVector::<f64>::zeros(k);
            for l in 0..kx {
                for lp in 0..ks {
                    let c = design.column_index(l, lp);
                    for kk in 0..k {
                        gxx[kk] += bxx[l] * bs[lp] * theta[(c, kk)];
                        gss[kk] += bx[l] * bss[lp] * theta[(c, kk)];
                    }
                }
            }
            rough += wx * ws * (lambda_x * gxx.dot(&(&tgram * &gxx)) + lambda_s * gss.dot(&(&tgram * &gss)));
        }
    }
    sse + rough
}

/// Predicted curve and the design vector that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub t: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub z: DVector<f64>,
    /// Covariate values clamped into the training range.
    pub clamped: usize,
}

/// A fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffpcFit {
    pub format: String,
    pub version: u32,
    pub options: FitOptions,
    pub response: EigenBasis,
    pub response_design: Design,
    /// Covariance of the response scores (`ν`).
    pub score_cov: DMatrix<f64>,
    pub smoother: CovariateSmoother,
    pub transform: Option<CovariateTransform>,
    features: Features,
    pub scalar_names: Vec<String>,
    pub covariate_domain: Interval,
    pub response_domain: Interval,
    /// `M x K` coefficients, augmentation rows first.
    pub theta: DMatrix<f64>,
    pub lambda: LambdaSelection,
    /// `Σ z_i z_i'`.
    pub gram: DMatrix<f64>,
    /// `H_λ = (Σ z_i z_i' + P_λ)⁺`.
    pub solver: DMatrix<f64>,
    pub error_cov: ErrorCovariance,
    pub n_train: usize,
}

impl AffpcFit {
    pub fn kind(&self) -> ModelKind {
        self.features.kind
    }

    /// Number of response components.
    pub fn k(&self) -> usize {
        self.response.k()
    }

    pub fn n_aug(&self) -> usize {
        self.features.n_aug
    }

    pub fn basis_x(&self) -> Option<&BSplineBasis> {
        self.features.basis_x.as_ref()
    }

    pub fn basis_s(&self) -> &BSplineBasis {
        &self.features.basis_s
    }

    pub fn design_dim(&self) -> usize {
        self.features.dim()
    }

    /// Prepare a new covariate curve for [`AffpcFit::predict_prepared`].
    pub fn prepare(&self, curve: Curve, scalars: Option<Vec<f64>>) -> Result<PreparedCovariate> {
        let smooth = if self.smoother.needs_smooth() {
            Some(smooth_onto(&curve, self.smoother.grid().expect("smoothing grid"))?)
        } else {
            None
        };
        Ok(PreparedCovariate {
            curve,
            scalars,
            smooth,
        })
    }

    /// Design vector of a prepared covariate and the number of clamped values.
    pub fn design_row(&self, cov: &PreparedCovariate) -> Result<(DVector<f64>, usize)> {
        let processed = self.smoother.apply(cov)?;
        let (curve, clamped) = match &self.transform {
            Some(t) => t.apply(&processed),
            None => (processed, 0),
        };
        if clamped > 0 {
            log::warn!("{clamped} covariate value(s) outside the training range were clamped");
        }
        Ok((self.features.row(&curve, cov.scalars.as_deref())?, clamped))
    }

    /// `Σ_k φ_k(t) z'Θ_k` plus the mean, on `t`.
    pub fn curve_from_design(&self, z: &DVector<f64>, t: &[f64]) -> Vec<f64> {
        let g = self.theta.tr_mul(z); // K
        let phi = self.response.phi_matrix(t);
        let mean = self.response.mean_on(t);
        (0..t.len())
            .map(|i| mean[i] + (0..g.len()).map(|k| phi[(i, k)] * g[k]).sum::<f64>())
            .collect()
    }

    pub fn predict_prepared(&self, cov: &PreparedCovariate, t: &[f64]) -> Result<Prediction> {
        let (z, clamped) = self.design_row(cov)?;
        Ok(Prediction {
            t: t.to_vec(),
            y_hat: self.curve_from_design(&z, t),
            z,
            clamped,
        })
    }

    /// Predict the response curve for covariate curve `curve` on `t`.
    pub fn predict_curve(&self, curve: &Curve, scalars: Option<&[f64]>, t: &[f64]) -> Result<Prediction> {
        let prep = self.prepare(curve.clone(), scalars.map(<[f64]>::to_vec))?;
        self.predict_prepared(&prep, t)
    }

    /// Predictions for every subject of a dataset at its own response
    /// arguments (or at `t` when given).
    pub fn predict_dataset(&self, dataset: &FunctionalDataset, t: Option<&[f64]>) -> Result<Vec<Prediction>> {
        dataset
            .subjects()
            .iter()
            .map(|s| {
                let ts = t.unwrap_or(&s.t_grid);
                self.predict_curve(
                    &Curve::new(s.s_grid.clone(), s.x_values.clone()),
                    s.scalar_covariates.as_deref(),
                    ts,
                )
            })
            .collect()
    }

    /// `G_k(x, s)`; `x` on the standardized scale for the additive model.
    pub fn g_k(&self, k: usize, x: f64, s: f64) -> f64 {
        let bs = self.features.basis_s.values_clamped(s);
        let n_aug = self.features.n_aug;
        let ks = bs.len();
        match &self.features.basis_x {
            Some(bx) => {
                let bx = bx.values_clamped(x);
                let mut v = 0.0;
                for (l, a) in bx.iter().enumerate() {
                    for (lp, b) in bs.iter().enumerate() {
                        v += a * b * self.theta[(n_aug + l * ks + lp, k)];
                    }
                }
                v
            }
            None => x * bs.iter().enumerate().map(|(lp, b)| b * self.theta[(n_aug + lp, k)]).sum::<f64>(),
        }
    }

    /// Fitted surface `F(x, s, t) = Σ_k φ_k(t) G_k(x, s)`.
    pub fn evaluate_surface(&self, x: f64, s: f64, t: f64) -> f64 {
        self.response
            .phi_at(t)
            .iter()
            .enumerate()
            .map(|(k, p)| p * self.g_k(k, x, s))
            .sum()
    }

    /// Slope surface `β(s, t)` of the linear model.
    pub fn beta(&self, s: f64, t: f64) -> f64 {
        self.evaluate_surface(1.0, s, t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let format = value.get("format").and_then(|v| v.as_str());
        let version = value.get("version").and_then(|v| v.as_u64());
        if format != Some(MODEL_FORMAT) {
            return Err(Error::ModelCompatibility(format!(
                "expected format '{MODEL_FORMAT}', found {format:?}"
            )));
        }
        if version != Some(MODEL_VERSION as u64) {
            return Err(Error::ModelCompatibility(format!(
                "expected version {MODEL_VERSION}, found {version:?}"
            )));
        }
        serde_json::from_value(value).map_err(|e| Error::ModelCompatibility(e.to_string()))
    }
}

/// Fit the additive model (or the linear baseline, per `options.kind`).
pub fn fit(dataset: &FunctionalDataset, options: &FitOptions) -> Result<AffpcFit> {
    let data = TrainingData::new(dataset, options)?;
    fit_prepared(&data, options, true)
}

/// Fit the functional linear model baseline.
pub fn fit_flm(dataset: &FunctionalDataset, options: &FitOptions) -> Result<AffpcFit> {
    fit(dataset, &options.linear())
}

/// Fit on prepared data. The residual error covariance is estimated only
/// when `with_error_cov` is set.
pub fn fit_prepared(data: &TrainingData, options: &FitOptions, with_error_cov: bool) -> Result<AffpcFit> {
    options.validate()?;
    let n = data.len();
    let fpca = data.response.fit(options.pve)?;

    let smoother = match options.covariate_smoothing {
        CovariateSmoothing::None => CovariateSmoother::None,
        CovariateSmoothing::Curve => CovariateSmoother::Curve {
            grid: data.covariates.grid().to_vec(),
        },
        CovariateSmoothing::Fpca { pve } => CovariateSmoother::Fpca {
            grid: data.covariates.grid().to_vec(),
            fit: Box::new(data.covariates.fit(pve)?),
        },
    };
    let prepared: Vec<PreparedCovariate> = (0..n).map(|i| data.training_covariate(i)).collect();
    let processed: Vec<Curve> = prepared.iter().map(|c| smoother.apply(c)).collect::<Result<_>>()?;

    let n_scalars = data.scalar_names.len();
    let n_aug = if n_scalars > 0 || options.intercept || options.kind == ModelKind::Linear {
        1 + n_scalars
    } else {
        0
    };
    let basis_s = BSplineBasis::orthonormal(data.covariate_domain, options.ks, options.degree_s)?;
    let (transform, basis_x) = match options.kind {
        ModelKind::Additive => {
            let t = fit_transform(&processed, data.covariates.grid(), options.standardize)?;
            let bx = make_basis(t.clamp, options.kx, options.degree_x)?.orthonormalize()?;
            (Some(t), Some(bx))
        }
        ModelKind::Linear => (None, None),
    };
    let features = Features {
        kind: options.kind,
        basis_x,
        basis_s,
        n_aug,
        n_scalars,
    };
    let rows: Vec<DVector<f64>> = processed
        .iter()
        .zip(&prepared)
        .map(|(c, p)| {
            let curve = match &transform {
                Some(t) => t.apply(c).0,
                None => c.clone(),
            };
            features.row(&curve, p.scalars.as_deref())
        })
        .collect::<Result<_>>()?;
    let m = features.dim();
    let design = DesignMatrix {
        rows: DMatrix::from_fn(n, m, |i, j| rows[i][j]),
        n_aug,
        kx: features.kx(),
        ks: options.ks,
    };
    let scores = &fpca.scores.scores;
    let (px, ps) = features.penalties();
    let lambda = match options.lambda {
        LambdaSpec::Fixed { x, s } => LambdaSelection {
            lambda_x: x,
            lambda_s: s,
            method: "fixed".into(),
            trace: Vec::new(),
        },
        LambdaSpec::Search { criterion, grid } => select_lambda(&design, scores, &px, &ps, criterion, &grid)?,
    };
    let penalty = assemble_penalty(&px, &ps, lambda.lambda_x, lambda.lambda_s, n_aug)?;
    let sol = solve(&design, scores, &penalty)?;

    let mut fit = AffpcFit {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        options: options.clone(),
        response: fpca.basis.clone(),
        response_design: fpca.design,
        score_cov: fpca.scores.score_cov.clone(),
        smoother,
        transform,
        features,
        scalar_names: data.scalar_names.clone(),
        covariate_domain: data.covariate_domain,
        response_domain: data.response_domain,
        theta: sol.theta,
        lambda,
        gram: design.gram(),
        solver: sol.solver.matrix(),
        error_cov: ErrorCovariance::zero(data.response.grid().to_vec()),
        n_train: n,
    };
    if with_error_cov {
        let residuals: Vec<Curve> = data
            .response
            .curves()
            .iter()
            .zip(&rows)
            .map(|(c, z)| {
                let fitted = fit.curve_from_design(z, &c.grid);
                Curve::new(c.grid.clone(), c.values.iter().zip(&fitted).map(|(y, f)| y - f).collect())
            })
            .collect();
        fit.error_cov = decompose_curves(&residuals, data.response.grid())?;
    }
    Ok(fit)
}

/// Design matrix of the training subjects under a fitted model.
pub fn build_design(fit: &AffpcFit, dataset: &FunctionalDataset) -> Result<DesignMatrix> {
    let rows: Vec<DVector<f64>> = dataset
        .subjects()
        .iter()
        .map(|s| {
            let prep = fit.prepare(
                Curve::new(s.s_grid.clone(), s.x_values.clone()),
                s.scalar_covariates.clone(),
            )?;
            Ok(fit.design_row(&prep)?.0)
        })
        .collect::<Result<_>>()?;
    let m = fit.design_dim();
    DesignMatrix::new(
        DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]),
        fit.n_aug(),
        fit.features.kx(),
        fit.basis_s().n_basis(),
    )
}
