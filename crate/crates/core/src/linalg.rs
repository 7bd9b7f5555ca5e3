//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue cutoff, per unit of dimension, below which a direction
/// of a PSD system is treated as unidentified: an eigenvalue counts when it
/// exceeds `dim * RANK_EPS * max`.
pub const RANK_EPS: f64 = f64::EPSILON;

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            // p1 = P_n(x), p0 = P_{n-1}(x)
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric inverse square root of a positive definite matrix.
/// Returns the smallest eigenvalue on failure.
pub fn inv_sqrt_spd(m: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>, f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let n = vals.len();
    let max = vals.iter().cloned().fold(0.0_f64, f64::max);
    let min = vals[n - 1];
    if !(min > rcond * max) {
        return Err(min);
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| vecs[(i, j)] / vals[j].sqrt());
    Ok(&scaled * vecs.transpose())
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix, kept
/// in factored form so that many right-hand sides share one decomposition.
#[derive(Debug, Clone)]
pub struct PsdInverse {
    vectors: DMatrix<f64>,
    inv_values: DVector<f64>,
    values: DVector<f64>,
    rank: usize,
}

impl PsdInverse {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let (values, vectors) = sym_eigen_desc(m);
        let max = values.iter().cloned().fold(0.0_f64, f64::max);
        let cutoff = values.len() as f64 * RANK_EPS * max;
        let mut rank = 0;
        let inv_values = values.map(|v| {
            if max > 0.0 && v > cutoff {
                rank += 1;
                1.0 / v
            } else {
                0.0
            }
        });
        Self {
            vectors,
            inv_values,
            values,
            rank,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.values
    }

    /// Sum of log eigenvalues over the identified directions.
    pub fn log_pdet(&self) -> f64 {
        self.values
            .iter()
            .zip(self.inv_values.iter())
            .filter(|(_, &inv)| inv > 0.0)
            .map(|(v, _)| v.ln())
            .sum()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let proj = self.vectors.tr_mul(rhs);
        let scaled = proj.component_mul(&self.inv_values);
        &self.vectors * scaled
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut proj = self.vectors.tr_mul(rhs);
        for (i, mut row) in proj.row_iter_mut().enumerate() {
            row *= self.inv_values[i];
        }
        &self.vectors * proj
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let scaled = DMatrix::from_fn(n, n, |i, j| self.vectors[(i, j)] * self.inv_values[j]);
        &scaled * self.vectors.transpose()
    }
}

/// Piecewise-linear interpolation of `values` tabulated on increasing `grid`;
/// constant extrapolation beyond the ends.
pub fn interp_linear(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    debug_assert_eq!(n, values.len());
    if n == 1 || x <= grid[0] {
        return values[0];
    }
    if x >= grid[n - 1] {
        return values[n - 1];
    }
    let j = grid.partition_point(|&g| g <= x);
    let (g0, g1) = (grid[j - 1], grid[j]);
    let w = (x - g0) / (g1 - g0);
    values[j - 1] * (1.0 - w) + values[j] * w
}
