//! Clamped B-spline bases on an interval, their orthonormalization in L², and
//! second-derivative roughness penalties.
//!
//! A basis is always built from equally spaced interior knots. The raw
//! B-splines form a partition of unity; [`BSplineBasis::orthonormalize`]
//! replaces them by `T^T b(u)` where `T = G^{-1/2}` and `G` is the Gram matrix
//! of the raw functions, so every evaluation returns `b(u)^T T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::Interval;
use crate::linalg::{gauss_legendre, inv_sqrt_spd};

/// Slack allowed when deciding whether a point lies in the domain.
const DOMAIN_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    domain: Interval,
    degree: usize,
    n_basis: usize,
    knots: Vec<f64>,
    orthonormalized: bool,
    transform: DMatrix<f64>,
}

/// Symmetric positive semidefinite roughness penalty on basis coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    pub matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Quadratic form `c' P c`.
    pub fn quadratic_form(&self, coef: &DVector<f64>) -> f64 {
        coef.dot(&(&self.matrix * coef))
    }
}

/// Build a raw (not yet orthonormalized) clamped B-spline basis with
/// `n_basis` functions of the given degree and equally spaced interior knots.
pub fn make_basis(domain: Interval, n_basis: usize, degree: usize) -> Result<BSplineBasis> {
    if n_basis < degree + 1 {
        return Err(Error::InvalidBasisSize { n_basis, degree });
    }
    if !(domain.hi > domain.lo) || !domain.lo.is_finite() || !domain.hi.is_finite() {
        return Err(Error::InvalidGrid(format!(
            "degenerate basis domain [{}, {}]",
            domain.lo, domain.hi
        )));
    }
    let n_interior = n_basis - degree - 1;
    let mut knots = Vec::with_capacity(n_basis + degree + 1);
    knots.extend(std::iter::repeat_n(domain.lo, degree + 1));
    let width = domain.hi - domain.lo;
    for j in 1..=n_interior {
        knots.push(domain.lo + width * j as f64 / (n_interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(domain.hi, degree + 1));
    Ok(BSplineBasis {
        domain,
        degree,
        n_basis,
        knots,
        orthonormalized: false,
        transform: DMatrix::identity(n_basis, n_basis),
    })
}

impl BSplineBasis {
    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn is_orthonormalized(&self) -> bool {
        self.orthonormalized
    }

    /// Matrix `T` mapping raw B-spline values to the current system: row
    /// vector `b(u)' T`.
    pub fn transform_matrix(&self) -> &DMatrix<f64> {
        &self.transform
    }

    /// Distinct knot values, i.e. the breakpoints of the piecewise polynomials.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for &k in &self.knots {
            if out.last().is_none_or(|&last| k > last) {
                out.push(k);
            }
        }
        out
    }

    fn check_domain(&self, u: f64) -> Result<f64> {
        let slack = DOMAIN_SLACK * (self.domain.hi - self.domain.lo);
        if !(u >= self.domain.lo - slack && u <= self.domain.hi + slack) {
            return Err(Error::OutOfDomain {
                point: u,
                lo: self.domain.lo,
                hi: self.domain.hi,
            });
        }
        Ok(u.clamp(self.domain.lo, self.domain.hi))
    }

    /// Index `i` of the knot span `[knots[i], knots[i+1])` holding `u`.
    fn span(&self, u: f64) -> usize {
        let p = self.degree;
        let n = self.n_basis;
        if u >= self.knots[n] {
            return n - 1;
        }
        // knots[p..=n] are the breakpoints; find last index with knots[i] <= u
        let slice = &self.knots[p..=n];
        let pos = slice.partition_point(|&k| k <= u);
        (p + pos - 1).min(n - 1)
    }

    /// Nonzero raw basis functions and their derivatives up to `n_deriv`
    /// at `u`. Returns the span index and a `(n_deriv+1) x (degree+1)` table.
    fn local_derivs(&self, u: f64, n_deriv: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree;
        let span = self.span(u);
        let k = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = u - k[span + 1 - j];
            right[j] = k[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; n_deriv + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for kd in 1..=n_deriv.min(p) {
                let mut d = 0.0;
                let rk = r as isize - kd as isize;
                let pk = p as isize - kd as isize;
                if r >= kd {
                    a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk as usize];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk { kd - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[(pk + 1) as usize][idx];
                    d += a[s2][j] * ndu[idx][pk as usize];
                }
                if r as isize <= pk {
                    a[s2][kd] = -a[s1][kd - 1] / ndu[(pk + 1) as usize][r];
                    d += a[s2][kd] * ndu[r][pk as usize];
                }
                ders[kd][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        // scale row k by p!/(p-k)!
        let mut factor = 1.0;
        for (kd, row) in ders.iter_mut().enumerate().skip(1) {
            if kd > p {
                break;
            }
            factor *= (p + 1 - kd) as f64;
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
        (span, ders)
    }

    /// Raw (untransformed) B-spline values at `u`, all `n_basis` entries.
    pub fn raw_values(&self, u: f64) -> Result<Vec<f64>> {
        self.raw_derivative(u, 0)
    }

    /// `order`-th derivative of every raw B-spline at `u`.
    pub fn raw_derivative(&self, u: f64, order: usize) -> Result<Vec<f64>> {
        let u = self.check_domain(u)?;
        let (span, ders) = self.local_derivs(u, order);
        let mut out = vec![0.0; self.n_basis];
        let first = span - self.degree;
        for (j, v) in ders[order].iter().enumerate() {
            out[first + j] = *v;
        }
        Ok(out)
    }

    /// Values of the current system (raw or orthonormalized) at `u`.
    pub fn values(&self, u: f64) -> Result<Vec<f64>> {
        self.derivative(u, 0)
    }

    /// `order`-th derivative of the current system at `u`.
    pub fn derivative(&self, u: f64, order: usize) -> Result<Vec<f64>> {
        let u = self.check_domain(u)?;
        let (span, ders) = self.local_derivs(u, order);
        Ok(self.apply_transform(span, &ders[order]))
    }

    /// Values at `u`, clamping `u` into the domain instead of failing.
    pub fn values_clamped(&self, u: f64) -> Vec<f64> {
        let u = u.clamp(self.domain.lo, self.domain.hi);
        let (span, ders) = self.local_derivs(u, 0);
        self.apply_transform(span, &ders[0])
    }

    fn apply_transform(&self, span: usize, local: &[f64]) -> Vec<f64> {
        let first = span - self.degree;
        if !self.orthonormalized {
            let mut out = vec![0.0; self.n_basis];
            out[first..first + local.len()].copy_from_slice(local);
            return out;
        }
        let mut out = vec![0.0; self.n_basis];
        for (j, &b) in local.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            let row = self.transform.row(first + j);
            for (o, t) in out.iter_mut().zip(row.iter()) {
                *o += b * t;
            }
        }
        out
    }

    /// Evaluation matrix with one row per point.
    pub fn evaluate(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(points.len(), self.n_basis);
        for (i, &u) in points.iter().enumerate() {
            let row = self.values(u)?;
            for (j, v) in row.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    /// Gauss-Legendre rule with `per_span` nodes on every knot span.
    pub fn span_quadrature(&self, per_span: usize) -> (Vec<f64>, Vec<f64>) {
        let (gx, gw) = gauss_legendre(per_span);
        let bp = self.breakpoints();
        let mut nodes = Vec::with_capacity((bp.len() - 1) * per_span);
        let mut weights = Vec::with_capacity(nodes.capacity());
        for w in bp.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, wt) in gx.iter().zip(&gw) {
                nodes.push(mid + half * x);
                weights.push(half * wt);
            }
        }
        (nodes, weights)
    }

    /// Gram matrix `∫ B_l B_m` of the current system, integrated exactly
    /// span by span.
    pub fn gram(&self) -> DMatrix<f64> {
        self.derivative_gram(0)
    }

    fn derivative_gram(&self, order: usize) -> DMatrix<f64> {
        let k = self.n_basis;
        let mut g = DMatrix::zeros(k, k);
        let (nodes, weights) = self.span_quadrature(self.degree + 1);
        for (u, w) in nodes.iter().zip(&weights) {
            let row = self
                .derivative(*u, order)
                .expect("quadrature nodes lie inside the domain");
            for a in 0..k {
                if row[a] == 0.0 {
                    continue;
                }
                let wa = w * row[a];
                for b in 0..k {
                    g[(a, b)] += wa * row[b];
                }
            }
        }
        (&g + g.transpose()) * 0.5
    }

    /// Orthonormalize the current system with the symmetric inverse square
    /// root of its Gram matrix.
    pub fn orthonormalize(&self) -> Result<BSplineBasis> {
        let gram = self.gram();
        let inv_sqrt = inv_sqrt_spd(&gram, 1e-13).map_err(Error::SingularGram)?;
        Ok(BSplineBasis {
            transform: &self.transform * inv_sqrt,
            orthonormalized: true,
            ..self.clone()
        })
    }

    /// Build an orthonormalized basis in one step.
    pub fn orthonormal(domain: Interval, n_basis: usize, degree: usize) -> Result<BSplineBasis> {
        make_basis(domain, n_basis, degree)?.orthonormalize()
    }

    /// Penalty `∫ B_l'' B_m''` for the current system. Computed for the raw
    /// B-splines and conjugated by the transform.
    pub fn second_derivative_penalty(&self) -> PenaltyMatrix {
        if self.degree < 2 {
            log::warn!(
                "degree-{} basis has vanishing second derivative; penalty is zero",
                self.degree
            );
            return PenaltyMatrix {
                matrix: DMatrix::zeros(self.n_basis, self.n_basis),
            };
        }
        let raw = BSplineBasis {
            orthonormalized: false,
            transform: DMatrix::identity(self.n_basis, self.n_basis),
            ..self.clone()
        };
        let p_raw = raw.derivative_gram(2);
        let m = self.transform.transpose() * p_raw * &self.transform;
        PenaltyMatrix {
            matrix: (&m + m.transpose()) * 0.5,
        }
    }

    /// Coefficients (in the current system) of the L² projection of `f` onto
    /// the span of the basis.
    pub fn project<F: Fn(f64) -> f64>(&self, f: F) -> DVector<f64> {
        let k = self.n_basis;
        let (nodes, weights) = self.span_quadrature(self.degree + 6);
        let mut rhs = DVector::zeros(k);
        for (u, w) in nodes.iter().zip(&weights) {
            let row = self.values(*u).expect("node in domain");
            let fu = f(*u);
            for a in 0..k {
                rhs[a] += w * fu * row[a];
            }
        }
        let gram = self.gram();
        gram.cholesky()
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| crate::linalg::PsdInverse::new(&self.gram()).solve(&rhs))
    }

    /// Evaluate the function with coefficients `coef` at `u`.
    pub fn eval_function(&self, coef: &DVector<f64>, u: f64) -> Result<f64> {
        let row = self.values(u)?;
        Ok(row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0)
    }

    fn fine_gram(b: &BSplineBasis, m: usize) -> DMatrix<f64> {
        // independent check: composite Simpson on a uniform grid
        let k = b.n_basis();
        let mut g = DMatrix::zeros(k, k);
        let d = b.domain();
        let h = (d.hi - d.lo) / m as f64;
        for i in 0..=m {
            let w = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            } * h
                / 3.0;
            let row = b.values(d.lo + i as f64 * h).unwrap();
            for a in 0..k {
                for c in 0..k {
                    g[(a, c)] += w * row[a] * row[c];
                }
            }
        }
        g
    }

    #[test]
    fn partition_of_unity_for_cubic_k7() {
        let b = make_basis(unit(), 7, 3).unwrap();
        let s: f64 = b.raw_values(0.37).unwrap().iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        assert_eq!(b.raw_values(0.37).unwrap().len(), 7);
    }

    #[test]
    fn linear_pair_is_hat_functions() {
        let b = make_basis(unit(), 2, 1).unwrap();
        for &u in &[0.0, 0.25, 0.6, 1.0] {
            let v = b.raw_values(u).unwrap();
            assert_abs_diff_eq!(v[0], 1.0 - u, epsilon = 1e-14);
            assert_abs_diff_eq!(v[1], u, epsilon = 1e-14);
        }
        let g = b.gram();
        assert_abs_diff_eq!(g[(0, 0)], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g[(0, 1)], 1.0 / 6.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g[(1, 1)], 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_small_basis_and_out_of_domain() {
        assert!(matches!(
            make_basis(unit(), 3, 3),
            Err(Error::InvalidBasisSize { .. })
        ));
        let b = make_basis(unit(), 7, 3).unwrap();
        assert!(matches!(b.values(1.5), Err(Error::OutOfDomain { .. })));
        assert!(matches!(b.evaluate(&[-0.1]), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn orthonormal_cubic_gram_is_identity_by_fine_quadrature() {
        let b = BSplineBasis::orthonormal(unit(), 7, 3).unwrap();
        let g = fine_gram(&b, 10_000);
        assert_abs_diff_eq!((g - DMatrix::identity(7, 7)).amax(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn orthonormalizing_twice_is_idempotent() {
        let b = BSplineBasis::orthonormal(unit(), 7, 3).unwrap();
        let again = b.orthonormalize().unwrap();
        let incremental = b.transform_matrix().clone().try_inverse().unwrap() * again.transform_matrix();
        assert_abs_diff_eq!((incremental - DMatrix::identity(7, 7)).amax(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn single_point_evaluation_shape() {
        let b = BSplineBasis::orthonormal(unit(), 7, 3).unwrap();
        assert_eq!(b.evaluate(&[0.5]).unwrap().shape(), (1, 7));
    }

    #[test]
    fn raw_cubic_is_continuous_at_knots() {
        let b = make_basis(unit(), 9, 3).unwrap();
        for &k in &b.breakpoints()[1..b.breakpoints().len() - 1] {
            let l = b.raw_values(k - 1e-12).unwrap();
            let r = b.raw_values(k).unwrap();
            for (a, c) in l.iter().zip(&r) {
                assert_abs_diff_eq!(a, c, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn degree_one_penalty_is_zero() {
        let b = make_basis(unit(), 4, 1).unwrap();
        assert_eq!(b.second_derivative_penalty().matrix.amax(), 0.0);
    }

    #[test]
    fn penalty_null_space_and_curvature() {
        for ortho in [false, true] {
            let mut b = make_basis(unit(), 7, 3).unwrap();
            if ortho {
                b = b.orthonormalize().unwrap();
            }
            let p = b.second_derivative_penalty();
            let lin = b.project(|u| 2.0 - 3.0 * u);
            assert_abs_diff_eq!(p.quadratic_form(&lin), 0.0, epsilon = 1e-10);
            let sq = b.project(|u| u * u);
            assert_abs_diff_eq!(p.quadratic_form(&sq), 4.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn orthonormal_penalty_is_conjugated_raw_penalty() {
        let raw = make_basis(Interval::new(-2.0, 3.0), 8, 3).unwrap();
        let ortho = raw.orthonormalize().unwrap();
        let t = ortho.transform_matrix();
        let conj = t.transpose() * raw.second_derivative_penalty().matrix * t;
        let diff = conj - ortho.second_derivative_penalty().matrix;
        assert!(diff.amax() < 1e-8 * (1.0 + raw.second_derivative_penalty().matrix.amax()));
    }

    #[test]
    fn penalty_is_psd() {
        let b = BSplineBasis::orthonormal(unit(), 10, 3).unwrap();
        let p = b.second_derivative_penalty().matrix;
        let min = crate::linalg::sym_eigen_desc(&p).0.min();
        assert!(min > -1e-10 * p.amax());
    }

    proptest! {
        #[test]
        fn penalty_matches_fine_quadrature_of_curvature(
            coef in proptest::collection::vec(-2.0f64..2.0, 7),
            ortho in any::<bool>(),
        ) {
            let mut b = make_basis(unit(), 7, 3).unwrap();
            if ortho { b = b.orthonormalize().unwrap(); }
            let c = DVector::from_vec(coef);
            let quad = b.second_derivative_penalty().quadratic_form(&c);
            // midpoint rule on a fine grid of the second derivative
            let m = 20_000;
            let h = 1.0 / m as f64;
            let mut fine = 0.0;
            for i in 0..m {
                let u = (i as f64 + 0.5) * h;
                let d2: f64 = b.derivative(u, 2).unwrap().iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                fine += h * d2 * d2;
            }
            prop_assert!((quad - fine).abs() <= 1e-6 * (1.0 + fine.abs()));
        }

        #[test]
        fn orthonormalization_preserves_span(coef in proptest::collection::vec(-3.0f64..3.0, 7)) {
            let raw = make_basis(unit(), 7, 3).unwrap();
            let ortho = raw.orthonormalize().unwrap();
            let c = DVector::from_vec(coef);
            let f = |u: f64| raw.eval_function(&c, u).unwrap();
            let d = ortho.project(f);
            for i in 0..=50 {
                let u = i as f64 / 50.0;
                let a = raw.eval_function(&c, u).unwrap();
                let b = ortho.eval_function(&d, u).unwrap();
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn raw_partition_of_unity(u in 0.0f64..=1.0, k in 4usize..12) {
            let b = make_basis(unit(), k, 3).unwrap();
            let s: f64 = b.raw_values(u).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(b.raw_values(u).unwrap().iter().all(|&v| v >= -1e-15));
        }
    }
}
