//! Shared numerical machinery: smooth-map abstraction, finite differences,
//! sorted singular value decompositions and a damped Newton solver.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EPS: f64 = f64::EPSILON;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-7;

/// Step for first-order central differences at `x`.
pub fn fd_step(x: &DVector<f64>) -> f64 {
    EPS.cbrt() * (1.0 + x.norm())
}

/// Step for second-order central differences of values at `x`.
pub fn fd_step2(x: &DVector<f64>) -> f64 {
    EPS.powf(0.25) * (1.0 + x.norm())
}

/// A smooth map `R^n -> R^k` with (optionally analytic) derivatives.
pub trait SmoothMap: Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        central_jacobian(self, x, fd_step(x))
    }

    /// Whether `jacobian` is exact rather than a difference quotient.
    fn has_analytic_jacobian(&self) -> bool {
        false
    }

    /// Second derivative: one symmetric `n x n` matrix per output component.
    fn hessian(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        let h = if self.has_analytic_jacobian() {
            fd_step(x)
        } else {
            fd_step2(x)
        };
        hessian_with_step(self, x, h)
    }
}

impl<T: SmoothMap + ?Sized> SmoothMap for &T {
    fn dim_in(&self) -> usize {
        (**self).dim_in()
    }
    fn dim_out(&self) -> usize {
        (**self).dim_out()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).eval(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(x)
    }
    fn has_analytic_jacobian(&self) -> bool {
        (**self).has_analytic_jacobian()
    }
    fn hessian(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        (**self).hessian(x)
    }
}

type ValueFn<'a> = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'a>;
type JacobianFn<'a> = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'a>;

/// Closure-backed [`SmoothMap`].
pub struct FnMap<'a> {
    n_in: usize,
    n_out: usize,
    f: ValueFn<'a>,
    jac: Option<JacobianFn<'a>>,
}

impl<'a> FnMap<'a> {
    pub fn new(
        n_in: usize,
        n_out: usize,
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'a,
    ) -> Self {
        Self {
            n_in,
            n_out,
            f: Box::new(f),
            jac: None,
        }
    }

    /// Square map `R^n -> R^n`.
    pub fn square(n: usize, f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'a) -> Self {
        Self::new(n, n, f)
    }

    /// Scalar map `R -> R` given on plain floats.
    pub fn scalar(f: impl Fn(f64) -> f64 + Send + Sync + 'a) -> Self {
        Self::new(1, 1, move |x| DVector::from_element(1, f(x[0])))
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'a,
    ) -> Self {
        self.jac = Some(Box::new(jac));
        self
    }

    pub fn with_derivative(self, df: impl Fn(f64) -> f64 + Send + Sync + 'a) -> Self {
        self.with_jacobian(move |x| DMatrix::from_element(1, 1, df(x[0])))
    }
}

impl SmoothMap for FnMap<'_> {
    fn dim_in(&self) -> usize {
        self.n_in
    }
    fn dim_out(&self) -> usize {
        self.n_out
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.f)(x))
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.jac {
            Some(j) => Ok(j(x)),
            None => central_jacobian(self, x, fd_step(x)),
        }
    }
    fn has_analytic_jacobian(&self) -> bool {
        self.jac.is_some()
    }
}

/// Map `x -> c * f(x)`.
pub struct Scaled<M> {
    pub inner: M,
    pub factor: f64,
}

impl<M: SmoothMap> SmoothMap for Scaled<M> {
    fn dim_in(&self) -> usize {
        self.inner.dim_in()
    }
    fn dim_out(&self) -> usize {
        self.inner.dim_out()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inner.eval(x)? * self.factor)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.inner.jacobian(x)? * self.factor)
    }
    fn has_analytic_jacobian(&self) -> bool {
        self.inner.has_analytic_jacobian()
    }
    fn hessian(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        Ok(self
            .inner
            .hessian(x)?
            .into_iter()
            .map(|h| h * self.factor)
            .collect())
    }
}

fn checked_step(xi: f64, h: f64) -> Result<(f64, f64)> {
    if !xi.is_finite() || !h.is_finite() {
        return Err(Error::StepUnderflow { step: h });
    }
    let up = xi + h;
    let down = xi - h;
    let eff = 0.5 * (up - down);
    if eff < 1e2 * EPS {
        return Err(Error::StepUnderflow { step: eff });
    }
    Ok((up, down))
}

pub fn central_jacobian<M: SmoothMap + ?Sized>(
    f: &M,
    x: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(f.dim_out(), n);
    for j in 0..n {
        let (up, down) = checked_step(x[j], h)?;
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] = up;
        xm[j] = down;
        let col = (f.eval(&xp)? - f.eval(&xm)?) / (up - down);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Full second-derivative tensor with an explicit step.
///
/// Differences the Jacobian when it is analytic, otherwise uses second
/// differences of values. The result is symmetrized.
pub fn hessian_with_step<M: SmoothMap + ?Sized>(
    f: &M,
    x: &DVector<f64>,
    h: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let n = x.len();
    let k = f.dim_out();
    let mut out = vec![DMatrix::zeros(n, n); k];
    if f.has_analytic_jacobian() {
        for b in 0..n {
            let (up, down) = checked_step(x[b], h)?;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[b] = up;
            xm[b] = down;
            let dj = (f.jacobian(&xp)? - f.jacobian(&xm)?) / (up - down);
            for (i, hi) in out.iter_mut().enumerate() {
                for a in 0..n {
                    hi[(a, b)] = dj[(i, a)];
                }
            }
        }
    } else {
        let f0 = f.eval(x)?;
        for a in 0..n {
            for b in a..n {
                let val = if a == b {
                    let (up, down) = checked_step(x[a], h)?;
                    let ha = 0.5 * (up - down);
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] = up;
                    xm[a] = down;
                    (f.eval(&xp)? - &f0 * 2.0 + f.eval(&xm)?) / (ha * ha)
                } else {
                    let (ua, da) = checked_step(x[a], h)?;
                    let (ub, db) = checked_step(x[b], h)?;
                    let corner = |sa: f64, sb: f64| -> Result<DVector<f64>> {
                        let mut y = x.clone();
                        y[a] = sa;
                        y[b] = sb;
                        f.eval(&y)
                    };
                    (corner(ua, ub)? - corner(ua, db)? - corner(da, ub)? + corner(da, db)?)
                        / ((ua - da) * (ub - db))
                };
                for (i, hi) in out.iter_mut().enumerate() {
                    hi[(a, b)] = val[i];
                    hi[(b, a)] = val[i];
                }
            }
        }
    }
    for hi in out.iter_mut() {
        let sym = (&*hi + hi.transpose()) * 0.5;
        *hi = sym;
    }
    Ok(out)
}

/// Bilinear evaluation `D²f[a, b]` from a Hessian tensor.
pub fn contract(hessian: &[DMatrix<f64>], a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(hessian.len(), hessian.iter().map(|h| a.dot(&(h * b))))
}

/// Frobenius norm of a Hessian tensor.
pub fn tensor_norm(hessian: &[DMatrix<f64>]) -> f64 {
    hessian.iter().map(|h| h.norm_squared()).sum::<f64>().sqrt()
}

/// Singular value decomposition with descending singular values and full
/// square factors (the matrix is zero-padded to `max(rows, cols)`).
#[derive(Debug, Clone)]
pub struct FullSvd {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl FullSvd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (rows, cols) = a.shape();
        let n = rows.max(cols).max(1);
        let mut padded = DMatrix::zeros(n, n);
        padded.view_mut((0, 0), (rows, cols)).copy_from(a);
        let svd = padded.svd(true, true);
        let u = svd.u.expect("u requested");
        let v = svd.v_t.expect("v requested").transpose();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let mut su = DMatrix::zeros(n, n);
        let mut sv = DMatrix::zeros(n, n);
        let mut sigma = Vec::with_capacity(n);
        for (dst, &src) in order.iter().enumerate() {
            su.set_column(dst, &u.column(src));
            sv.set_column(dst, &v.column(src));
            sigma.push(svd.singular_values[src]);
        }
        Self {
            u: su,
            sigma,
            v: sv,
            rows,
            cols,
        }
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    /// Singular values of the unpadded matrix.
    pub fn values(&self) -> &[f64] {
        &self.sigma[..self.rows.min(self.cols)]
    }

    pub fn rank(&self, abs_tol: f64) -> usize {
        self.values().iter().filter(|&&s| s > abs_tol).count()
    }

    /// Orthonormal basis of the kernel, given the numerical rank.
    pub fn kernel(&self, rank: usize) -> DMatrix<f64> {
        let cols = self.cols;
        let dim = cols - rank;
        let mut k = DMatrix::zeros(cols, dim);
        for j in 0..dim {
            k.set_column(j, &self.v.column(rank + j).rows(0, cols));
        }
        k
    }

    /// Orthonormal basis of a complement of the image (left kernel).
    pub fn cokernel(&self, rank: usize) -> DMatrix<f64> {
        let rows = self.rows;
        let dim = rows - rank;
        let mut c = DMatrix::zeros(rows, dim);
        for j in 0..dim {
            c.set_column(j, &self.u.column(rank + j).rows(0, rows));
        }
        c
    }
}

/// Singular values of a small matrix in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    FullSvd::new(a).values().to_vec()
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Convergence threshold on the max-norm of the residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Keep iterating past `tol` while the residual keeps decreasing.
    pub polish: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// A Tikhonov-damped step was taken at some iterate.
    pub damped: bool,
}

/// Newton step `J⁻¹ F`, Tikhonov-damped with `1e-8 ‖J‖` when `J` is near singular.
pub fn newton_step(jac: &DMatrix<f64>, value: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularJacobian);
    }
    let svd = FullSvd::new(jac);
    let smax = svd.sigma_max();
    if smax == 0.0 {
        return Err(Error::SingularJacobian);
    }
    let square = jac.nrows() == jac.ncols();
    let damped = square && svd.values().last().copied().unwrap_or(0.0) <= 1e-12 * smax;
    let mu = if damped { 1e-8 * smax } else { 0.0 };
    let n = svd.sigma.len();
    let mut padded_value = DVector::zeros(n);
    padded_value.rows_mut(0, value.len()).copy_from(value);
    let coeffs = svd.u.transpose() * padded_value;
    let mut step = DVector::zeros(n);
    for (i, &s) in svd.sigma.iter().enumerate() {
        if s > 0.0 && (square || s > 1e-12 * smax) {
            let w = s / (s * s + mu * mu);
            step += svd.v.column(i) * (coeffs[i] * w);
        }
    }
    Ok((step.rows(0, jac.ncols()).into_owned(), damped))
}

/// Damped Newton iteration for a square system.
///
/// `system` returns the residual and its Jacobian; iterates are pulled back
/// by halving until `in_domain` accepts them.
pub fn newton<F, D>(system: F, x0: &DVector<f64>, opts: NewtonOptions, in_domain: D) -> Result<NewtonOutcome>
where
    F: Fn(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
    D: Fn(&DVector<f64>) -> bool,
{
    let mut x = x0.clone();
    let (mut value, mut jac) = system(&x)?;
    let mut residual = max_abs(&value);
    let mut damped = false;
    let mut polishing = 0;
    for iter in 0..opts.max_iter {
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            if !opts.polish || residual == 0.0 || polishing >= 60 {
                return Ok(NewtonOutcome {
                    x,
                    residual,
                    iterations: iter,
                    damped,
                });
            }
            polishing += 1;
        }
        let (step, was_damped) = match newton_step(&jac, &value) {
            Ok(s) => s,
            Err(e) if residual <= opts.tol => {
                let _ = e;
                break;
            }
            Err(e) => return Err(e),
        };
        damped |= was_damped;
        let step_norm = step.norm();
        if residual <= opts.tol && step_norm <= 4.0 * EPS * (1.0 + x.norm()) {
            break;
        }
        let mut lambda = 1.0;
        let mut candidate = &x - &step * lambda;
        let mut halvings = 0;
        while !in_domain(&candidate) {
            lambda *= 0.5;
            halvings += 1;
            if halvings > 40 {
                return Err(Error::NoConvergence {
                    iterations: iter,
                    residual,
                });
            }
            candidate = &x - &step * lambda;
        }
        let next = match system(&candidate) {
            Ok(v) => v,
            Err(e) if residual <= opts.tol => {
                let _ = e;
                break;
            }
            Err(e) => return Err(e),
        };
        let next_residual = max_abs(&next.0);
        if residual <= opts.tol && !(next_residual < residual) {
            break;
        }
        x = candidate;
        value = next.0;
        jac = next.1;
        residual = next_residual;
    }
    if residual <= opts.tol {
        Ok(NewtonOutcome {
            x,
            residual,
            iterations: opts.max_iter,
            damped,
        })
    } else {
        Err(Error::NoConvergence {
            iterations: opts.max_iter,
            residual,
        })
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidInput(format!("invalid box {lo:?} .. {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// Same bounds on every axis.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Cube of half-width `radius` centred at `center`.
    pub fn around(center: &DVector<f64>, radius: f64) -> Result<Self> {
        Self::new(
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
        )
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(x, (a, b))| *a <= *x && *x <= *b)
    }

    pub fn grid(&self, density: usize) -> Vec<DVector<f64>> {
        grid_points(&self.lo, &self.hi, density)
    }

    /// Grid points lying on a face of the box.
    pub fn boundary_grid(&self, density: usize) -> Vec<DVector<f64>> {
        let density = density.max(2);
        self.grid(density)
            .into_iter()
            .filter(|p| {
                p.iter()
                    .zip(self.lo.iter().zip(&self.hi))
                    .any(|(x, (a, b))| x == a || x == b)
            })
            .collect()
    }
}

/// Uniform tensor grid with `density` points per axis (endpoints included).
pub fn grid_points(lo: &[f64], hi: &[f64], density: usize) -> Vec<DVector<f64>> {
    let dim = lo.len();
    let density = density.max(1);
    let axis = |d: usize, i: usize| {
        if density == 1 {
            0.5 * (lo[d] + hi[d])
        } else if i + 1 == density {
            hi[d]
        } else {
            lo[d] + (hi[d] - lo[d]) * i as f64 / (density - 1) as f64
        }
    };
    let total = density.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = DVector::zeros(dim);
            for d in 0..dim {
                p[d] = axis(d, idx % density);
                idx /= density;
            }
            p
        })
        .collect()
}

/// A root found by multi-start search.
#[derive(Debug, Clone)]
pub struct Root {
    pub x: DVector<f64>,
    pub residual: f64,
    /// Number of starts that converged to this root.
    pub hits: usize,
}

/// Runs `solve` from every start in parallel and merges converged results.
///
/// Roots closer than `rel_tol * max(1, |x|)` are merged, keeping the one with
/// the smallest residual. Output is sorted lexicographically.
pub fn multistart<S>(starts: &[DVector<f64>], rel_tol: f64, solve: S) -> Vec<Root>
where
    S: Fn(&DVector<f64>) -> Option<(DVector<f64>, f64)> + Sync,
{
    let found: Vec<(DVector<f64>, f64)> = starts.par_iter().filter_map(&solve).collect();
    merge_roots(found, rel_tol)
}

pub fn merge_roots(mut found: Vec<(DVector<f64>, f64)>, rel_tol: f64) -> Vec<Root> {
    found.sort_by(|a, b| lex_cmp(&a.0, &b.0));
    let mut roots: Vec<Root> = Vec::new();
    for (x, residual) in found {
        let scale = x.norm().max(1.0);
        match roots
            .iter_mut()
            .find(|r| (&r.x - &x).norm() <= rel_tol * scale.max(r.x.norm()))
        {
            Some(r) => {
                r.hits += 1;
                if residual < r.residual {
                    r.x = x;
                    r.residual = residual;
                }
            }
            None => roots.push(Root { x, residual, hits: 1 }),
        }
    }
    roots.sort_by(|a, b| lex_cmp(&a.x, &b.x));
    roots
}

fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// Sign of a determinant computed from an LU factorization (0 if singular).
pub fn det_sign(a: &DMatrix<f64>) -> i32 {
    let d = a.clone().determinant();
    if d > 0.0 {
        1
    } else if d < 0.0 {
        -1
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_sorted_and_kernel() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        let svd = FullSvd::new(&a);
        assert!(svd.sigma[0] >= svd.sigma[1]);
        let k = svd.kernel(1);
        assert!((k[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_matrix_kernel_spans_null_space() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let svd = FullSvd::new(&a);
        let k = svd.kernel(svd.rank(1e-12));
        assert_eq!(k.ncols(), 2);
        assert!((&a * &k).norm() < 1e-12);
        assert!((k.transpose() * &k - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn newton_regular_and_double_root() {
        let opts = NewtonOptions::default();
        let out = newton(
            |x| {
                Ok((
                    DVector::from_element(1, x[0] * x[0] - 2.0),
                    DMatrix::from_element(1, 1, 2.0 * x[0]),
                ))
            },
            &DVector::from_element(1, 1.0),
            opts,
            |_| true,
        )
        .unwrap();
        assert!((out.x[0] - 2f64.sqrt()).abs() < 1e-14);

        let out = newton(
            |x| {
                Ok((
                    DVector::from_element(1, (x[0] - 1.0).powi(2)),
                    DMatrix::from_element(1, 1, 2.0 * (x[0] - 1.0)),
                ))
            },
            &DVector::from_element(1, 1.5),
            opts,
            |_| true,
        )
        .unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn hessian_of_quadratic() {
        let f = FnMap::new(2, 1, |x| DVector::from_element(1, x[0] * x[0] + 3.0 * x[0] * x[1]));
        let h = f.hessian(&DVector::from_vec(vec![0.3, -0.2])).unwrap();
        assert!((h[0][(0, 0)] - 2.0).abs() < 1e-6);
        assert!((h[0][(0, 1)] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn step_underflow_detected() {
        let f = FnMap::scalar(|x| x * x);
        let err = hessian_with_step(&f, &DVector::from_element(1, 1.0), 1e-15).unwrap_err();
        assert!(matches!(err, Error::StepUnderflow { .. }));
    }

    #[test]
    fn grid_and_merge() {
        let g = grid_points(&[0.0, 0.0], &[1.0, 2.0], 3);
        assert_eq!(g.len(), 9);
        let roots = merge_roots(
            vec![
                (DVector::from_element(1, 1.0), 1e-12),
                (DVector::from_element(1, 1.0 + 1e-9), 1e-14),
                (DVector::from_element(1, 2.0), 0.0),
            ],
            1e-6,
        );
        assert_eq!(roots.len(), 2);
        assert_eq!(roots[0].hits, 2);
        assert_eq!(roots[0].residual, 1e-14);
    }
}
