//! Kernels and cokernels of Jacobians, the intrinsic second derivative, and
//! the unavoidable-crisis certificate.
//!
//! The intrinsic second derivative of `f` at a critical point `p` in the
//! kernel direction `v` is the linear map `u -> q D²f(p)[v, u]` from the
//! kernel of `Df(p)` to its cokernel, where `q` is the projection onto the
//! cokernel. A critical equilibrium whose kernel is odd-dimensional and for
//! which this map is an isomorphism for some `v` is a branch point of the
//! natural projection that separates regular equilibria of opposite index.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::economy::Market;
use crate::error::{Error, Result};
use crate::manifold::Equilibrium;
use crate::numeric::{
    contract, fd_step2, newton, singular_values, tensor_norm, FullSvd, NewtonOptions,
    SmoothMap, RANK_TOL,
};

/// Rank gaps below this make the kernel dimension indeterminate.
pub const MIN_RANK_GAP: f64 = 1e3;

/// Relative tolerance for the intrinsic-derivative isomorphism test.
pub const CERTIFY_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SingularityReport {
    pub jacobian: DMatrix<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    /// Orthonormal columns spanning the numerical kernel.
    pub kernel_basis: DMatrix<f64>,
    /// Orthonormal columns spanning a complement of the image.
    pub cokernel_basis: DMatrix<f64>,
    /// `sigma_rank / sigma_{rank+1}`; infinite at full rank.
    pub rank_gap: f64,
    /// Scale the rank threshold is relative to.
    pub scale: f64,
}

impl SingularityReport {
    pub fn kernel_dim(&self) -> usize {
        self.kernel_basis.ncols()
    }

    pub fn cokernel_dim(&self) -> usize {
        self.cokernel_basis.ncols()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.jacobian.ncols().min(self.jacobian.nrows())
    }

    pub fn indeterminate(&self) -> bool {
        self.rank_gap < MIN_RANK_GAP
    }

    pub fn sigma_min(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }

    /// Sign of `det J` (0 when numerically singular).
    pub fn det_sign(&self) -> i32 {
        if !self.is_full_rank() {
            return 0;
        }
        crate::numeric::det_sign(&self.jacobian)
    }
}

/// SVD-based report with the rank threshold relative to `sigma_max(J)`.
pub fn singular_report(jacobian: &DMatrix<f64>) -> SingularityReport {
    singular_report_scaled(jacobian, 0.0)
}

/// As [`singular_report`], with the threshold relative to
/// `max(sigma_max(J), scale)`.
pub fn singular_report_scaled(jacobian: &DMatrix<f64>, scale: f64) -> SingularityReport {
    singular_report_with(jacobian, scale, RANK_TOL)
}

pub fn singular_report_with(jacobian: &DMatrix<f64>, scale: f64, rank_tol: f64) -> SingularityReport {
    let svd = FullSvd::new(jacobian);
    let values = svd.values().to_vec();
    let scale = svd.sigma_max().max(scale);
    let rank = svd.rank(rank_tol * scale);
    let rank_gap = match values.get(rank) {
        None => f64::INFINITY,
        Some(&0.0) => f64::INFINITY,
        Some(&next) => {
            let top = if rank == 0 { scale } else { values[rank - 1] };
            top / next
        }
    };
    SingularityReport {
        jacobian: jacobian.clone(),
        kernel_basis: svd.kernel(rank),
        cokernel_basis: svd.cokernel(rank),
        singular_values: values,
        rank,
        rank_gap,
        scale,
    }
}

/// Matrix of `u -> q D²f[v, u]` on the kernel, from a precomputed Hessian.
///
/// `v` is given in kernel coordinates. Rows index the cokernel basis and
/// columns the kernel basis.
pub fn reduced_hessian_map(
    hessian: &[DMatrix<f64>],
    report: &SingularityReport,
    v: &DVector<f64>,
) -> DMatrix<f64> {
    let k = &report.kernel_basis;
    let c = &report.cokernel_basis;
    let ambient_v = k * v;
    let mut out = DMatrix::zeros(c.ncols(), k.ncols());
    for j in 0..k.ncols() {
        let u = k.column(j).into_owned();
        let w = contract(hessian, &ambient_v, &u);
        out.set_column(j, &(c.transpose() * w));
    }
    out
}

/// Intrinsic second derivative of `f` at `point` in the kernel direction `v`.
pub fn intrinsic_second_derivative<F: SmoothMap + ?Sized>(
    f: &F,
    point: &DVector<f64>,
    report: &SingularityReport,
    v: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if v.len() != report.kernel_dim() {
        return Err(Error::InvalidInput(format!(
            "direction has {} coordinates, kernel is {}-dimensional",
            v.len(),
            report.kernel_dim()
        )));
    }
    let hessian = f.hessian(point)?;
    Ok(reduced_hessian_map(&hessian, report, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    UnavoidableCrisis,
    CriterionFails,
    Regular,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::UnavoidableCrisis => "UnavoidableCrisis",
            Verdict::CriterionFails => "CriterionFails",
            Verdict::Regular => "Regular",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrisisCertificate {
    pub kernel_dim: usize,
    pub odd: bool,
    /// Chosen direction, in kernel coordinates.
    pub direction_v: DVector<f64>,
    /// `coker-dim x ker-dim` matrix of the intrinsic second derivative.
    pub reduced_hessian_map: DMatrix<f64>,
    pub min_singular_value: f64,
    pub certify_tol: f64,
    pub rank_gap: f64,
    /// Set when the rank gap is too small to trust the kernel dimension.
    pub indeterminate: bool,
    pub verdict: Verdict,
}

#[derive(Serialize)]
struct CertificateJson<'a> {
    kernel_dim: usize,
    odd: bool,
    v: Vec<f64>,
    min_sv: f64,
    verdict: &'a str,
    /// `null` stands for an infinite gap (full rank).
    rank_gap: Option<f64>,
}

impl CrisisCertificate {
    pub fn to_json_value(&self) -> serde_json::Value {
        let doc = CertificateJson {
            kernel_dim: self.kernel_dim,
            odd: self.odd,
            v: self.direction_v.iter().copied().collect(),
            min_sv: self.min_singular_value,
            verdict: self.verdict.as_str(),
            rank_gap: self.rank_gap.is_finite().then_some(self.rank_gap),
        };
        serde_json::to_value(doc).expect("certificate serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("certificate serializes")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    pub rank_tol: f64,
    /// Relative isomorphism tolerance, multiplied by the local scale.
    pub certify_tol: f64,
    /// Random unit kernel combinations tried besides the basis vectors.
    pub random_directions: usize,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            rank_tol: RANK_TOL,
            certify_tol: CERTIFY_TOL,
            random_directions: 8,
            seed: 42,
        }
    }
}

/// Builds a certificate from a report and a Hessian tensor.
///
/// `jacobian_scale` is the norm of the derivative the report's rank was
/// judged against; together with the Hessian norm it sets the unit of the
/// isomorphism tolerance.
pub fn certify_with(
    report: &SingularityReport,
    hessian: &[DMatrix<f64>],
    jacobian_scale: f64,
    direction: Option<&DVector<f64>>,
    opts: &CertifyOptions,
) -> Result<CrisisCertificate> {
    let kernel_dim = report.kernel_dim();
    let odd = kernel_dim % 2 == 1;
    let certify_tol = opts.certify_tol * (tensor_norm(hessian) + jacobian_scale);
    if kernel_dim == 0 {
        return Ok(CrisisCertificate {
            kernel_dim,
            odd,
            direction_v: DVector::zeros(0),
            reduced_hessian_map: DMatrix::zeros(report.cokernel_dim(), 0),
            min_singular_value: f64::INFINITY,
            certify_tol,
            rank_gap: report.rank_gap,
            indeterminate: false,
            verdict: Verdict::Regular,
        });
    }

    let mut candidates: Vec<DVector<f64>> = Vec::new();
    match direction {
        Some(v) => {
            if v.len() != kernel_dim || v.norm() == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "direction must be a nonzero vector with {kernel_dim} kernel coordinates"
                )));
            }
            candidates.push(v.normalize());
        }
        None => {
            for i in 0..kernel_dim {
                let mut e = DVector::zeros(kernel_dim);
                e[i] = 1.0;
                candidates.push(e);
            }
            if kernel_dim > 1 {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                for _ in 0..opts.random_directions {
                    let v = DVector::from_fn(kernel_dim, |_, _| rng.gen_range(-1.0..1.0));
                    if v.norm() > 1e-3 {
                        candidates.push(v.normalize());
                    }
                }
            }
        }
    }

    let mut best: Option<(DVector<f64>, DMatrix<f64>, f64)> = None;
    for v in candidates {
        let map = reduced_hessian_map(hessian, report, &v);
        let smin = singular_values(&map)
            .get(map.ncols().min(map.nrows()).saturating_sub(1))
            .copied()
            .unwrap_or(0.0);
        let smin = if map.nrows() == map.ncols() { smin } else { 0.0 };
        if best.as_ref().is_none_or(|b| smin > b.2) {
            best = Some((v, map, smin));
        }
    }
    let (direction_v, reduced_hessian_map, min_singular_value) = best.expect("at least one direction");
    let indeterminate = report.indeterminate();
    let verdict = if odd && !indeterminate && min_singular_value > certify_tol {
        Verdict::UnavoidableCrisis
    } else {
        Verdict::CriterionFails
    };
    Ok(CrisisCertificate {
        kernel_dim,
        odd,
        direction_v,
        reduced_hessian_map,
        min_singular_value,
        certify_tol,
        rank_gap: report.rank_gap,
        indeterminate,
        verdict,
    })
}

/// Certificate for a square map at a point, with the rank threshold and
/// tolerance scaled by `reference_scale` (defaults to `sigma_max(Df)`).
pub fn certify_map<F: SmoothMap + ?Sized>(
    f: &F,
    point: &DVector<f64>,
    reference_scale: Option<f64>,
    direction: Option<&DVector<f64>>,
    opts: &CertifyOptions,
) -> Result<CrisisCertificate> {
    let jac = f.jacobian(point)?;
    let scale = reference_scale.unwrap_or(0.0);
    let report = singular_report_with(&jac, scale, opts.rank_tol);
    let hessian = f.hessian(point)?;
    certify_with(&report, &hessian, report.scale, direction, opts)
}

/// Certificate for an equilibrium of a market.
///
/// The reduced Jacobian's rank is judged against the full derivative
/// `[D_p z | D_w z]`, which is surjective because 0 is a regular value.
pub fn certify_crisis<M: Market>(
    eq: &Equilibrium<M>,
    direction: Option<&DVector<f64>>,
    opts: &CertifyOptions,
) -> Result<CrisisCertificate> {
    let p = &eq.price;
    let jac = eq.market.jacobian_reduced(p)?;
    let scale = eq.market.reference_scale(p)?;
    let report = singular_report_with(&jac, scale, opts.rank_tol);
    let hessian = eq.market.hessian_reduced(p)?;
    certify_with(&report, &hessian, report.scale, direction, opts)
}

/// Computes the intrinsic second derivative of the projection
/// `pi: M = f^{-1}(0) -> R^m`, `(x, p) -> x`, at `point` in two independent
/// ways and returns their largest entrywise discrepancy.
///
/// `f: R^{m+p} -> R^p` takes base coordinates first. Route (a) builds a
/// chart of `M` by correcting tangent displacements back onto `f = 0` and
/// differentiates `pi` through it; route (b) uses the partial map
/// `p -> f(x*, p)` and transports its cokernel with the canonical
/// isomorphism `w -> a`, `D_x f a + D_p f b = -w`.
pub fn verify_reduction<F: SmoothMap + ?Sized>(
    f: &F,
    base_dim: usize,
    point: &DVector<f64>,
    direction: Option<&DVector<f64>>,
) -> Result<f64> {
    let n = point.len();
    let fiber_dim = n - base_dim;
    if f.dim_out() != fiber_dim {
        return Err(Error::InvalidInput(format!(
            "defining map must have {fiber_dim} components, has {}",
            f.dim_out()
        )));
    }
    let df = f.jacobian(point)?;
    let svd = FullSvd::new(&df);
    let sigma = svd.values().to_vec();
    let smax = svd.sigma_max();
    let smin = sigma.last().copied().unwrap_or(0.0);
    if smax == 0.0 || smin <= RANK_TOL * smax {
        return Err(Error::RegularValueViolation { sigma_min: smin });
    }
    let d_fiber = df.columns(base_dim, fiber_dim).into_owned();
    let fiber_report = singular_report_scaled(&d_fiber, smax);
    let k = fiber_report.kernel_dim();
    if k == 0 {
        return Ok(0.0);
    }
    let v = match direction {
        Some(v) => v.normalize(),
        None => {
            let mut e = DVector::zeros(k);
            e[0] = 1.0;
            e
        }
    };

    let tangent = svd.kernel(fiber_dim);
    let normal = {
        let mut nb = DMatrix::zeros(n, fiber_dim);
        for j in 0..fiber_dim {
            nb.set_column(j, &svd.v.column(j).rows(0, n));
        }
        nb
    };
    let chart = |s: &DVector<f64>| -> Result<DVector<f64>> {
        let base_point = point + &tangent * s;
        let out = newton(
            |c| {
                let x = &base_point + &normal * c;
                Ok((f.eval(&x)?, f.jacobian(&x)? * &normal))
            },
            &DVector::zeros(fiber_dim),
            NewtonOptions {
                tol: 1e-13,
                max_iter: 50,
                polish: true,
            },
            |_| true,
        )?;
        let x = &base_point + &normal * &out.x;
        Ok(x.rows(0, base_dim).into_owned())
    };

    let projected_tangent = tangent.rows(0, base_dim).into_owned();
    let pi_report = singular_report_scaled(&projected_tangent, 1.0);
    if pi_report.kernel_dim() != k {
        return Err(Error::InvalidInput(format!(
            "kernel dimensions disagree: projection {} vs partial map {k}",
            pi_report.kernel_dim()
        )));
    }
    let coker = &pi_report.cokernel_basis;

    let lift = |u: &DVector<f64>| -> DVector<f64> {
        let mut ambient = DVector::zeros(n);
        ambient.rows_mut(base_dim, fiber_dim).copy_from(u);
        tangent.transpose() * ambient
    };
    let fiber_kernel = &fiber_report.kernel_basis;
    let ambient_v = fiber_kernel * &v;
    let chart_v = lift(&ambient_v);

    // (a) polarized second differences of the chart
    let h = fd_step2(&DVector::zeros(1)) * 4.0;
    let mut via_chart = DMatrix::zeros(coker.ncols(), k);
    for j in 0..k {
        let chart_u = lift(&fiber_kernel.column(j).into_owned());
        let plus = &chart_v + &chart_u;
        let minus = &chart_v - &chart_u;
        let second = (chart(&(&plus * h))? - chart(&(&minus * h))? - chart(&(&minus * -h))?
            + chart(&(&plus * -h))?)
            / (4.0 * h * h);
        via_chart.set_column(j, &(coker.transpose() * second));
    }

    // (b) partial map in the fiber variables, transported by j'
    let full_hessian = f.hessian(point)?;
    let fiber_hessian: Vec<DMatrix<f64>> = full_hessian
        .iter()
        .map(|hi| hi.view((base_dim, base_dim), (fiber_dim, fiber_dim)).into_owned())
        .collect();
    let pinv = df
        .clone()
        .pseudo_inverse(1e-12 * smax)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut via_partial = DMatrix::zeros(coker.ncols(), k);
    for j in 0..k {
        let u = fiber_kernel.column(j).into_owned();
        let w = contract(&fiber_hessian, &ambient_v, &u);
        let ab = &pinv * (-w);
        let a = ab.rows(0, base_dim).into_owned();
        via_partial.set_column(j, &(coker.transpose() * a));
    }

    Ok((via_chart - via_partial).amax())
}
