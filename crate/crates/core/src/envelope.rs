//! Discriminants and envelopes of one-parameter families of plane curves
//! `C_z = {(x, y) : f(x, y, z) = 0}`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{merge_roots, newton, Bounds, NewtonOptions, EPS};

/// Residual bound on `(f, f_z)` for a discriminant point.
pub const DISCRIMINANT_TOL: f64 = 1e-9;

/// `|delta| > CERTIFY_REL * scale` certifies an envelope point.
pub const CERTIFY_REL: f64 = 1e-6;

fn step1(c: f64) -> f64 {
    EPS.cbrt() * (1.0 + c.abs())
}

fn step2(c: f64) -> f64 {
    EPS.powf(0.25) * (1.0 + c.abs())
}

/// A scalar family `f(x, y, z)`; partials default to central differences.
pub trait CurveFamily: Sync {
    fn f(&self, x: f64, y: f64, z: f64) -> f64;

    fn fx(&self, x: f64, y: f64, z: f64) -> f64 {
        let h = step1(x);
        (self.f(x + h, y, z) - self.f(x - h, y, z)) / (2.0 * h)
    }

    fn fy(&self, x: f64, y: f64, z: f64) -> f64 {
        let h = step1(y);
        (self.f(x, y + h, z) - self.f(x, y - h, z)) / (2.0 * h)
    }

    fn fz(&self, x: f64, y: f64, z: f64) -> f64 {
        let h = step1(z);
        (self.f(x, y, z + h) - self.f(x, y, z - h)) / (2.0 * h)
    }

    fn fxz(&self, x: f64, y: f64, z: f64) -> f64 {
        let (hx, hz) = (step2(x), step2(z));
        (self.f(x + hx, y, z + hz) - self.f(x + hx, y, z - hz) - self.f(x - hx, y, z + hz)
            + self.f(x - hx, y, z - hz))
            / (4.0 * hx * hz)
    }

    fn fyz(&self, x: f64, y: f64, z: f64) -> f64 {
        let (hy, hz) = (step2(y), step2(z));
        (self.f(x, y + hy, z + hz) - self.f(x, y + hy, z - hz) - self.f(x, y - hy, z + hz)
            + self.f(x, y - hy, z - hz))
            / (4.0 * hy * hz)
    }

    fn fzz(&self, x: f64, y: f64, z: f64) -> f64 {
        let h = step2(z);
        (self.f(x, y, z + h) - 2.0 * self.f(x, y, z) + self.f(x, y, z - h)) / (h * h)
    }

    /// `f_x f_yz - f_y f_xz`.
    fn delta(&self, x: f64, y: f64, z: f64) -> f64 {
        self.fx(x, y, z) * self.fyz(x, y, z) - self.fy(x, y, z) * self.fxz(x, y, z)
    }
}

/// Family given by a closure, all partials by differences.
pub struct FnFamily<F>(pub F);

impl<F: Fn(f64, f64, f64) -> f64 + Sync> CurveFamily for FnFamily<F> {
    fn f(&self, x: f64, y: f64, z: f64) -> f64 {
        (self.0)(x, y, z)
    }
}

/// Families readable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilySpec {
    /// Trajectories `y = x tan z - g x^2 / (2 v^2 cos^2 z)` of a projectile
    /// launched at angle `z` with speed `v`.
    Ballistic { g: f64, v: f64 },
    /// `y - z sin x`.
    Extremal,
    /// Sum of terms `c x^i y^j z^k`, each given as `[c, i, j, k]`.
    CustomPoly { coeffs: Vec<[f64; 4]> },
}

impl FamilySpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FamilySpec::Ballistic { g, v } => {
                if !(g.is_finite() && *g > 0.0 && v.is_finite() && *v > 0.0) {
                    return Err(Error::InvalidInput(format!("ballistic family needs g, v > 0 (got {g}, {v})")));
                }
            }
            FamilySpec::Extremal => {}
            FamilySpec::CustomPoly { coeffs } => {
                if coeffs.is_empty() {
                    return Err(Error::InvalidInput("custom_poly needs at least one term".into()));
                }
                for t in coeffs {
                    if !t[0].is_finite() || t[1..].iter().any(|e| *e < 0.0 || e.fract() != 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "custom_poly term {t:?} must be [coefficient, i, j, k] with natural exponents"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Derivative of the polynomial `(dx, dy, dz)` times.
    fn poly(coeffs: &[[f64; 4]], d: [u32; 3], x: f64, y: f64, z: f64) -> f64 {
        let mono = |base: f64, e: f64, k: u32| -> f64 {
            let e = e as u32;
            if k > e {
                return 0.0;
            }
            let falling: f64 = (0..k).map(|i| (e - i) as f64).product();
            falling * base.powi((e - k) as i32)
        };
        coeffs
            .iter()
            .map(|t| t[0] * mono(x, t[1], d[0]) * mono(y, t[2], d[1]) * mono(z, t[3], d[2]))
            .sum()
    }
}

impl CurveFamily for FamilySpec {
    fn f(&self, x: f64, y: f64, z: f64) -> f64 {
        match self {
            FamilySpec::Ballistic { g, v } => {
                let c = z.cos();
                x * z.tan() - g * x * x / (2.0 * v * v * c * c) - y
            }
            FamilySpec::Extremal => y - z * x.sin(),
            FamilySpec::CustomPoly { coeffs } => Self::poly(coeffs, [0, 0, 0], x, y, z),
        }
    }

    fn fx(&self, x: f64, y: f64, z: f64) -> f64 {
        match self {
            FamilySpec::Ballistic { g, v } => {
                let c = z.cos();
                z.tan() - g * x / (v * v * c * c)
            }
            FamilySpec::Extremal => -z * x.cos(),
            FamilySpec::CustomPoly { coeffs } => Self::poly(coeffs, [1, 0, 0], x, y, z),
        }
    }

    fn fy(&self, x: f64, y: f64, z: f64) -> f64 {
        match self {
            FamilySpec::Ballistic { .. } => -1.0,
            FamilySpec::Extremal => 1.0,
            FamilySpec::CustomPoly { coeffs } => Self::poly(coeffs, [0, 1, 0], x, y, z),
        }
    }

    fn fz(&self, x: f64, y: f64, z: f64) -> f64 {
        match self {
            FamilySpec::Ballistic { g, v } => {
                let (s, c) = z.sin_cos();
                x / (c * c) - g * x * x * s / (v * v * c * c * c)
            }
            FamilySpec::Extremal => -x.sin(),
            FamilySpec::CustomPoly { coeffs } => Self::poly(coeffs, [0, 0, 1], x, y, z),
        }
    }

    fn fxz(&self, x: f64, y: f64, z: f64) -> f64 {
        match self {
            FamilySpec::Ballistic { g, v } => {
                let (s, c) = z.sin_cos();
                1.0 / (c * c) - 2.0 * g * x * s / (v * v * c * c * c)
            }
            FamilySpec::Extremal => -x.cos(),
            FamilySpec::CustomPoly { coeffs } => Self::poly(coeffs, [1, 0, 1], x, y, z),
        }
    }

    fn fyz(&self, x: f64, y: f64, z: f64) -> f64 {
        match self {
            FamilySpec::Ballistic { .. } | FamilySpec::Extremal => 0.0,
            FamilySpec::CustomPoly { coeffs } => Self::poly(coeffs, [0, 1, 1], x, y, z),
        }
    }

    fn fzz(&self, x: f64, y: f64, z: f64) -> f64 {
        match self {
            FamilySpec::Ballistic { g, v } => {
                let (s, c) = z.sin_cos();
                2.0 * x * s / (c * c * c) - g * x * x * (c * c + 3.0 * s * s) / (v * v * c.powi(4))
            }
            FamilySpec::Extremal => 0.0,
            FamilySpec::CustomPoly { coeffs } => Self::poly(coeffs, [0, 0, 2], x, y, z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscriminantPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub delta: f64,
    pub certified_envelope: bool,
}

/// Unit-free scale for the certification threshold.
fn delta_scale<F: CurveFamily + ?Sized>(fam: &F, x: f64, y: f64, z: f64) -> f64 {
    let grad = fam.fx(x, y, z).hypot(fam.fy(x, y, z));
    let second = fam.fxz(x, y, z).hypot(fam.fyz(x, y, z)).hypot(fam.fzz(x, y, z));
    (grad * second).max(1.0)
}

pub fn discriminant_point<F: CurveFamily + ?Sized>(fam: &F, x: f64, y: f64, z: f64) -> DiscriminantPoint {
    let delta = fam.delta(x, y, z);
    DiscriminantPoint {
        x,
        y,
        z,
        delta,
        certified_envelope: delta.abs() > CERTIFY_REL * delta_scale(fam, x, y, z),
    }
}

fn residual_and_gradients<F: CurveFamily + ?Sized>(fam: &F, p: [f64; 3]) -> (Vector2<f64>, [[f64; 3]; 2]) {
    let [x, y, z] = p;
    let value = Vector2::new(fam.f(x, y, z), fam.fz(x, y, z));
    let grads = [
        [fam.fx(x, y, z), fam.fy(x, y, z), fam.fz(x, y, z)],
        [fam.fxz(x, y, z), fam.fyz(x, y, z), fam.fzz(x, y, z)],
    ];
    (value, grads)
}

/// Solves `f = f_z = 0` with coordinate `axis` held fixed.
fn solve_slice<F: CurveFamily + ?Sized>(fam: &F, axis: usize, start: [f64; 3]) -> Option<[f64; 3]> {
    let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let embed = |u: &DVector<f64>| {
        let mut p = start;
        p[free[0]] = u[0];
        p[free[1]] = u[1];
        p
    };
    let u0 = DVector::from_vec(vec![start[free[0]], start[free[1]]]);
    let out = newton(
        |u| {
            let (value, grads) = residual_and_gradients(fam, embed(u));
            let jac = DMatrix::from_fn(2, 2, |i, j| grads[i][free[j]]);
            Ok((DVector::from_vec(vec![value[0], value[1]]), jac))
        },
        &u0,
        NewtonOptions {
            tol: 1e-12,
            max_iter: 60,
            polish: true,
        },
        |u| u.iter().all(|v| v.is_finite()),
    )
    .ok()?;
    let p = embed(&out.x);
    let (value, _) = residual_and_gradients(fam, p);
    (value.amax() <= DISCRIMINANT_TOL && p.iter().all(|c| c.is_finite())).then_some(p)
}

/// Points of `{f = 0, f_z = 0}` in the `(x, y, z)` box, traced by Newton on
/// slices at fixed x, fixed y and fixed z with `grid` slices per axis and a
/// `grid x grid` array of starts per slice. The result is an unordered cloud
/// sorted lexicographically.
pub fn discriminant<F: CurveFamily + ?Sized>(fam: &F, bounds: &Bounds, grid: usize) -> Result<Vec<DiscriminantPoint>> {
    use rayon::prelude::*;
    if bounds.dim() != 3 || bounds.lo.iter().chain(&bounds.hi).any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("discriminant needs a finite (x, y, z) box".into()));
    }
    let grid = grid.max(2);
    let axis_values = |a: usize| -> Vec<f64> {
        (0..grid)
            .map(|i| bounds.lo[a] + (bounds.hi[a] - bounds.lo[a]) * (i as f64 + 0.5) / grid as f64)
            .collect()
    };
    let mut tasks = Vec::new();
    for axis in 0..3 {
        let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (va, vb) = (axis_values(free[0]), axis_values(free[1]));
        for c in axis_values(axis) {
            for a in &va {
                for b in &vb {
                    let mut p = [0.0; 3];
                    p[axis] = c;
                    p[free[0]] = *a;
                    p[free[1]] = *b;
                    tasks.push((axis, p));
                }
            }
        }
    }
    let found: Vec<(DVector<f64>, f64)> = tasks
        .par_iter()
        .filter_map(|(axis, p)| solve_slice(fam, *axis, *p))
        .filter(|p| bounds.contains(&DVector::from_row_slice(p)))
        .map(|p| (DVector::from_row_slice(&p), 0.0))
        .collect();
    Ok(merge_roots(found, 1e-6)
        .into_iter()
        .map(|r| discriminant_point(fam, r.x[0], r.x[1], r.x[2]))
        .collect())
}

/// Point-cloud CSV `x,y,z,delta,certified`.
pub fn discriminant_csv(points: &[DiscriminantPoint]) -> String {
    let mut out = String::from("x,y,z,delta,certified\n");
    for p in points {
        writeln!(out, "{:.12},{:.12},{:.12},{:.6e},{}", p.x, p.y, p.z, p.delta, p.certified_envelope)
            .expect("string write");
    }
    out
}

/// `gamma(z)`: the point of `C_z` meeting `C_{z*}` near the certified point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeSample {
    pub z: f64,
    pub x: f64,
    pub y: f64,
    pub residual: f64,
}

/// Width below which the difference quotient is replaced by `f_z`.
pub const QUOTIENT_CUTOFF: f64 = 1e-7;

/// `(f(., z), (f(., z) - f(., z*)) / (z - z*))` and its Jacobian in `(x, y)`.
fn intersection_system<F: CurveFamily + ?Sized>(
    fam: &F,
    z_star: f64,
    z: f64,
    x: f64,
    y: f64,
) -> (Vector2<f64>, Matrix2<f64>) {
    let dz = z - z_star;
    let (g, gx, gy) = if dz.abs() < QUOTIENT_CUTOFF {
        (fam.fz(x, y, z_star), fam.fxz(x, y, z_star), fam.fyz(x, y, z_star))
    } else {
        (
            (fam.f(x, y, z) - fam.f(x, y, z_star)) / dz,
            (fam.fx(x, y, z) - fam.fx(x, y, z_star)) / dz,
            (fam.fy(x, y, z) - fam.fy(x, y, z_star)) / dz,
        )
    };
    (
        Vector2::new(fam.f(x, y, z), g),
        Matrix2::new(fam.fx(x, y, z), fam.fy(x, y, z), gx, gy),
    )
}

fn solve_intersection<F: CurveFamily + ?Sized>(fam: &F, z_star: f64, z: f64, guess: [f64; 2]) -> Option<EnvelopeSample> {
    let out = newton(
        |u| {
            let (v, j) = intersection_system(fam, z_star, z, u[0], u[1]);
            Ok((DVector::from_column_slice(v.as_slice()), DMatrix::from_column_slice(2, 2, j.as_slice())))
        },
        &DVector::from_vec(guess.to_vec()),
        NewtonOptions {
            tol: 1e-12,
            max_iter: 60,
            polish: true,
        },
        |u| u.iter().all(|v| v.is_finite()),
    )
    .ok()?;
    let (v, _) = intersection_system(fam, z_star, z, out.x[0], out.x[1]);
    let residual = v.amax();
    (residual <= DISCRIMINANT_TOL).then_some(EnvelopeSample {
        z,
        x: out.x[0],
        y: out.x[1],
        residual,
    })
}

/// Samples of the envelope curve through a certified point for `z` in
/// `[z* - delta_z, z* + delta_z]`, continued outward from `z*` in `steps`
/// steps per side. Sorted by `z`.
pub fn envelope_parametrization<F: CurveFamily + ?Sized>(
    fam: &F,
    q: &DiscriminantPoint,
    delta_z: f64,
    steps: usize,
) -> Result<Vec<EnvelopeSample>> {
    if !q.certified_envelope {
        return Err(Error::Precondition(format!(
            "discriminant point ({}, {}, {}) is not certified (delta = {:e})",
            q.x, q.y, q.z, q.delta
        )));
    }
    if !(delta_z > 0.0) || steps == 0 {
        return Err(Error::InvalidInput("envelope half-width and step count must be positive".into()));
    }
    let centre = solve_intersection(fam, q.z, q.z, [q.x, q.y]).ok_or(Error::ContinuationBreakdown {
        reached_lo: q.z,
        reached_hi: q.z,
    })?;
    let mut lower = Vec::with_capacity(steps);
    let mut upper = Vec::with_capacity(steps);
    let mut reached = [q.z, q.z];
    for (side, sign, out) in [(0usize, -1.0, &mut lower), (1, 1.0, &mut upper)] {
        let mut guess = [centre.x, centre.y];
        for k in 1..=steps {
            let z = q.z + sign * delta_z * k as f64 / steps as f64;
            match solve_intersection(fam, q.z, z, guess) {
                Some(s) => {
                    guess = [s.x, s.y];
                    reached[side] = z;
                    out.push(s);
                }
                None => {
                    return Err(Error::ContinuationBreakdown {
                        reached_lo: reached[0],
                        reached_hi: reached[1],
                    })
                }
            }
        }
    }
    lower.reverse();
    lower.push(centre);
    lower.extend(upper);
    Ok(lower)
}

/// The family `(lambda, y, x) -> y - f(lambda, x)` whose envelope through
/// `(lambda*, 0)` is the nontrivial zero branch of `f`.
pub struct DualFamily<F>(pub F);

impl<F: Fn(f64, f64) -> f64 + Sync> CurveFamily for DualFamily<F> {
    fn f(&self, lambda: f64, y: f64, x: f64) -> f64 {
        y - (self.0)(lambda, x)
    }
}

/// A point `(lambda, x)` with `f(lambda, x) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BranchPoint {
    pub lambda: f64,
    pub x: f64,
    pub residual: f64,
}

/// Nontrivial zero branch of `f(lambda, x)` (with `f(lambda, 0) = 0`)
/// through `lambda*`, for `|x| <= x_max`, obtained as the envelope of the
/// dual family.
pub fn duality_check<F: Fn(f64, f64) -> f64 + Sync>(
    f1d: F,
    lambda_star: f64,
    x_max: f64,
    steps: usize,
) -> Result<Vec<BranchPoint>> {
    let fam = DualFamily(&f1d);
    let trivial = (-2..=2)
        .map(|k| f1d(lambda_star + 0.1 * k as f64, 0.0).abs())
        .fold(0.0, f64::max);
    if trivial > 1e-12 {
        return Err(Error::HypothesisViolated(format!("f(lambda, 0) is not identically zero ({trivial:e})")));
    }
    // In dual coordinates -f_z is f_x and -delta is f_{lambda x}.
    let fx = -fam.fz(lambda_star, 0.0, 0.0);
    let flx = -fam.delta(lambda_star, 0.0, 0.0);
    if fx.abs() > 1e-8 {
        return Err(Error::HypothesisViolated(format!("df/dx(lambda*, 0) = {fx:e} is not zero")));
    }
    if flx.abs() <= 1e-6 {
        return Err(Error::HypothesisViolated(format!("d2f/dlambda dx(lambda*, 0) = {flx:e} vanishes")));
    }
    let q = discriminant_point(&fam, lambda_star, 0.0, 0.0);
    let samples = envelope_parametrization(&fam, &q, x_max, steps)?;
    Ok(samples
        .into_iter()
        .map(|s| BranchPoint {
            lambda: s.x,
            x: s.z,
            residual: f1d(s.x, s.z).abs(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ballistic() -> FamilySpec {
        FamilySpec::Ballistic { g: 9.8, v: 10.0 }
    }

    fn check_partials<F: CurveFamily>(fam: &F, pts: &[[f64; 3]]) {
        let fd = FnFamily(|x, y, z| fam.f(x, y, z));
        for &[x, y, z] in pts {
            let pairs = [
                (fam.fx(x, y, z), fd.fx(x, y, z)),
                (fam.fy(x, y, z), fd.fy(x, y, z)),
                (fam.fz(x, y, z), fd.fz(x, y, z)),
                (fam.fxz(x, y, z), fd.fxz(x, y, z)),
                (fam.fyz(x, y, z), fd.fyz(x, y, z)),
                (fam.fzz(x, y, z), fd.fzz(x, y, z)),
            ];
            for (i, (a, b)) in pairs.iter().enumerate() {
                assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "partial {i} at ({x},{y},{z}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn analytic_partials_match_differences() {
        let pts = [[1.0, 0.5, 0.7], [3.2, -1.0, 0.3], [0.4, 2.0, 1.1]];
        check_partials(&ballistic(), &pts);
        check_partials(&FamilySpec::Extremal, &pts);
        let poly = FamilySpec::CustomPoly {
            coeffs: vec![[1.0, 0.0, 1.0, 0.0], [-1.0, 0.0, 0.0, 2.0], [0.5, 2.0, 1.0, 1.0], [2.0, 1.0, 0.0, 3.0]],
        };
        check_partials(&poly, &pts);
    }

    #[test]
    fn family_json() {
        let spec = FamilySpec::from_json(r#"{"kind":"ballistic","g":9.8,"v":10}"#).unwrap();
        assert_eq!(spec, ballistic());
        assert_eq!(FamilySpec::from_json(r#"{"kind":"extremal"}"#).unwrap(), FamilySpec::Extremal);
        let poly = FamilySpec::from_json(r#"{"kind":"custom_poly","coeffs":[[1,0,1,0],[-1,0,0,2]]}"#).unwrap();
        assert_eq!(poly.f(3.0, 2.0, 1.0), 1.0);
        assert!(FamilySpec::from_json(r#"{"kind":"ballistic","g":-1,"v":10}"#).is_err());
        assert!(FamilySpec::from_json(r#"{"kind":"custom_poly","coeffs":[[1,0.5,0,0]]}"#).is_err());
    }

    #[test]
    fn ballistic_discriminant_is_the_safety_parabola() {
        let fam = ballistic();
        let bounds = Bounds::new(vec![0.5, -5.0, 0.05], vec![9.0, 6.0, 1.5]).unwrap();
        let pts = discriminant(&fam, &bounds, 16).unwrap();
        assert!(pts.len() > 10);
        for p in &pts {
            assert!(p.certified_envelope);
            let parabola = 100.0 / 19.6 - 9.8 * p.x * p.x / 200.0;
            assert!((p.y - parabola).abs() < 1e-6, "{p:?}");
            assert!(fam.f(p.x, p.y, p.z).abs() <= DISCRIMINANT_TOL);
            assert!(fam.fz(p.x, p.y, p.z).abs() <= DISCRIMINANT_TOL);
        }
    }

    #[test]
    fn extremal_discriminant_lines() {
        let fam = FamilySpec::Extremal;
        let bounds = Bounds::new(vec![0.5, -1.0, 0.5], vec![7.0, 1.0, 2.0]).unwrap();
        let pts = discriminant(&fam, &bounds, 10).unwrap();
        assert!(!pts.is_empty());
        for p in &pts {
            let k = (p.x / PI).round();
            assert!(k == 1.0 || k == 2.0);
            assert!((p.x - k * PI).abs() < 1e-9 && p.y.abs() < 1e-9);
            assert!((p.delta.abs() - 1.0).abs() < 1e-9 && p.certified_envelope);
            assert_eq!(p.delta.signum(), if k == 1.0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn shifted_parabolas_are_not_certified() {
        let fam = FamilySpec::CustomPoly {
            coeffs: vec![[1.0, 0.0, 1.0, 0.0], [-1.0, 0.0, 0.0, 2.0]],
        };
        let bounds = Bounds::new(vec![-1.0, -1.0, -1.0], vec![1.1, 1.1, 1.1]).unwrap();
        let pts = discriminant(&fam, &bounds, 6).unwrap();
        assert!(!pts.is_empty());
        for p in &pts {
            assert!(p.z.abs() < 1e-9 && p.y.abs() < 1e-9);
            assert_eq!(p.delta, 0.0);
            assert!(!p.certified_envelope);
        }
        let err = envelope_parametrization(&fam, &pts[0], 0.1, 4).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn extremal_envelope_is_the_fixed_intersection() {
        let fam = FamilySpec::Extremal;
        let q = discriminant_point(&fam, PI, 0.0, 1.3);
        let samples = envelope_parametrization(&fam, &q, 0.5, 10).unwrap();
        assert_eq!(samples.len(), 21);
        for s in &samples {
            // direct intersection of C_z and C_{z*}: (z - z*) sin x = 0, y = z sin x
            assert!((s.x - PI).abs() < 1e-9);
            assert!((s.y - s.z * s.x.sin()).abs() < 1e-9);
            assert!(s.residual <= 1e-9);
        }
        assert_eq!(samples[10].z, 1.3);
    }

    #[test]
    fn ballistic_envelope_stays_on_the_central_curve() {
        let fam = ballistic();
        let x: f64 = 5.0;
        let z = (100.0 / (9.8 * x)).atan();
        let y = 100.0 / 19.6 - 9.8 * 25.0 / 200.0;
        let q = discriminant_point(&fam, x, y, z);
        assert!(q.certified_envelope);
        let samples = envelope_parametrization(&fam, &q, 0.2, 8).unwrap();
        for s in &samples {
            assert!(fam.f(s.x, s.y, z).abs() < 1e-9);
            assert!(fam.f(s.x, s.y, s.z).abs() < 1e-9);
        }
    }

    #[test]
    fn duality_branches() {
        let b = duality_check(|l, x| l * x - x * x, 0.0, 0.5, 10).unwrap();
        for p in &b {
            assert!((p.lambda - p.x).abs() < 1e-9 && p.residual <= 1e-9);
        }
        let b = duality_check(|l: f64, x| l.sin() * x, 0.0, 0.5, 10).unwrap();
        assert!(b.iter().all(|p| p.lambda.abs() < 1e-9));
        let b = duality_check(|l, x: f64| l * x - x.powi(3), 0.0, 0.5, 10).unwrap();
        for p in &b {
            assert!((p.lambda - p.x * p.x).abs() < 1e-9);
        }
    }

    #[test]
    fn duality_hypotheses() {
        let err = duality_check(|l, x| l + x, 0.0, 0.5, 4).unwrap_err();
        assert!(matches!(err, Error::HypothesisViolated(_)));
        let err = duality_check(|_l, x| x * x, 0.0, 0.5, 4).unwrap_err();
        assert!(matches!(err, Error::HypothesisViolated(_)));
    }
}
