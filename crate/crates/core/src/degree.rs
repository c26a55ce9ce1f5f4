//! Brouwer degree at regular values, local multiplicity, and sign-change
//! bifurcation detection along a trivial branch.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::economy::Market;
use crate::error::{Error, Result};
use crate::manifold::{enumerate_fiber, PriceBox};
use crate::numeric::{
    det_sign, max_abs, merge_roots, newton, singular_values, Bounds, NewtonOptions, SmoothMap, RANK_TOL,
};

/// Boundary values of `|f - y|` below this count as a boundary zero.
pub const BOUNDARY_TOL: f64 = 1e-8;

/// Size of the random target offset used when `y` is not a regular value,
/// capped at half the distance from `y` to the image of the boundary.
pub const SARD_OFFSET: f64 = 1e-6;

pub const SARD_RETRIES: usize = 5;

#[derive(Debug, Clone)]
pub struct DegreeOptions {
    /// Starts per axis; `None` picks a density from the dimension.
    pub grid: Option<usize>,
    pub seed: u64,
    pub rank_tol: f64,
    pub newton_tol: f64,
}

impl Default for DegreeOptions {
    fn default() -> Self {
        Self {
            grid: None,
            seed: 42,
            rank_tol: RANK_TOL,
            newton_tol: 1e-12,
        }
    }
}

impl DegreeOptions {
    fn density(&self, dim: usize) -> usize {
        self.grid.unwrap_or(match dim {
            1 => 400,
            2 => 60,
            _ => 16,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SignedZero {
    pub point: Vec<f64>,
    pub sign: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct DegreeResult {
    pub value: i32,
    pub zeros: Vec<SignedZero>,
    /// The requested target was itself a regular value.
    pub regular: bool,
    /// Target actually counted (differs from the request after a perturbation).
    pub target: Vec<f64>,
    pub attempts: usize,
}

fn zeros_of<F: SmoothMap + ?Sized>(
    f: &F,
    bounds: &Bounds,
    target: &DVector<f64>,
    density: usize,
    tol: f64,
    merge_tol: f64,
) -> Vec<DVector<f64>> {
    use rayon::prelude::*;
    let starts = bounds.grid(density);
    let found: Vec<(DVector<f64>, f64)> = starts
        .par_iter()
        .filter_map(|x0| {
            let out = newton(
                |x| Ok((f.eval(x)? - target, f.jacobian(x)?)),
                x0,
                NewtonOptions {
                    tol,
                    max_iter: 100,
                    polish: true,
                },
                |x| x.iter().all(|v| v.is_finite()),
            )
            .ok()?;
            bounds.contains(&out.x).then_some((out.x, out.residual))
        })
        .collect();
    merge_roots(found, merge_tol).into_iter().map(|r| r.x).collect()
}

fn jacobian_scale<F: SmoothMap + ?Sized>(f: &F, bounds: &Bounds, density: usize) -> Result<f64> {
    let mut scale: f64 = 0.0;
    for x in bounds.grid(density.min(24)) {
        let j = f.jacobian(&x)?;
        scale = scale.max(singular_values(&j).first().copied().unwrap_or(0.0));
    }
    Ok(scale)
}

/// Minimum of `|f - y|` over a grid on the faces of the box.
pub fn boundary_distance<F: SmoothMap + ?Sized>(
    f: &F,
    bounds: &Bounds,
    y: &DVector<f64>,
    density: usize,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for x in bounds.boundary_grid(density) {
        best = best.min((f.eval(&x)? - y).norm());
    }
    Ok(best)
}

/// Degree of `f` over the box at `y`, as the signed count of preimages.
pub fn degree<F: SmoothMap + ?Sized>(
    f: &F,
    bounds: &Bounds,
    y: &DVector<f64>,
    opts: &DegreeOptions,
) -> Result<DegreeResult> {
    let n = bounds.dim();
    if f.dim_in() != n || f.dim_out() != n || y.len() != n {
        return Err(Error::InvalidInput(format!(
            "degree needs a square map on R^{n} and a target in R^{n}"
        )));
    }
    let density = opts.density(n);
    let min_norm = boundary_distance(f, bounds, y, density)?;
    if min_norm < BOUNDARY_TOL {
        return Err(Error::BoundaryZero { min_norm });
    }
    let scale = jacobian_scale(f, bounds, density)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    for attempt in 0..=SARD_RETRIES {
        let target = if attempt == 0 {
            y.clone()
        } else {
            let mut d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            if d.norm() == 0.0 {
                d[0] = 1.0;
            }
            y + d.normalize() * SARD_OFFSET.min(0.5 * min_norm)
        };
        let zeros = zeros_of(f, bounds, &target, density, opts.newton_tol, 1e-6);
        let mut signed = Vec::with_capacity(zeros.len());
        let mut regular = true;
        for x in zeros {
            let j = f.jacobian(&x)?;
            let sv = singular_values(&j);
            let smin = sv.last().copied().unwrap_or(0.0);
            if smin <= opts.rank_tol * scale.max(sv[0]) {
                regular = false;
                break;
            }
            signed.push(SignedZero {
                point: x.iter().copied().collect(),
                sign: det_sign(&j),
            });
        }
        if regular {
            return Ok(DegreeResult {
                value: signed.iter().map(|z| z.sign).sum(),
                zeros: signed,
                regular: attempt == 0,
                target: target.iter().copied().collect(),
                attempts: attempt + 1,
            });
        }
    }
    Err(Error::Irregular {
        attempts: SARD_RETRIES + 1,
    })
}

/// Local degree of `f` at an isolated zero, over the cube of half-width
/// `radius` around `x0`.
///
/// Newton endpoints within `1e-4 * radius` of each other count as one zero:
/// a degenerate zero is only resolved to roughly the finite-difference step.
pub fn multiplicity<F: SmoothMap + ?Sized>(
    f: &F,
    x0: &DVector<f64>,
    radius: f64,
    opts: &DegreeOptions,
) -> Result<i32> {
    let bounds = Bounds::around(x0, radius)?;
    let origin = DVector::zeros(f.dim_out());
    let zeros = zeros_of(f, &bounds, &origin, opts.density(x0.len()), opts.newton_tol, 1e-4 * radius);
    if zeros.len() > 1 {
        return Err(Error::NotIsolated { count: zeros.len() });
    }
    Ok(degree(f, &bounds, &origin, opts)?.value)
}

/// Interval of the parameter known to contain a bifurcation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
}

impl Bracket {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, t: f64) -> bool {
        self.lo <= t && t <= self.hi
    }
}

#[derive(Debug, Clone)]
pub struct BifurcationOptions {
    pub samples: usize,
    pub width: f64,
    pub trivial_tol: f64,
}

impl Default for BifurcationOptions {
    fn default() -> Self {
        Self {
            samples: 201,
            width: 1e-8,
            trivial_tol: 1e-12,
        }
    }
}

fn linearization<H: SmoothMap + ?Sized>(h: &H, t: f64) -> Result<DMatrix<f64>> {
    let n = h.dim_out();
    let mut x = DVector::zeros(n + 1);
    x[0] = t;
    let j = h.jacobian(&x)?;
    Ok(j.columns(1, n).into_owned())
}

/// Sign changes of `det D_u h(t, 0)` on `[t0, t1]`, each refined by bisection.
///
/// `h` maps `(t, u)` to `R^n`, with `t` the first input coordinate, and must
/// vanish on `u = 0`.
pub fn detect_bifurcation<H: SmoothMap + ?Sized>(
    h: &H,
    t_range: (f64, f64),
    opts: &BifurcationOptions,
) -> Result<Vec<Bracket>> {
    let n = h.dim_out();
    let (t0, t1) = t_range;
    if h.dim_in() != n + 1 || !(t0 < t1) || opts.samples < 2 {
        return Err(Error::InvalidInput(
            "family must map (t, u) in R x R^n to R^n over a nonempty range".into(),
        ));
    }
    let ts: Vec<f64> = (0..opts.samples)
        .map(|i| {
            if i + 1 == opts.samples {
                t1
            } else {
                t0 + (t1 - t0) * i as f64 / (opts.samples - 1) as f64
            }
        })
        .collect();

    let mut signs = Vec::with_capacity(ts.len());
    let mut scale: f64 = 0.0;
    let mut smins = Vec::with_capacity(ts.len());
    for &t in &ts {
        let mut x = DVector::zeros(n + 1);
        x[0] = t;
        let value = max_abs(&h.eval(&x)?);
        if value > opts.trivial_tol {
            return Err(Error::TrivialBranchViolated { t, value });
        }
        let l = linearization(h, t)?;
        let sv = singular_values(&l);
        scale = scale.max(sv[0]);
        smins.push(*sv.last().unwrap());
        signs.push(det_sign(&l));
    }
    for (t, s) in [(t0, smins[0]), (t1, smins[smins.len() - 1])] {
        if s <= RANK_TOL * scale {
            return Err(Error::DegenerateEndpoints { t });
        }
    }

    let sign_at = |t: f64| -> Result<i32> { Ok(det_sign(&linearization(h, t)?)) };
    let mut brackets = Vec::new();
    let mut last = 0usize;
    for i in 1..ts.len() {
        if signs[i] == 0 {
            continue;
        }
        if signs[i] != signs[last] {
            let (mut lo, mut hi) = (ts[last], ts[i]);
            let s_lo = signs[last];
            while hi - lo > opts.width {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                match sign_at(mid)? {
                    0 => {
                        let w = hi - lo;
                        lo = mid - 0.25 * w;
                        hi = mid + 0.25 * w;
                    }
                    s if s == s_lo => lo = mid,
                    _ => hi = mid,
                }
            }
            brackets.push(Bracket { lo, hi });
        }
        last = i;
    }
    Ok(brackets)
}

/// Signed count of equilibria of a regular economy; equals +1 whenever the
/// price box contains the whole fiber.
pub fn degree_of_natural_projection<M: Market>(market: &M, search_box: &PriceBox, grid: usize) -> Result<i32> {
    let fiber = enumerate_fiber(market, search_box, grid);
    if let Some(eq) = fiber.equilibria.iter().find(|e| e.critical) {
        return Err(Error::CriticalEconomy {
            price: eq.price.iter().copied().collect(),
        });
    }
    Ok(fiber.index_sum())
}
