//! Equilibria, fibers of the natural projection, and the critical set.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::economy::{Economy, Market};
use crate::error::{Error, Result};
use crate::intrinsic::{singular_report_scaled, singular_report_with, SingularityReport};
use crate::numeric::{
    fd_step, grid_points, max_abs, merge_roots, newton, Bounds, FullSvd, NewtonOptions, RANK_TOL,
};

/// Default residual bound for a converged equilibrium.
pub const SOLVE_TOL: f64 = 1e-10;

/// Relative price distance under which two equilibria are identified.
pub const DEDUP_TOL: f64 = 1e-6;

/// A zero of the reduced excess demand.
#[derive(Debug, Clone)]
pub struct Equilibrium<M: Market = Economy> {
    /// Free prices (the numeraire is implicit).
    pub price: DVector<f64>,
    pub market: M,
    /// Max-norm of the reduced excess demand at `price`.
    pub residual: f64,
    /// The reduced Jacobian is numerically rank deficient.
    pub critical: bool,
    /// `sgn det D_p z` (0 when critical).
    pub det_sign: i32,
}

impl<M: Market> Equilibrium<M> {
    /// Builds the record for a point assumed to be (close to) an equilibrium.
    pub fn at(market: &M, price: DVector<f64>) -> Result<Self> {
        let residual = max_abs(&market.reduced_excess_demand(&price)?);
        let report = projection_report(market, &price)?;
        Ok(Self {
            critical: !report.is_full_rank(),
            det_sign: report.det_sign(),
            price,
            market: market.clone(),
            residual,
        })
    }

    /// `(p_free, 1)`.
    pub fn full_price(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.price.iter().copied().collect();
        p.push(1.0);
        p
    }

    /// Orientation index `sgn det(-D_p z)`; the indices over a regular
    /// fiber sum to the degree of the natural projection, which is +1.
    pub fn index(&self) -> i32 {
        if self.price.len().is_multiple_of(2) {
            self.det_sign
        } else {
            -self.det_sign
        }
    }
}

fn projection_report<M: Market>(market: &M, price: &DVector<f64>) -> Result<SingularityReport> {
    let jac = market.jacobian_reduced(price)?;
    let scale = market.reference_scale(price)?;
    Ok(singular_report_scaled(&jac, scale))
}

/// Newton refinement of `z(p) = 0` from `p0`.
pub fn solve_equilibrium<M: Market>(market: &M, p0: &DVector<f64>) -> Result<Equilibrium<M>> {
    solve_equilibrium_with(market, p0, NewtonOptions::default())
}

pub fn solve_equilibrium_with<M: Market>(
    market: &M,
    p0: &DVector<f64>,
    opts: NewtonOptions,
) -> Result<Equilibrium<M>> {
    if p0.len() != market.free_dim() {
        return Err(Error::InvalidPrice(format!(
            "expected {} free prices, got {}",
            market.free_dim(),
            p0.len()
        )));
    }
    if !market.in_domain(p0) {
        return Err(Error::InvalidPrice(format!("initial guess {p0:?} outside the price domain")));
    }
    let out = newton(
        |p| Ok((market.reduced_excess_demand(p)?, market.jacobian_reduced(p)?)),
        p0,
        opts,
        |p| market.in_domain(p),
    )?;
    Equilibrium::at(market, out.x)
}

/// Box of free prices.
pub type PriceBox = Bounds;

impl Bounds {
    /// `[0.05, 20]` on every free price.
    pub fn default_for(dim: usize) -> Self {
        Self::cube(dim, 0.05, 20.0).expect("valid default box")
    }
}

/// All equilibria of one economy found in a price box.
#[derive(Debug, Clone)]
pub struct Fiber<M: Market = Economy> {
    pub market: M,
    /// Sorted by price.
    pub equilibria: Vec<Equilibrium<M>>,
    pub search_box: PriceBox,
    pub grid_density: usize,
    /// Grid starts that converged to each equilibrium.
    pub hits: Vec<usize>,
}

impl<M: Market> Fiber<M> {
    pub fn len(&self) -> usize {
        self.equilibria.len()
    }

    pub fn is_empty(&self) -> bool {
        self.equilibria.is_empty()
    }

    pub fn is_regular(&self) -> bool {
        self.equilibria.iter().all(|e| !e.critical)
    }

    /// Sum of orientation indices.
    pub fn index_sum(&self) -> i32 {
        self.equilibria.iter().map(|e| e.index()).sum()
    }

    /// Smallest distance from `price` to another fiber point; infinite when
    /// `price` is the only one.
    pub fn separation_from(&self, price: &DVector<f64>) -> f64 {
        self.equilibria
            .iter()
            .map(|e| (&e.price - price).norm())
            .filter(|d| *d > DEDUP_TOL * (1.0 + price.norm()))
            .fold(f64::INFINITY, f64::min)
    }

    /// CSV rows `p_1..p_{l-1}, residual, kernel_dim, det_sign`.
    pub fn to_csv(&self) -> Result<String> {
        self.to_csv_with(RANK_TOL)
    }

    pub fn to_csv_with(&self, rank_tol: f64) -> Result<String> {
        let n = self.market.free_dim();
        let mut out = String::new();
        let header: Vec<String> = (1..=n).map(|i| format!("p_{i}")).collect();
        writeln!(out, "{},residual,kernel_dim,det_sign", header.join(",")).expect("string write");
        for eq in &self.equilibria {
            let jac = eq.market.jacobian_reduced(&eq.price)?;
            let report = singular_report_with(&jac, eq.market.reference_scale(&eq.price)?, rank_tol);
            let prices: Vec<String> = eq.price.iter().map(|p| format!("{p:.12}")).collect();
            writeln!(
                out,
                "{},{:.3e},{},{}",
                prices.join(","),
                eq.residual,
                report.kernel_dim(),
                report.det_sign()
            )
            .expect("string write");
        }
        Ok(out)
    }
}

/// Multi-start Newton from a uniform grid over `search_box`.
pub fn enumerate_fiber<M: Market>(market: &M, search_box: &PriceBox, grid: usize) -> Fiber<M> {
    let starts = grid_points(&search_box.lo, &search_box.hi, grid);
    let found: Vec<(DVector<f64>, f64)> = {
        use rayon::prelude::*;
        starts
            .par_iter()
            .filter_map(|p0| {
                let out = newton(
                    |p| Ok((market.reduced_excess_demand(p)?, market.jacobian_reduced(p)?)),
                    p0,
                    NewtonOptions::default(),
                    |p| market.in_domain(p),
                )
                .ok()?;
                (out.residual <= SOLVE_TOL && search_box.contains(&out.x)).then_some((out.x, out.residual))
            })
            .collect()
    };
    let roots = merge_roots(found, DEDUP_TOL);
    let mut equilibria = Vec::with_capacity(roots.len());
    let mut hits = Vec::with_capacity(roots.len());
    for r in roots {
        if let Ok(eq) = Equilibrium::at(market, r.x) {
            equilibria.push(eq);
            hits.push(r.hits);
        }
    }
    Fiber {
        market: market.clone(),
        equilibria,
        search_box: search_box.clone(),
        grid_density: grid,
        hits,
    }
}

/// Kernel and cokernel of the differential of the natural projection at
/// `eq`, represented through the reduced Jacobian `D_p z` (the map
/// `v -> (v, 0)` identifies its kernel with that of the projection).
pub fn projection_differential<M: Market>(eq: &Equilibrium<M>) -> Result<SingularityReport> {
    projection_report(&eq.market, &eq.price)
}

/// Finds a fold of the natural projection along the endowment line
/// `w(s) = w_0 + s d` by Newton on the augmented system
/// `z(p, w(s)) = 0, D_p z v = 0, c.v = 1` in `(p, v, s)`.
///
/// Returns the critical equilibrium and the parameter `s`.
pub fn locate_fold_along<M: Market>(
    market: &M,
    direction: &DVector<f64>,
    p0: &DVector<f64>,
    s0: f64,
) -> Result<(Equilibrium<M>, f64)> {
    let n = market.free_dim();
    let base = market.endowment_vector();
    let at = |s: f64| market.with_endowment_vector(&(&base + direction * s));
    let m0 = at(s0)?;
    let svd = FullSvd::new(&m0.jacobian_reduced(p0)?);
    let c: DVector<f64> = svd.v.column(n - 1).rows(0, n).into_owned();

    let dim = 2 * n + 1;
    let system = |x: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = x.rows(0, n).into_owned();
        let v = x.rows(n, n).into_owned();
        let s = x[2 * n];
        let m = at(s)?;
        let z = m.reduced_excess_demand(&p)?;
        let jp = m.jacobian_reduced(&p)?;
        let jw = m.endowment_jacobian(&p)?;
        let jv = &jp * &v;
        let mut value = DVector::zeros(dim);
        value.rows_mut(0, n).copy_from(&z);
        value.rows_mut(n, n).copy_from(&jv);
        value[2 * n] = c.dot(&v) - 1.0;

        let mut jac = DMatrix::zeros(dim, dim);
        jac.view_mut((0, 0), (n, n)).copy_from(&jp);
        jac.view_mut((0, 2 * n), (n, 1)).copy_from(&(&jw * direction));
        jac.view_mut((n, n), (n, n)).copy_from(&jp);
        let h = fd_step(&p);
        for j in 0..n {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[j] += h;
            pm[j] -= h;
            let col = (m.jacobian_reduced(&pp)? * &v - m.jacobian_reduced(&pm)? * &v) / (pp[j] - pm[j]);
            jac.view_mut((n, j), (n, 1)).copy_from(&col);
        }
        let hs = fd_step(&DVector::from_element(1, s));
        let col = (at(s + hs)?.jacobian_reduced(&p)? * &v - at(s - hs)?.jacobian_reduced(&p)? * &v)
            / (2.0 * hs);
        jac.view_mut((n, 2 * n), (n, 1)).copy_from(&col);
        for j in 0..n {
            jac[(2 * n, n + j)] = c[j];
        }
        Ok((value, jac))
    };

    let mut x0 = DVector::zeros(dim);
    x0.rows_mut(0, n).copy_from(p0);
    x0.rows_mut(n, n).copy_from(&c);
    x0[2 * n] = s0;
    let out = newton(
        system,
        &x0,
        NewtonOptions {
            tol: 1e-12,
            max_iter: 60,
            polish: true,
        },
        |x| market.in_domain(&x.rows(0, n).into_owned()),
    )?;
    let s = out.x[2 * n];
    let m = at(s)?;
    let eq = Equilibrium::at(&m, out.x.rows(0, n).into_owned())?;
    Ok((eq, s))
}

/// Fold of the natural projection found by moving the single endowment
/// coordinate `coordinate` (an index into the flattened endowment vector).
pub fn locate_fold<M: Market>(market: &M, p0: &DVector<f64>, coordinate: usize) -> Result<Equilibrium<M>> {
    let len = market.endowment_vector().len();
    if coordinate >= len {
        return Err(Error::InvalidInput(format!(
            "endowment coordinate {coordinate} out of range (len {len})"
        )));
    }
    let mut d = DVector::zeros(len);
    d[coordinate] = 1.0;
    locate_fold_along(market, &d, p0, 0.0).map(|(eq, _)| eq)
}
