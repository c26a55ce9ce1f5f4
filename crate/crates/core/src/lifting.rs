//! Lifting endowment paths to equilibrium paths, and the experiment showing
//! that prices cannot be restored around an unavoidable crisis.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::economy::{Economy, Market};
use crate::error::{Error, Result};
use crate::intrinsic::{certify_crisis, CertifyOptions, CrisisCertificate, Verdict};
use crate::manifold::{enumerate_fiber, locate_fold_along, projection_differential, Equilibrium, PriceBox};
use crate::numeric::{max_abs, newton, newton_step, FullSvd, NewtonOptions, RANK_TOL};

/// Piecewise linear path through endowment space; each leg takes an equal
/// share of the parameter interval `[0, 1]`.
#[derive(Debug, Clone)]
pub struct EconomyPath<M: Market = Economy> {
    base: M,
    waypoints: Vec<DVector<f64>>,
    /// Largest parameter step taken by the continuation is `1 / samples`.
    pub samples: usize,
}

impl<M: Market> EconomyPath<M> {
    pub fn straight(start: &M, end: &M, samples: usize) -> Result<Self> {
        Self::polyline(&[start.clone(), end.clone()], samples)
    }

    pub fn polyline(markets: &[M], samples: usize) -> Result<Self> {
        if markets.len() < 2 {
            return Err(Error::InvalidInput("a path needs at least two economies".into()));
        }
        if samples == 0 {
            return Err(Error::InvalidInput("a path needs at least one sample".into()));
        }
        let base = markets[0].clone();
        if markets.iter().any(|m| !base.same_structure(m)) {
            return Err(Error::InvalidEconomy(
                "path endpoints must share agents, goods and preferences".into(),
            ));
        }
        Ok(Self {
            waypoints: markets.iter().map(|m| m.endowment_vector()).collect(),
            base,
            samples,
        })
    }

    /// Constant path.
    pub fn constant(market: &M, samples: usize) -> Result<Self> {
        Self::straight(market, market, samples)
    }

    pub fn legs(&self) -> usize {
        self.waypoints.len() - 1
    }

    fn leg_of(&self, t: f64) -> usize {
        ((t * self.legs() as f64).floor() as usize).min(self.legs() - 1)
    }

    /// Parameter at which leg `k` ends.
    pub fn leg_end(&self, k: usize) -> f64 {
        if k + 1 == self.legs() {
            1.0
        } else {
            (k + 1) as f64 / self.legs() as f64
        }
    }

    pub fn endowment_at(&self, t: f64) -> DVector<f64> {
        let k = self.leg_of(t);
        let s = t * self.legs() as f64 - k as f64;
        &self.waypoints[k] * (1.0 - s) + &self.waypoints[k + 1] * s
    }

    /// `dw/dt` on the leg containing `t`.
    pub fn velocity(&self, t: f64) -> DVector<f64> {
        let k = self.leg_of(t);
        (&self.waypoints[k + 1] - &self.waypoints[k]) * self.legs() as f64
    }

    pub fn at(&self, t: f64) -> Result<M> {
        self.base.with_endowment_vector(&self.endowment_at(t))
    }

    pub fn start(&self) -> Result<M> {
        self.at(0.0)
    }

    pub fn end(&self) -> Result<M> {
        self.at(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct LiftOptions {
    /// Largest change of the price vector between accepted samples.
    pub max_price_step: f64,
    pub min_step: f64,
    pub crisis_tol: f64,
    pub corrector_tol: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            max_price_step: 0.02,
            min_step: 1e-10,
            crisis_tol: RANK_TOL,
            corrector_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFlag {
    Start,
    Step,
    End,
    Crisis,
}

impl TraceFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceFlag::Start => "start",
            TraceFlag::Step => "step",
            TraceFlag::End => "end",
            TraceFlag::Crisis => "crisis",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TracePoint {
    pub t: f64,
    pub price: DVector<f64>,
    pub sigma_min: f64,
    pub residual: f64,
    pub flag: TraceFlag,
}

#[derive(Debug, Clone)]
pub struct LiftResult {
    pub trace: Vec<TracePoint>,
    pub completed: bool,
    /// Path parameter at which the lift met a critical equilibrium.
    pub crisis_hit: Option<f64>,
    /// `|p_end - p_target|` for completed lifts with a target.
    pub endpoint_distance: Option<f64>,
}

impl LiftResult {
    pub fn prices(&self) -> Vec<DVector<f64>> {
        self.trace.iter().map(|s| s.price.clone()).collect()
    }

    pub fn end_price(&self) -> &DVector<f64> {
        &self.trace.last().expect("trace starts with the initial point").price
    }

    pub fn max_residual(&self) -> f64 {
        self.trace.iter().map(|s| s.residual).fold(0.0, f64::max)
    }

    /// CSV rows `t,p_1..p_n,sigma_min,flag`.
    pub fn to_csv(&self) -> String {
        let n = self.trace.first().map_or(0, |s| s.price.len());
        let cols: Vec<String> = (1..=n).map(|i| format!("p_{i}")).collect();
        let mut out = format!("t,{},sigma_min,flag\n", cols.join(","));
        for s in &self.trace {
            let p: Vec<String> = s.price.iter().map(|v| format!("{v:.12}")).collect();
            writeln!(out, "{:.12},{},{:.6e},{}", s.t, p.join(","), s.sigma_min, s.flag.as_str())
                .expect("string write");
        }
        out
    }
}

fn sigma_min(jp: &DMatrix<f64>) -> f64 {
    FullSvd::new(jp).values().last().copied().unwrap_or(0.0)
}

struct Lifter<'a, M: Market> {
    path: &'a EconomyPath<M>,
    opts: &'a LiftOptions,
}

impl<M: Market> Lifter<'_, M> {
    fn point(&self, t: f64, price: DVector<f64>, flag: TraceFlag) -> Result<(TracePoint, f64)> {
        let m = self.path.at(t)?;
        let jp = m.jacobian_reduced(&price)?;
        let scale = m.reference_scale(&price)?;
        let point = TracePoint {
            t,
            residual: max_abs(&m.reduced_excess_demand(&price)?),
            sigma_min: sigma_min(&jp),
            price,
            flag,
        };
        Ok((point, scale))
    }

    fn corrector(&self, t: f64, guess: &DVector<f64>) -> Option<DVector<f64>> {
        let m = self.path.at(t).ok()?;
        newton(
            |p| Ok((m.reduced_excess_demand(p)?, m.jacobian_reduced(p)?)),
            guess,
            NewtonOptions {
                tol: self.opts.corrector_tol,
                max_iter: 12,
                polish: true,
            },
            |p| m.in_domain(p),
        )
        .ok()
        .map(|o| o.x)
    }

    /// Fold of the projection on the current leg ahead of `t`, if the
    /// augmented solve finds one within `reach` and near `price`.
    fn fold_ahead(&self, t: f64, price: &DVector<f64>, reach: f64) -> Option<(f64, DVector<f64>)> {
        let m = self.path.at(t).ok()?;
        let direction = self.path.velocity(t);
        let (eq, s) = locate_fold_along(&m, &direction, price, 0.0).ok()?;
        let close = (&eq.price - price).norm() <= 4.0 * self.opts.max_price_step;
        (s >= -1e-9 && s <= reach && close).then(|| (t + s.max(0.0), eq.price))
    }
}

/// Continues the equilibrium `(p_start, path(0))` along the path.
pub fn lift_path<M: Market>(
    path: &EconomyPath<M>,
    p_start: &DVector<f64>,
    p_target: Option<&DVector<f64>>,
    opts: &LiftOptions,
) -> Result<LiftResult> {
    let lifter = Lifter { path, opts };
    let m0 = path.start()?;
    let start = crate::manifold::solve_equilibrium(&m0, p_start)?;
    if start.critical {
        return Err(Error::Precondition(format!(
            "starting equilibrium {:?} is critical",
            start.price.as_slice()
        )));
    }
    let (first, _) = lifter.point(0.0, start.price, TraceFlag::Start)?;
    let mut trace = vec![first];
    let max_dt = 1.0 / path.samples as f64;
    let mut dt = max_dt;
    let mut t = 0.0;
    let mut price = trace[0].price.clone();

    while t < 1.0 {
        let leg_end = path.leg_end(path.leg_of(t));
        let m = path.at(t)?;
        let jp = m.jacobian_reduced(&price)?;
        let jw = m.endowment_jacobian(&price)?;
        let rhs = &jw * path.velocity(t);
        let tangent = -newton_step(&jp, &rhs)?.0;

        let mut h = dt.min(leg_end - t).min(max_dt);
        let speed = tangent.norm();
        if speed * h > opts.max_price_step {
            h = opts.max_price_step / speed;
        }
        let t_next = if leg_end - t - h <= 1e-14 { leg_end } else { t + h };
        let predicted = &price + &tangent * (t_next - t);
        let corrected = lifter
            .corrector(t_next, &predicted)
            .filter(|p| (p - &predicted).norm() <= opts.max_price_step);

        match corrected {
            Some(p_next) => {
                let (point, scale) = lifter.point(t_next, p_next.clone(), TraceFlag::Step)?;
                if point.sigma_min <= opts.crisis_tol * scale {
                    trace.push(TracePoint {
                        flag: TraceFlag::Crisis,
                        ..point
                    });
                    return Ok(LiftResult {
                        trace,
                        completed: false,
                        crisis_hit: Some(t_next),
                        endpoint_distance: None,
                    });
                }
                trace.push(point);
                t = t_next;
                price = p_next;
                dt = (2.0 * h).min(max_dt);
            }
            None => {
                if let Some((t_fold, p_fold)) = lifter.fold_ahead(t, &price, leg_end - t) {
                    if t_fold <= t + 2.0 * h {
                        let (point, _) = lifter.point(t_fold, p_fold, TraceFlag::Crisis)?;
                        trace.push(point);
                        return Ok(LiftResult {
                            trace,
                            completed: false,
                            crisis_hit: Some(t_fold),
                            endpoint_distance: None,
                        });
                    }
                }
                dt = 0.5 * h;
                if dt < opts.min_step {
                    return Err(Error::StepCollapse { t, step: dt });
                }
            }
        }
    }
    if let Some(last) = trace.last_mut() {
        last.flag = TraceFlag::End;
    }
    let endpoint_distance = p_target.map(|q| (&price - q).norm());
    Ok(LiftResult {
        trace,
        completed: true,
        crisis_hit: None,
        endpoint_distance,
    })
}

/// Distance from `p` to the nearest other equilibrium of `market` in `search_box`
/// (infinite when `p` is alone in its fiber).
pub fn inter_branch_gap<M: Market>(market: &M, p: &DVector<f64>, search_box: &PriceBox, grid: usize) -> f64 {
    enumerate_fiber(market, search_box, grid).separation_from(p)
}

#[derive(Debug, Clone)]
pub struct RestoreOptions {
    pub search_box: Option<PriceBox>,
    pub grid: usize,
    pub samples: usize,
    pub lift: LiftOptions,
    pub certify: CertifyOptions,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        Self {
            search_box: None,
            grid: 200,
            samples: 50,
            lift: LiftOptions::default(),
            certify: CertifyOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RestoreReport<M: Market = Economy> {
    pub certificate: CrisisCertificate,
    /// Regular equilibria on either side of the crisis; `det_sign` is +1 for
    /// `plus` and -1 for `minus`.
    pub plus: Equilibrium<M>,
    pub minus: Equilibrium<M>,
    /// Inter-branch gap at `plus.market`.
    pub gap: f64,
    /// Lift of `minus` to `plus.market` along a path through the
    /// multiplicity region.
    pub avoiding: LiftResult,
    /// Lift of `minus` along a path leaving the multiplicity region.
    pub crossing: LiftResult,
    pub crossing_path: EconomyPath<M>,
}

impl<M: Market> RestoreReport<M> {
    /// No fiber point other than `plus` was found at its economy.
    pub fn inconclusive(&self) -> bool {
        !self.gap.is_finite()
    }

    /// Every lift either meets a crisis or ends at least `0.9 * gap` away
    /// from `plus`.
    pub fn alternative_holds(&self) -> bool {
        [&self.avoiding, &self.crossing].iter().all(|l| {
            l.crisis_hit.is_some() || l.endpoint_distance.is_some_and(|d| d >= 0.9 * self.gap)
        })
    }
}

/// Moves the price of `eq` to `price` and corrects the adjustable endowments
/// (minimum-norm Newton) so the pair stays an equilibrium.
pub fn equilibrium_with_price<M: Market>(eq: &Equilibrium<M>, price: &DVector<f64>) -> Result<Equilibrium<M>> {
    let cols = eq.market.adjustable_endowments();
    let w0 = eq.market.endowment_vector();
    let embed = |c: &DVector<f64>| {
        let mut w = w0.clone();
        for (k, &i) in cols.iter().enumerate() {
            w[i] += c[k];
        }
        w
    };
    let out = newton(
        |c| {
            let m = eq.market.with_endowment_vector(&embed(c))?;
            let jw = m.endowment_jacobian(price)?;
            let jc = DMatrix::from_fn(jw.nrows(), cols.len(), |r, k| jw[(r, cols[k])]);
            Ok((m.reduced_excess_demand(price)?, jc))
        },
        &DVector::zeros(cols.len()),
        NewtonOptions {
            tol: 1e-13,
            max_iter: 50,
            polish: true,
        },
        |c| eq.market.with_endowment_vector(&embed(c)).is_ok(),
    )?;
    let market = eq.market.with_endowment_vector(&embed(&out.x))?;
    Equilibrium::at(&market, price.clone())
}

/// Builds regular equilibria `e_+`, `e_-` at distance `radius` from a
/// certified crisis along its kernel direction, then lifts `e_-` to the
/// economy of `e_+` once along a path that stays in the multiplicity region
/// and once along a path that leaves it.
pub fn restore_prices_experiment<M: Market>(
    crisis: &Equilibrium<M>,
    radius: f64,
    opts: &RestoreOptions,
) -> Result<RestoreReport<M>> {
    let certificate = certify_crisis(crisis, None, &opts.certify)?;
    if certificate.verdict != Verdict::UnavoidableCrisis {
        return Err(Error::CertificationMissing);
    }
    let report = projection_differential(crisis)?;
    let u = &report.kernel_basis * &certificate.direction_v;
    let mut a = equilibrium_with_price(crisis, &(&crisis.price + &u * radius))?;
    let mut b = equilibrium_with_price(crisis, &(&crisis.price - &u * radius))?;
    if a.det_sign < b.det_sign {
        std::mem::swap(&mut a, &mut b);
    }
    if a.critical || b.critical || a.det_sign != 1 || b.det_sign != -1 {
        return Err(Error::Precondition(format!(
            "perturbed equilibria are not regular of opposite sign ({}, {})",
            a.det_sign, b.det_sign
        )));
    }
    let (plus, minus) = (a, b);

    let search_box = opts
        .search_box
        .clone()
        .unwrap_or_else(|| plus.market.default_price_box());
    let gap = inter_branch_gap(&plus.market, &plus.price, &search_box, opts.grid);

    let avoiding_path = EconomyPath::straight(&minus.market, &plus.market, opts.samples)?;
    let avoiding = lift_path(&avoiding_path, &minus.price, Some(&plus.price), &opts.lift)?;

    // Leave the multiplicity region across the fold: move the crisis economy
    // against the side on which e_+ and e_- lie, along the normal of the
    // critical values restricted to the adjustable endowments.
    let jw = crisis.market.endowment_jacobian(&crisis.price)?;
    let coker = &report.cokernel_basis;
    let mut normal = DVector::zeros(jw.ncols());
    for &i in &crisis.market.adjustable_endowments() {
        normal[i] = (coker.transpose() * jw.column(i))[0];
    }
    if normal.norm() == 0.0 {
        return Err(Error::Precondition("adjustable endowments do not move the critical value".into()));
    }
    let normal = normal.normalize();
    let w_star = crisis.market.endowment_vector();
    let side = (plus.market.endowment_vector() - &w_star).dot(&normal);
    let offset = 4.0 * (plus.market.endowment_vector() - &w_star).norm().max(1e-6);
    let w_out = &w_star - &normal * (side.signum() * offset);
    let outside = crisis.market.with_endowment_vector(&w_out)?;
    let crossing_path = EconomyPath::polyline(
        &[minus.market.clone(), outside, plus.market.clone()],
        opts.samples,
    )?;
    let crossing = lift_path(&crossing_path, &minus.price, Some(&plus.price), &opts.lift)?;

    Ok(RestoreReport {
        certificate,
        plus,
        minus,
        gap,
        avoiding,
        crossing,
        crossing_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::SyntheticMarket;
    use crate::manifold::{enumerate_fiber, locate_fold, solve_equilibrium};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn quasilinear(w1p: f64, w2: f64) -> Economy {
        Economy::quasilinear_pair(8.0, w1p, w2).unwrap()
    }

    #[test]
    fn constant_path_keeps_prices() {
        let e = quasilinear(0.766, 0.766);
        let path = EconomyPath::constant(&e, 20).unwrap();
        let p0 = solve_equilibrium(&e, &dv(&[1.0])).unwrap().price;
        let r = lift_path(&path, &p0, Some(&dv(&[1.5])), &LiftOptions::default()).unwrap();
        assert!(r.completed);
        assert!(r.prices().iter().all(|p| (p - &p0).norm() < 1e-12));
        assert!((r.endpoint_distance.unwrap() - (1.5 - p0[0]).abs()).abs() < 1e-12);
        assert_eq!(r.trace.last().unwrap().flag, TraceFlag::End);
    }

    #[test]
    fn path_interpolation_and_validation() {
        let a = quasilinear(0.74, 0.74);
        let b = quasilinear(0.80, 0.74);
        let c = quasilinear(0.80, 0.80);
        let path = EconomyPath::polyline(&[a.clone(), b, c], 10).unwrap();
        let mid = path.at(0.25).unwrap();
        assert!((mid.endowment(0, 1) - 0.77).abs() < 1e-15);
        assert!((path.at(1.0).unwrap().endowment(1, 0) - 0.80).abs() < 1e-15);
        assert_eq!(path.leg_end(0), 0.5);
        let cd = Economy::symmetric_cobb_douglas(1e-3).unwrap();
        assert!(EconomyPath::straight(&a, &cd, 10).is_err());
    }

    #[test]
    fn regular_lift_tracks_the_closed_form() {
        let path = EconomyPath::straight(&SyntheticMarket::cubic(1.001), &SyntheticMarket::cubic(1.5), 10).unwrap();
        let r = lift_path(&path, &dv(&[1.1]), None, &LiftOptions::default()).unwrap();
        assert!(r.completed);
        for s in &r.trace {
            let w2 = 1.001 + s.t * 0.499;
            assert!((s.price[0] - (1.0 + (w2 - 1.0).cbrt())).abs() < 1e-8);
            assert!(s.residual <= 1e-9);
        }
    }

    #[test]
    fn fold_crossing_is_reported() {
        let path = EconomyPath::straight(&SyntheticMarket::fold(1.0), &SyntheticMarket::fold(-0.5), 10).unwrap();
        let r = lift_path(&path, &dv(&[1.0]), None, &LiftOptions::default()).unwrap();
        assert!(!r.completed);
        assert!((r.crisis_hit.unwrap() - 2.0 / 3.0).abs() < 1e-8);
        assert_eq!(r.trace.last().unwrap().flag, TraceFlag::Crisis);
    }

    #[test]
    fn loop_around_the_cusp_switches_branch() {
        let corners = [(0.74, 0.74), (0.74, 0.80), (0.80, 0.80), (0.80, 0.74), (0.74, 0.74)];
        let markets: Vec<Economy> = corners.iter().map(|&(a, b)| quasilinear(a, b)).collect();
        let e0 = &markets[0];
        let fiber = enumerate_fiber(e0, &PriceBox::default_for(1), 200);
        assert_eq!(fiber.len(), 3);
        let low = fiber.equilibria[0].price.clone();
        let high = fiber.equilibria[2].price.clone();
        let mut completed = 0;
        for (path_markets, start) in [(markets.clone(), &low), (markets.iter().rev().cloned().collect(), &high)] {
            let path = EconomyPath::polyline(&path_markets, 40).unwrap();
            let r = lift_path(&path, start, Some(start), &LiftOptions::default()).unwrap();
            if r.completed {
                completed += 1;
                let gap = inter_branch_gap(e0, start, &PriceBox::default_for(1), 200);
                assert!(r.endpoint_distance.unwrap() >= 0.9 * gap);
                assert!(r.max_residual() <= 1e-9);
            } else {
                assert!(r.crisis_hit.is_some());
            }
        }
        assert!(completed >= 1);
    }

    #[test]
    fn restore_on_the_fold_normal_form() {
        let crisis = Equilibrium::at(&SyntheticMarket::fold(0.0), dv(&[0.0])).unwrap();
        let r = restore_prices_experiment(&crisis, 0.1, &RestoreOptions::default()).unwrap();
        assert!((r.plus.price[0] - 0.1).abs() < 1e-12);
        assert!((r.minus.price[0] + 0.1).abs() < 1e-12);
        assert!((r.plus.market.endowment[0] - 0.01).abs() < 1e-12);
        assert!((r.gap - 0.2).abs() < 1e-9);
        assert!(r.avoiding.completed);
        assert!(r.crossing.crisis_hit.is_some());
        assert!(r.alternative_holds());
    }

    #[test]
    fn restore_requires_a_certificate() {
        let crisis = Equilibrium::at(&SyntheticMarket::cubic(1.0), dv(&[1.0])).unwrap();
        let err = restore_prices_experiment(&crisis, 0.1, &RestoreOptions::default()).unwrap_err();
        assert!(matches!(err, Error::CertificationMissing));
    }

    #[test]
    fn restore_around_the_quasilinear_fold() {
        let fold = locate_fold(&quasilinear(0.766, 0.766), &dv(&[0.54]), 2).unwrap();
        let r = restore_prices_experiment(&fold, 1e-2, &RestoreOptions::default()).unwrap();
        assert_eq!((r.plus.det_sign, r.minus.det_sign), (1, -1));
        assert!((&r.plus.price - &fold.price).norm() <= 1e-2 + 1e-12);
        assert!(r.avoiding.completed);
        assert!(r.avoiding.endpoint_distance.unwrap() >= 0.9 * r.gap);
        assert!(r.crossing.crisis_hit.is_some());
        assert!(r.alternative_holds());
    }
}
