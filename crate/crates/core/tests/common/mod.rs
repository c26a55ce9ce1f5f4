#![allow(dead_code)]

use crisis_core::degree::{degree, multiplicity, DegreeOptions};
use crisis_core::economy::{demand, SyntheticMarket};
use crisis_core::intrinsic::{reduced_hessian_map, singular_report, CertifyOptions};
use crisis_core::numeric::{singular_values, Bounds, FnMap};
use crisis_core::{certify_crisis, Economy, Equilibrium, Market, Price, Result, UtilitySpec, Verdict};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestError, TestRng, TestRunner};

pub const CASES: u32 = 1000;
pub const SEED: [u8; 32] = [42; 32];

pub fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &SEED))
}

pub fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

/// Closed-form reduced excess demand of the two-agent quasilinear economy
/// with exponent 8.
pub fn zbar(w1p: f64, w2: f64, p: f64) -> f64 {
    w1p / p - p.powf(-8.0 / 9.0) + p.powf(-1.0 / 9.0) - w2
}

fn g_prime(w1p: f64, p: f64) -> f64 {
    -w1p / (p * p) + (8.0 / 9.0) * p.powf(-17.0 / 9.0) - (1.0 / 9.0) * p.powf(-10.0 / 9.0)
}

/// Lower fold of the quasilinear economy at fixed `w1p`: the local minimum
/// of `p -> zbar(w1p, 0, p)` on `(0, 1)`, by bisection on its derivative.
/// Returns `(p*, w2*)`.
pub fn lower_fold(w1p: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (0.05, 1.0);
    assert!(g_prime(w1p, lo) < 0.0 && g_prime(w1p, hi) > 0.0, "no fold below p = 1 for w1p = {w1p}");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g_prime(w1p, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = 0.5 * (lo + hi);
    (p, zbar(w1p, 0.0, p))
}

/// `c * z(p, w)`.
#[derive(Debug, Clone)]
pub struct ScaledMarket<M> {
    pub inner: M,
    pub factor: f64,
}

impl<M: Market> Market for ScaledMarket<M> {
    fn goods(&self) -> usize {
        self.inner.goods()
    }
    fn endowment_vector(&self) -> DVector<f64> {
        self.inner.endowment_vector()
    }
    fn with_endowment_vector(&self, w: &DVector<f64>) -> Result<Self> {
        Ok(Self {
            inner: self.inner.with_endowment_vector(w)?,
            factor: self.factor,
        })
    }
    fn reduced_excess_demand(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inner.reduced_excess_demand(p)? * self.factor)
    }
    fn jacobian_reduced(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.inner.jacobian_reduced(p)? * self.factor)
    }
    fn endowment_jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.inner.endowment_jacobian(p)? * self.factor)
    }
    fn adjustable_endowments(&self) -> Vec<usize> {
        self.inner.adjustable_endowments()
    }
    fn in_domain(&self, p: &DVector<f64>) -> bool {
        self.inner.in_domain(p)
    }
}

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> std::result::Result<(), TestCaseError>) -> std::result::Result<u32, String> {
    match runner().run(&strategy, test) {
        Ok(()) => Ok(CASES),
        Err(TestError::Fail(reason, value)) => Err(format!("{reason} (minimal input {value:?})")),
        Err(TestError::Abort(reason)) => Err(format!("aborted: {reason}")),
    }
}

fn cobb_douglas_economy() -> impl Strategy<Value = Economy> {
    (2usize..=3, 2usize..=3).prop_flat_map(|(m, l)| {
        (
            prop::collection::vec(prop::collection::vec(0.2f64..3.0, l), m),
            prop::collection::vec(prop::collection::vec(0.1f64..3.0, l), m),
        )
            .prop_map(|(weights, endowments)| {
                let utilities = weights.into_iter().map(UtilitySpec::cobb_douglas).collect();
                Economy::new(utilities, endowments).expect("valid random economy")
            })
    })
}

fn quasilinear_economy() -> impl Strategy<Value = Economy> {
    (0.3f64..1.5, 0.3f64..1.5).prop_map(|(a, b)| Economy::quasilinear_pair(8.0, a, b).expect("valid economy"))
}

fn economy() -> impl Strategy<Value = Economy> {
    prop_oneof![cobb_douglas_economy(), quasilinear_economy()]
}

fn economy_with_prices() -> impl Strategy<Value = (Economy, Vec<f64>)> {
    economy().prop_flat_map(|e| {
        let n = e.goods() - 1;
        (Just(e), prop::collection::vec(0.2f64..5.0, n))
    })
    .prop_filter("demand must be interior", |(e, p)| {
        let h = 1e-5 * (1.0 + p.iter().map(|v| v * v).sum::<f64>().sqrt());
        [-h, 0.0, h].iter().all(|d| {
            let q: Vec<f64> = p.iter().map(|v| v + d).collect();
            e.reduced(&q).is_ok()
        })
    })
}

pub fn walras_law() -> std::result::Result<u32, String> {
    run(economy_with_prices(), |(e, p)| {
        let price = Price::from_free(&p).unwrap();
        let z = e.excess_demand(&price).unwrap();
        let wealth: f64 = e.endowments().iter().map(|w| price.dot(w)).sum();
        let value = price.dot(&z);
        prop_assert!(value.abs() <= 1e-12 * wealth, "p.z = {value} with aggregate wealth {wealth}");
        Ok(())
    })
}

pub fn budget_exactness() -> std::result::Result<u32, String> {
    run(economy_with_prices(), |(e, p)| {
        let price = Price::from_free(&p).unwrap();
        for (u, w) in e.utilities().iter().zip(e.endowments()) {
            let wealth = price.dot(w);
            let x = demand(u, &price, wealth).unwrap();
            prop_assert!(x.iter().all(|v| *v > 0.0));
            prop_assert!((price.dot(&x) - wealth).abs() <= 1e-12 * wealth);
        }
        Ok(())
    })
}

/// Analytic reduced Jacobian against central differences with step
/// `1e-5 (1 + |p|)`, relative tolerance `1e-5`.
pub fn jacobian_agreement() -> std::result::Result<u32, String> {
    run(economy_with_prices(), |(e, p)| {
        let p = DVector::from_vec(p);
        let analytic = e.jacobian_reduced(&p).unwrap();
        let h = 1e-5 * (1.0 + p.norm());
        let mut fd = DMatrix::zeros(p.len(), p.len());
        for j in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[j] += h;
            b[j] -= h;
            let col = (e.reduced_excess_demand(&a).unwrap() - e.reduced_excess_demand(&b).unwrap()) / (2.0 * h);
            fd.set_column(j, &col);
        }
        let err = (&analytic - &fd).norm();
        prop_assert!(err <= 1e-5 * analytic.norm().max(1e-300), "|J - J_fd| = {err}, |J| = {}", analytic.norm());
        Ok(())
    })
}

/// Signs of the proper and reduced excess demand agree componentwise.
pub fn proper_reduced_agreement() -> std::result::Result<u32, String> {
    run(economy_with_prices(), |(e, p)| {
        let reduced = e.reduced(&p).unwrap();
        let proper = e.proper(&p).unwrap();
        for (r, q) in reduced.iter().zip(&proper) {
            prop_assert_eq!(r.signum(), q.signum());
            let k = q / r;
            prop_assert!(k > 1.0);
        }
        Ok(())
    })
}

fn orthogonal(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_filter_map("singular draw", move |v| {
        let a = DMatrix::from_vec(n, n, v);
        (singular_values(&a).last().copied().unwrap_or(0.0) > 1e-3).then(|| a.qr().q())
    })
}

/// Random `n x n` Jacobian of rank `n - k` and random Hessian tensor.
fn singular_jet() -> impl Strategy<Value = (DMatrix<f64>, Vec<DMatrix<f64>>, usize)> {
    (2usize..=4).prop_flat_map(|n| {
        (1usize..n).prop_flat_map(move |k| {
            (
                orthogonal(n),
                orthogonal(n),
                prop::collection::vec(0.5f64..3.0, n - k),
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, n * n), n),
                Just(k),
            )
                .prop_map(move |(u, v, s, h, k)| {
                    let mut d = DMatrix::zeros(n, n);
                    for (i, si) in s.iter().enumerate() {
                        d[(i, i)] = *si;
                    }
                    let hessian = h
                        .into_iter()
                        .map(|e| {
                            let m = DMatrix::from_vec(n, n, e);
                            (&m + m.transpose()) * 0.5
                        })
                        .collect();
                    (&u * d * v.transpose(), hessian, k)
                })
        })
    })
}

/// Singular values of the intrinsic derivative do not depend on the choice
/// of orthonormal kernel and cokernel bases.
pub fn basis_invariance() -> std::result::Result<u32, String> {
    let strategy = singular_jet().prop_flat_map(|(j, h, k)| {
        let c = j.nrows() - (j.ncols() - k);
        (Just(j), Just(h), orthogonal(k), orthogonal(c), prop::collection::vec(-1.0f64..1.0, k))
    });
    run(strategy, |(j, h, rk, rc, v)| {
        let v = DVector::from_vec(v);
        prop_assume!(v.norm() > 1e-2);
        let report = singular_report(&j);
        prop_assume!(report.kernel_dim() == rk.nrows() && report.cokernel_dim() == rc.nrows());
        let a = reduced_hessian_map(&h, &report, &v);

        let mut rotated = report.clone();
        rotated.kernel_basis = &report.kernel_basis * &rk;
        rotated.cokernel_basis = &report.cokernel_basis * &rc;
        let b = reduced_hessian_map(&h, &rotated, &(rk.transpose() * &v));

        let (sa, sb) = (singular_values(&a), singular_values(&b));
        let unit = sa.first().copied().unwrap_or(0.0).max(1.0);
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!((x - y).abs() <= 1e-10 * unit, "singular values {sa:?} vs {sb:?}");
        }
        Ok(())
    })
}

fn scalar(f: impl Fn(f64) -> f64 + Send + Sync + 'static, df: impl Fn(f64) -> f64 + Send + Sync + 'static) -> FnMap<'static> {
    FnMap::square(1, move |x| dv(&[f(x[0])])).with_jacobian(move |x| DMatrix::from_element(1, 1, df(x[0])))
}

fn deg(f: &FnMap, lo: f64, hi: f64) -> i32 {
    let opts = DegreeOptions {
        grid: Some(16),
        ..DegreeOptions::default()
    };
    let b = Bounds::new(vec![lo], vec![hi]).unwrap();
    degree(f, &b, &dv(&[0.0]), &opts).unwrap().value
}

/// Additivity and excision of the degree for `x^3` and `x^2 - c`.
pub fn degree_additivity_excision() -> std::result::Result<u32, String> {
    let strategy = (0.01f64..4.0, 0.1f64..3.0, 0.1f64..3.0, -0.9f64..0.9, 0.05f64..0.95);
    run(strategy, |(c, a, b, m, shrink)| {
        let r = c.sqrt();
        let quad = scalar(move |x| x * x - c, |x| 2.0 * x);
        let (lo, hi) = (-(r + a), r + b);
        let split = m * r;
        prop_assert_eq!(deg(&quad, lo, hi), 0);
        prop_assert_eq!(deg(&quad, lo, split), -1);
        prop_assert_eq!(deg(&quad, split, hi), 1);
        // excision: dropping zero-free margins leaves the degree unchanged
        prop_assert_eq!(deg(&quad, split, r + shrink * b), 1);

        let cube = scalar(|x| x * x * x, |x| 3.0 * x * x);
        let (lo, hi) = (-a, b);
        prop_assert_eq!(deg(&cube, lo, hi), 1);
        prop_assert_eq!(deg(&cube, lo, hi) , deg(&cube, -shrink * a, shrink * b));
        let cut = m.abs().max(0.05) * b;
        prop_assert_eq!(deg(&cube, lo, cut) + deg(&cube, cut, hi), 1);
        let opts = DegreeOptions {
            grid: Some(16),
            ..DegreeOptions::default()
        };
        prop_assert_eq!(multiplicity(&cube, &dv(&[0.0]), a, &opts).unwrap(), 1);
        Ok(())
    })
}

#[derive(Debug, Clone)]
pub enum CovarianceCase {
    QuasilinearFold(f64),
    Cubic,
    FoldNormalForm,
    /// `(w1p, p)`: the quasilinear economy whose `w2` makes `p` an equilibrium.
    Regular(f64, f64),
}

fn verdicts<M: Market>(eq: &Equilibrium<M>) -> Vec<Verdict> {
    [1e-3, 1.0, 1e3]
        .iter()
        .map(|&factor| {
            let market = ScaledMarket {
                inner: eq.market.clone(),
                factor,
            };
            let scaled = Equilibrium::at(&market, eq.price.clone()).unwrap();
            certify_crisis(&scaled, None, &CertifyOptions::default()).unwrap().verdict
        })
        .collect()
}

/// The crisis verdict is unchanged when the excess demand is multiplied by
/// `c` in `{1e-3, 1, 1e3}`.
pub fn verdict_scale_covariance() -> std::result::Result<u32, String> {
    let strategy = prop_oneof![
        (0.70f64..0.775).prop_map(CovarianceCase::QuasilinearFold),
        Just(CovarianceCase::Cubic),
        Just(CovarianceCase::FoldNormalForm),
        (0.3f64..1.5, 0.2f64..5.0).prop_map(|(a, p)| CovarianceCase::Regular(a, p)),
    ];
    run(strategy, |case| {
        let (found, expected) = match case {
            CovarianceCase::QuasilinearFold(w1p) => {
                let (p, w2) = lower_fold(w1p);
                let e = Economy::quasilinear_pair(8.0, w1p, w2).unwrap();
                (verdicts(&Equilibrium::at(&e, dv(&[p])).unwrap()), Some(Verdict::UnavoidableCrisis))
            }
            CovarianceCase::Cubic => (
                verdicts(&Equilibrium::at(&SyntheticMarket::cubic(1.0), dv(&[1.0])).unwrap()),
                Some(Verdict::CriterionFails),
            ),
            CovarianceCase::FoldNormalForm => (
                verdicts(&Equilibrium::at(&SyntheticMarket::fold(0.0), dv(&[0.0])).unwrap()),
                Some(Verdict::UnavoidableCrisis),
            ),
            CovarianceCase::Regular(a, p) => {
                let w2 = zbar(a, 0.0, p);
                prop_assume!(w2 > 0.05);
                let e = Economy::quasilinear_pair(8.0, a, w2).unwrap();
                (verdicts(&Equilibrium::at(&e, dv(&[p])).unwrap()), None)
            }
        };
        prop_assert!(found.iter().all(|v| *v == found[0]), "verdicts {found:?}");
        if let Some(v) = expected {
            prop_assert_eq!(found[0], v);
        }
        Ok(())
    })
}
