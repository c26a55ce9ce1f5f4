//! Pure exchange economies: individual demand, aggregate excess demand and
//! its reduced and proper variants, with analytic derivatives.
//!
//! Prices are normalized so that the last good is the numeraire (price 1).
//! "Free prices" are the first `l - 1` coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{fd_step, hessian_with_step, Bounds, SmoothMap};

/// Which of the two quasilinear forms an agent uses.
///
/// `First` is linear in good 1: `u(x, y) = x - y^(-alpha) / alpha`.
/// `Second` is linear in good 2: `u(x, y) = y - x^(-alpha) / alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilitySpec {
    /// `u(x) = sum_k a_k ln x_k`.
    CobbDouglas { weights: Vec<f64> },
    /// Two-good quasilinear utility.
    Quasilinear { alpha: f64, role: Role },
}

impl UtilitySpec {
    pub fn cobb_douglas(weights: impl Into<Vec<f64>>) -> Self {
        UtilitySpec::CobbDouglas {
            weights: weights.into(),
        }
    }

    pub fn quasilinear(alpha: f64, role: Role) -> Self {
        UtilitySpec::Quasilinear { alpha, role }
    }

    /// Number of goods the utility is defined on.
    pub fn goods(&self) -> usize {
        match self {
            UtilitySpec::CobbDouglas { weights } => weights.len(),
            UtilitySpec::Quasilinear { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            UtilitySpec::CobbDouglas { weights } => {
                if weights.len() < 2 {
                    return Err(Error::InvalidEconomy(
                        "Cobb-Douglas utility needs at least two goods".into(),
                    ));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(Error::InvalidEconomy(
                        "Cobb-Douglas weights must be positive and finite".into(),
                    ));
                }
            }
            UtilitySpec::Quasilinear { alpha, .. } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(Error::InvalidEconomy(format!(
                        "quasilinear alpha must be positive, got {alpha}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Utility level; `-inf` outside the positive orthant.
    pub fn value(&self, x: &[f64]) -> f64 {
        if x.iter().any(|v| *v <= 0.0) {
            return f64::NEG_INFINITY;
        }
        match self {
            UtilitySpec::CobbDouglas { weights } => {
                weights.iter().zip(x).map(|(a, xk)| a * xk.ln()).sum()
            }
            UtilitySpec::Quasilinear { alpha, role } => match role {
                Role::First => x[0] - x[1].powf(-alpha) / alpha,
                Role::Second => x[1] - x[0].powf(-alpha) / alpha,
            },
        }
    }
}

/// Normalized price vector: strictly positive, last coordinate exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Price {
    values: Vec<f64>,
}

impl Price {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidPrice("need at least two goods".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidPrice(format!(
                "prices must be positive and finite: {values:?}"
            )));
        }
        if values[values.len() - 1] != 1.0 {
            return Err(Error::InvalidPrice("numeraire price must be 1".into()));
        }
        Ok(Self { values })
    }

    /// Builds the price `(p_free, 1)`.
    pub fn from_free(free: &[f64]) -> Result<Self> {
        let mut values = free.to_vec();
        values.push(1.0);
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn free(&self) -> &[f64] {
        &self.values[..self.values.len() - 1]
    }

    pub fn goods(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.values.iter().zip(x).map(|(p, v)| p * v).sum()
    }
}

/// Demand together with its derivatives with respect to the free prices
/// (at fixed wealth) and to wealth.
#[derive(Debug, Clone)]
pub struct DemandJet {
    pub bundle: Vec<f64>,
    /// `l x (l-1)`.
    pub d_price: DMatrix<f64>,
    /// `l`.
    pub d_wealth: Vec<f64>,
}

/// Utility-maximizing bundle on the budget set `{x > 0 : p.x = w}`.
pub fn demand(u: &UtilitySpec, p: &Price, w: f64) -> Result<Vec<f64>> {
    demand_jet(u, p, w).map(|j| j.bundle)
}

pub fn demand_jet(u: &UtilitySpec, p: &Price, w: f64) -> Result<DemandJet> {
    if !(w.is_finite() && w > 0.0) {
        return Err(Error::NoInteriorMaximum {
            agent: None,
            detail: format!("wealth must be positive, got {w}"),
        });
    }
    let l = p.goods();
    if u.goods() != l {
        return Err(Error::InvalidInput(format!(
            "utility defined on {} goods, price has {l}",
            u.goods()
        )));
    }
    let pv = p.values();
    match u {
        UtilitySpec::CobbDouglas { weights } => {
            let total: f64 = weights.iter().sum();
            let bundle: Vec<f64> = weights
                .iter()
                .zip(pv)
                .map(|(a, pk)| a * w / (pk * total))
                .collect();
            let mut d_price = DMatrix::zeros(l, l - 1);
            for k in 0..l - 1 {
                d_price[(k, k)] = -bundle[k] / pv[k];
            }
            let d_wealth = weights.iter().zip(pv).map(|(a, pk)| a / (pk * total)).collect();
            Ok(DemandJet {
                bundle,
                d_price,
                d_wealth,
            })
        }
        UtilitySpec::Quasilinear { alpha, role } => {
            let price = pv[0];
            let beta = 1.0 / (alpha + 1.0);
            let mut d_price = DMatrix::zeros(2, 1);
            let (bundle, d_wealth) = match role {
                Role::First => {
                    // marginal condition y^(-alpha-1) = 1/p
                    let y = price.powf(beta);
                    let x = (w - y) / price;
                    d_price[(0, 0)] = -w / (price * price) + (1.0 - beta) * price.powf(beta - 2.0);
                    d_price[(1, 0)] = beta * price.powf(beta - 1.0);
                    (vec![x, y], vec![1.0 / price, 0.0])
                }
                Role::Second => {
                    // marginal condition x^(-alpha-1) = p
                    let x = price.powf(-beta);
                    let y = w - price * x;
                    d_price[(0, 0)] = -beta * price.powf(-beta - 1.0);
                    d_price[(1, 0)] = -(1.0 - beta) * price.powf(-beta);
                    (vec![x, y], vec![0.0, 1.0])
                }
            };
            if bundle.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::NoInteriorMaximum {
                    agent: None,
                    detail: format!("quasilinear demand {bundle:?} at price {price}, wealth {w}"),
                });
            }
            Ok(DemandJet {
                bundle,
                d_price,
                d_wealth,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EconomyFile {
    m: usize,
    l: usize,
    utilities: Vec<UtilitySpec>,
    endowments: Vec<Vec<f64>>,
}

/// A pure exchange economy with `m` agents and `l` goods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EconomyFile", into = "EconomyFile")]
pub struct Economy {
    utilities: Vec<UtilitySpec>,
    endowments: Vec<Vec<f64>>,
    l: usize,
}

impl TryFrom<EconomyFile> for Economy {
    type Error = Error;

    fn try_from(file: EconomyFile) -> Result<Self> {
        if file.m != file.utilities.len() || file.m != file.endowments.len() {
            return Err(Error::InvalidEconomy(format!(
                "m = {} but {} utilities and {} endowment rows",
                file.m,
                file.utilities.len(),
                file.endowments.len()
            )));
        }
        if file.endowments.iter().any(|row| row.len() != file.l) {
            return Err(Error::InvalidEconomy(format!(
                "every endowment row must have l = {} entries",
                file.l
            )));
        }
        Economy::new(file.utilities, file.endowments)
    }
}

impl From<Economy> for EconomyFile {
    fn from(e: Economy) -> Self {
        EconomyFile {
            m: e.utilities.len(),
            l: e.l,
            utilities: e.utilities,
            endowments: e.endowments,
        }
    }
}

impl Economy {
    pub fn new(utilities: Vec<UtilitySpec>, endowments: Vec<Vec<f64>>) -> Result<Self> {
        if utilities.is_empty() {
            return Err(Error::InvalidEconomy("need at least one agent".into()));
        }
        if utilities.len() != endowments.len() {
            return Err(Error::InvalidEconomy(format!(
                "{} utilities but {} endowment rows",
                utilities.len(),
                endowments.len()
            )));
        }
        let l = endowments[0].len();
        if l < 2 {
            return Err(Error::InvalidEconomy("need at least two goods".into()));
        }
        for (i, (u, row)) in utilities.iter().zip(&endowments).enumerate() {
            u.validate()?;
            if u.goods() != l || row.len() != l {
                return Err(Error::InvalidEconomy(format!(
                    "agent {i}: utility on {} goods, endowment on {}, economy has {l}",
                    u.goods(),
                    row.len()
                )));
            }
            if row.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidEconomy(format!(
                    "agent {i}: endowments must be strictly positive, got {row:?}"
                )));
            }
        }
        Ok(Self {
            utilities,
            endowments,
            l,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two quasilinear agents (agent 1 linear in good 1, agent 2 linear in
    /// good 2). `agent1_good2` and `agent2_good1` are the only endowment
    /// entries that enter the reduced excess demand; the other two are set
    /// to 2.0 so that demand stays interior on the usual price range.
    pub fn quasilinear_pair(alpha: f64, agent1_good2: f64, agent2_good1: f64) -> Result<Self> {
        Economy::new(
            vec![
                UtilitySpec::quasilinear(alpha, Role::First),
                UtilitySpec::quasilinear(alpha, Role::Second),
            ],
            vec![vec![2.0, agent1_good2], vec![agent2_good1, 2.0]],
        )
    }

    /// Two Cobb-Douglas(1,1) agents endowed with `(1+eps, eps)` and
    /// `(eps, 1+eps)`; the unique equilibrium price is 1.
    pub fn symmetric_cobb_douglas(eps: f64) -> Result<Self> {
        Economy::new(
            vec![
                UtilitySpec::cobb_douglas(vec![1.0, 1.0]),
                UtilitySpec::cobb_douglas(vec![1.0, 1.0]),
            ],
            vec![vec![1.0 + eps, eps], vec![eps, 1.0 + eps]],
        )
    }

    pub fn agents(&self) -> usize {
        self.utilities.len()
    }

    pub fn goods(&self) -> usize {
        self.l
    }

    pub fn utilities(&self) -> &[UtilitySpec] {
        &self.utilities
    }

    pub fn endowments(&self) -> &[Vec<f64>] {
        &self.endowments
    }

    pub fn endowment(&self, agent: usize, good: usize) -> f64 {
        self.endowments[agent][good]
    }

    pub fn with_endowment(&self, agent: usize, good: usize, value: f64) -> Result<Self> {
        let mut endowments = self.endowments.clone();
        endowments[agent][good] = value;
        Economy::new(self.utilities.clone(), endowments)
    }

    fn check_price(&self, p: &Price) -> Result<()> {
        if p.goods() != self.l {
            return Err(Error::InvalidPrice(format!(
                "price has {} goods, economy has {}",
                p.goods(),
                self.l
            )));
        }
        Ok(())
    }

    fn agent_jet(&self, i: usize, p: &Price) -> Result<DemandJet> {
        let w = p.dot(&self.endowments[i]);
        demand_jet(&self.utilities[i], p, w).map_err(|e| match e {
            Error::NoInteriorMaximum { detail, .. } => Error::NoInteriorMaximum {
                agent: Some(i),
                detail,
            },
            other => other,
        })
    }

    /// Aggregate excess demand `z(p) = sum_i (x_i(p, p.w_i) - w_i)`.
    pub fn excess_demand(&self, p: &Price) -> Result<Vec<f64>> {
        self.check_price(p)?;
        let mut z = vec![0.0; self.l];
        for i in 0..self.agents() {
            let jet = self.agent_jet(i, p)?;
            for ((zk, x), w) in z.iter_mut().zip(&jet.bundle).zip(&self.endowments[i]) {
                *zk += x - w;
            }
        }
        Ok(z)
    }

    /// First `l - 1` components of the excess demand at `(p_free, 1)`.
    pub fn reduced(&self, p_free: &[f64]) -> Result<Vec<f64>> {
        let p = Price::from_free(p_free)?;
        let mut z = self.excess_demand(&p)?;
        z.pop();
        Ok(z)
    }

    /// `(1 + p_k) * z_k`: same zeros as the reduced map, but proper.
    pub fn proper(&self, p_free: &[f64]) -> Result<Vec<f64>> {
        let z = self.reduced(p_free)?;
        Ok(z.iter().zip(p_free).map(|(zk, pk)| (1.0 + pk) * zk).collect())
    }

    /// Jacobians of the reduced excess demand with respect to the free
    /// prices and to the flattened endowments (row-major, agent by good).
    fn jacobians(&self, p_free: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = Price::from_free(p_free)?;
        self.check_price(&p)?;
        let l = self.l;
        let n = l - 1;
        let mut jp = DMatrix::zeros(n, n);
        let mut jw = DMatrix::zeros(n, self.agents() * l);
        for i in 0..self.agents() {
            let jet = self.agent_jet(i, &p)?;
            for k in 0..n {
                for j in 0..n {
                    jp[(k, j)] += jet.d_price[(k, j)] + jet.d_wealth[k] * self.endowments[i][j];
                }
                for j in 0..l {
                    let delta = if j == k { 1.0 } else { 0.0 };
                    jw[(k, i * l + j)] = jet.d_wealth[k] * p.values()[j] - delta;
                }
            }
        }
        Ok((jp, jw))
    }
}

/// A family of reduced excess-demand maps `z(p, w)` parametrized by an
/// endowment vector `w`. Implemented by [`Economy`] and by closed-form
/// synthetic families used as controls.
pub trait Market: Clone + Send + Sync + std::fmt::Debug {
    fn goods(&self) -> usize;

    fn free_dim(&self) -> usize {
        self.goods() - 1
    }

    fn endowment_vector(&self) -> DVector<f64>;

    fn with_endowment_vector(&self, w: &DVector<f64>) -> Result<Self>;

    fn reduced_excess_demand(&self, p_free: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian_reduced(&self, p_free: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Derivative of the reduced excess demand in the endowments.
    fn endowment_jacobian(&self, p_free: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Indices of endowment coordinates adjusted to stay on the
    /// equilibrium manifold when prices are moved.
    fn adjustable_endowments(&self) -> Vec<usize>;

    fn in_domain(&self, p_free: &DVector<f64>) -> bool {
        p_free.iter().all(|v| v.is_finite() && *v > 0.0)
    }

    /// Box searched for equilibria when the caller gives none.
    fn default_price_box(&self) -> Bounds {
        Bounds::cube(self.free_dim(), 0.05, 20.0).expect("valid default box")
    }

    /// Same preferences and shape, so that endowments can be interpolated.
    fn same_structure(&self, other: &Self) -> bool {
        self.goods() == other.goods() && self.endowment_vector().len() == other.endowment_vector().len()
    }

    fn proper_excess_demand(&self, p_free: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.reduced_excess_demand(p_free)?;
        Ok(z.zip_map(p_free, |zk, pk| (1.0 + pk) * zk))
    }

    fn hessian_reduced(&self, p_free: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        hessian_with_step(&ReducedMap(self), p_free, fd_step(p_free))
    }

    /// Largest singular value of the full Jacobian `[D_p z | D_w z]`, used as
    /// the reference scale for rank decisions on `D_p z`.
    fn reference_scale(&self, p_free: &DVector<f64>) -> Result<f64> {
        let jp = self.jacobian_reduced(p_free)?;
        let jw = self.endowment_jacobian(p_free)?;
        let mut full = DMatrix::zeros(jp.nrows(), jp.ncols() + jw.ncols());
        full.view_mut((0, 0), jp.shape()).copy_from(&jp);
        full.view_mut((0, jp.ncols()), jw.shape()).copy_from(&jw);
        Ok(crate::numeric::FullSvd::new(&full).sigma_max())
    }
}

impl Market for Economy {
    fn goods(&self) -> usize {
        self.l
    }

    fn endowment_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.agents() * self.l,
            self.endowments.iter().flatten().copied(),
        )
    }

    fn with_endowment_vector(&self, w: &DVector<f64>) -> Result<Self> {
        if w.len() != self.agents() * self.l {
            return Err(Error::InvalidEconomy(format!(
                "expected {} endowment entries, got {}",
                self.agents() * self.l,
                w.len()
            )));
        }
        let rows = w
            .as_slice()
            .chunks(self.l)
            .map(|c| c.to_vec())
            .collect();
        Economy::new(self.utilities.clone(), rows)
    }

    fn reduced_excess_demand(&self, p_free: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.reduced(p_free.as_slice())?))
    }

    fn jacobian_reduced(&self, p_free: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.jacobians(p_free.as_slice())?.0)
    }

    fn endowment_jacobian(&self, p_free: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.jacobians(p_free.as_slice())?.1)
    }

    fn adjustable_endowments(&self) -> Vec<usize> {
        let last = self.agents() - 1;
        (last * self.l..(last + 1) * self.l).collect()
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.l == other.l && self.utilities == other.utilities
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `z(p, w) = (p - 1)^3 - (w_2 - 1)` with aggregate endowment `(w_1, w_2)`.
    Cubic,
    /// `z(p, w) = p^2 - w`.
    FoldNormalForm,
}

/// Closed-form scalar excess-demand families with two goods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarket {
    pub kind: SyntheticKind,
    pub endowment: Vec<f64>,
}

impl SyntheticMarket {
    pub fn cubic(aggregate_good2: f64) -> Self {
        Self {
            kind: SyntheticKind::Cubic,
            endowment: vec![1.0, aggregate_good2],
        }
    }

    pub fn fold(w: f64) -> Self {
        Self {
            kind: SyntheticKind::FoldNormalForm,
            endowment: vec![w],
        }
    }
}

impl Market for SyntheticMarket {
    fn goods(&self) -> usize {
        2
    }

    fn endowment_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.endowment.clone())
    }

    fn with_endowment_vector(&self, w: &DVector<f64>) -> Result<Self> {
        if w.len() != self.endowment.len() {
            return Err(Error::InvalidEconomy("endowment length mismatch".into()));
        }
        Ok(Self {
            kind: self.kind,
            endowment: w.as_slice().to_vec(),
        })
    }

    fn reduced_excess_demand(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let z = match self.kind {
            SyntheticKind::Cubic => (p[0] - 1.0).powi(3) - (self.endowment[1] - 1.0),
            SyntheticKind::FoldNormalForm => p[0] * p[0] - self.endowment[0],
        };
        Ok(DVector::from_element(1, z))
    }

    fn jacobian_reduced(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = match self.kind {
            SyntheticKind::Cubic => 3.0 * (p[0] - 1.0).powi(2),
            SyntheticKind::FoldNormalForm => 2.0 * p[0],
        };
        Ok(DMatrix::from_element(1, 1, d))
    }

    fn endowment_jacobian(&self, _p: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(match self.kind {
            SyntheticKind::Cubic => DMatrix::from_row_slice(1, 2, &[0.0, -1.0]),
            SyntheticKind::FoldNormalForm => DMatrix::from_element(1, 1, -1.0),
        })
    }

    fn adjustable_endowments(&self) -> Vec<usize> {
        match self.kind {
            SyntheticKind::Cubic => vec![1],
            SyntheticKind::FoldNormalForm => vec![0],
        }
    }

    fn in_domain(&self, p: &DVector<f64>) -> bool {
        match self.kind {
            SyntheticKind::Cubic => p.iter().all(|v| v.is_finite() && *v > 0.0),
            SyntheticKind::FoldNormalForm => p.iter().all(|v| v.is_finite()),
        }
    }

    fn default_price_box(&self) -> Bounds {
        match self.kind {
            SyntheticKind::Cubic => Bounds::cube(1, 0.05, 20.0),
            SyntheticKind::FoldNormalForm => Bounds::cube(1, -20.0, 20.0),
        }
        .expect("valid default box")
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.kind == other.kind && self.endowment.len() == other.endowment.len()
    }
}

/// `p -> z(p)` at fixed endowments, as a [`SmoothMap`].
pub struct ReducedMap<'a, M: Market>(pub &'a M);

impl<M: Market> SmoothMap for ReducedMap<'_, M> {
    fn dim_in(&self) -> usize {
        self.0.free_dim()
    }
    fn dim_out(&self) -> usize {
        self.0.free_dim()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.0.reduced_excess_demand(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.0.jacobian_reduced(x)
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// `(w, p) -> z(p, w)`: the defining map of the equilibrium manifold, with
/// the endowments as base coordinates and prices as fiber coordinates.
pub struct DefiningMap<'a, M: Market>(pub &'a M);

impl<M: Market> DefiningMap<'_, M> {
    fn split(&self, x: &DVector<f64>) -> Result<(M, DVector<f64>)> {
        let nw = self.0.endowment_vector().len();
        let w = x.rows(0, nw).into_owned();
        let p = x.rows(nw, x.len() - nw).into_owned();
        Ok((self.0.with_endowment_vector(&w)?, p))
    }
}

impl<M: Market> SmoothMap for DefiningMap<'_, M> {
    fn dim_in(&self) -> usize {
        self.0.endowment_vector().len() + self.0.free_dim()
    }
    fn dim_out(&self) -> usize {
        self.0.free_dim()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (m, p) = self.split(x)?;
        m.reduced_excess_demand(&p)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (m, p) = self.split(x)?;
        let jw = m.endowment_jacobian(&p)?;
        let jp = m.jacobian_reduced(&p)?;
        let mut out = DMatrix::zeros(jp.nrows(), jw.ncols() + jp.ncols());
        out.view_mut((0, 0), jw.shape()).copy_from(&jw);
        out.view_mut((0, jw.ncols()), jp.shape()).copy_from(&jp);
        Ok(out)
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::central_jacobian;

    fn closed_form_reduced(p: f64, alpha: f64, w1p: f64, w2: f64) -> f64 {
        w1p / p - p.powf(-alpha / (alpha + 1.0)) + p.powf(-1.0 / (alpha + 1.0)) - w2
    }

    #[test]
    fn cobb_douglas_symmetric_split() {
        let u = UtilitySpec::cobb_douglas(vec![1.0, 1.0]);
        let x = demand(&u, &Price::new(vec![1.0, 1.0]).unwrap(), 2.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cobb_douglas_matches_grid_maximization() {
        // brute-force maximization along the budget line
        let u = UtilitySpec::cobb_douglas(vec![0.3, 1.7]);
        let p = Price::new(vec![2.5, 1.0]).unwrap();
        let w = 3.0;
        let x = demand(&u, &p, w).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0);
        let n = 200_000;
        for i in 1..n {
            let x0 = (w / 2.5) * i as f64 / n as f64;
            let x1 = w - 2.5 * x0;
            let v = u.value(&[x0, x1]);
            if v > best.0 {
                best = (v, x0);
            }
        }
        assert!((x[0] - best.1).abs() < 1e-4, "{} vs {}", x[0], best.1);
        assert!((x[0] - 0.3 * 3.0 / (2.5 * 2.0)).abs() < 1e-14);
        assert!((p.dot(&x) - w).abs() <= 1e-10 * (1.0 + w));
    }

    #[test]
    fn quasilinear_matches_grid_maximization() {
        for role in [Role::First, Role::Second] {
            let u = UtilitySpec::quasilinear(8.0, role);
            let p = Price::new(vec![0.7, 1.0]).unwrap();
            let w = 2.0;
            let x = demand(&u, &p, w).unwrap();
            let mut best = (f64::NEG_INFINITY, 0.0);
            let n = 400_000;
            for i in 1..n {
                let x0 = (w / 0.7) * i as f64 / n as f64;
                let v = u.value(&[x0, w - 0.7 * x0]);
                if v > best.0 {
                    best = (v, x0);
                }
            }
            assert!((x[0] - best.1).abs() < 1e-4, "{role:?}: {} vs {}", x[0], best.1);
            assert!((p.dot(&x) - w).abs() <= 1e-10 * (1.0 + w));
        }
    }

    #[test]
    fn quasilinear_small_wealth_has_no_interior_maximum() {
        let u = UtilitySpec::quasilinear(8.0, Role::First);
        let p = Price::new(vec![0.5, 1.0]).unwrap();
        let err = demand(&u, &p, 0.1).unwrap_err();
        assert!(matches!(err, Error::NoInteriorMaximum { .. }));
    }

    #[test]
    fn no_trade_economy_has_zero_excess_demand() {
        // at p = (1, 1), CD(1,1) demand with wealth 2 is (1, 1)
        let e = Economy::new(
            vec![UtilitySpec::cobb_douglas(vec![1.0, 1.0]); 2],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let z = e.excess_demand(&Price::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn symmetric_pair_clears_at_one() {
        let e = Economy::symmetric_cobb_douglas(1e-3).unwrap();
        let z = e.excess_demand(&Price::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));
        assert!(e.reduced(&[1.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn quasilinear_reduced_matches_closed_form() {
        let e = Economy::quasilinear_pair(8.0, 0.766, 0.766).unwrap();
        for &p in &[0.3, 0.54, 1.0, 2.0, 5.0] {
            let z = e.reduced(&[p]).unwrap()[0];
            assert!((z - closed_form_reduced(p, 8.0, 0.766, 0.766)).abs() < 1e-13);
        }
    }

    #[test]
    fn symmetric_pair_derivative_closed_form() {
        // z(p) = (1 + 2 eps)(1 - p) / (2p)
        let eps = 1e-3;
        let e = Economy::symmetric_cobb_douglas(eps).unwrap();
        let j = e.jacobian_reduced(&DVector::from_element(1, 1.0)).unwrap()[(0, 0)];
        assert!((j + (1.0 + 2.0 * eps) / 2.0).abs() < 1e-14);
        assert!((j + 0.5).abs() < 2e-3);
    }

    #[test]
    fn proper_map_has_same_sign() {
        let e = Economy::quasilinear_pair(8.0, 0.766, 0.766).unwrap();
        for i in 1..200 {
            let p = 0.05 + 0.1 * i as f64;
            let z = e.reduced(&[p]).unwrap()[0];
            let zt = e.proper(&[p]).unwrap()[0];
            assert_eq!(z.signum(), zt.signum());
            assert!((zt - (1.0 + p) * z).abs() < 1e-15 * (1.0 + zt.abs()));
        }
    }

    #[test]
    fn endowment_jacobian_matches_differences() {
        let e = Economy::new(
            vec![
                UtilitySpec::cobb_douglas(vec![1.0, 2.0, 0.5]),
                UtilitySpec::cobb_douglas(vec![0.4, 0.4, 3.0]),
            ],
            vec![vec![1.0, 0.5, 2.0], vec![0.3, 2.0, 1.0]],
        )
        .unwrap();
        let p = DVector::from_vec(vec![0.8, 1.7]);
        let map = DefiningMap(&e);
        let mut x = e.endowment_vector();
        x.extend(p.iter().copied());
        let analytic = map.jacobian(&x).unwrap();
        let numeric = central_jacobian(&map, &x, 1e-6).unwrap();
        assert!((&analytic - &numeric).norm() < 1e-7 * (1.0 + analytic.norm()));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let text = r#"{"m":2,"l":2,"utilities":[{"kind":"quasilinear","alpha":8,"role":"first"},
            {"kind":"cobb_douglas","weights":[1,2]}],"endowments":[[1,0.5],[0.2,3]]}"#;
        let e = Economy::from_json(text).unwrap();
        assert_eq!(e.agents(), 2);
        let back = Economy::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
        let bad = r#"{"m":1,"l":2,"utilities":[{"kind":"cobb_douglas","weights":[1,1]}],"endowments":[[1,0]]}"#;
        assert!(Economy::from_json(bad).unwrap_err().is_input_error());
        let bad = r#"{"m":1,"l":3,"utilities":[{"kind":"quasilinear","alpha":1,"role":"second"}],"endowments":[[1,1,1]]}"#;
        assert!(Economy::from_json(bad).is_err());
    }

    #[test]
    fn price_invariants() {
        assert!(Price::new(vec![1.0, 2.0]).is_err());
        assert!(Price::new(vec![-1.0, 1.0]).is_err());
        assert!(Price::from_free(&[0.5]).is_ok());
    }
}
