//! Python bindings: economies, fibers, crisis certificates, degree and
//! discriminants.

use crisis_core::degree::degree_of_natural_projection;
use crisis_core::envelope::{discriminant as core_discriminant, FamilySpec};
use crisis_core::intrinsic::{certify_crisis as core_certify, CertifyOptions};
use crisis_core::lifting::{restore_prices_experiment, RestoreOptions};
use crisis_core::manifold::{
    enumerate_fiber as core_enumerate, locate_fold as core_locate_fold, Equilibrium, PriceBox,
};
use crisis_core::numeric::Bounds;
use crisis_core::{Error, Market};
use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    if err.is_input_error() {
        PyValueError::new_err(err.to_string())
    } else {
        PyRuntimeError::new_err(err.to_string())
    }
}

fn price_box(economy: &crisis_core::Economy, lo: Option<f64>, hi: Option<f64>) -> PyResult<PriceBox> {
    match (lo, hi) {
        (None, None) => Ok(economy.default_price_box()),
        (lo, hi) => Bounds::cube(economy.free_dim(), lo.unwrap_or(0.05), hi.unwrap_or(20.0)).map_err(to_py),
    }
}

/// A pure exchange economy.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Economy {
    inner: crisis_core::Economy,
}

#[pymethods]
impl Economy {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        crisis_core::Economy::from_json(text)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Two quasilinear agents with exponent `alpha`; agent 1 owns
    /// `agent1_good2` of good 2 and agent 2 owns `agent2_good1` of good 1.
    #[staticmethod]
    fn quasilinear_pair(alpha: f64, agent1_good2: f64, agent2_good1: f64) -> PyResult<Self> {
        crisis_core::Economy::quasilinear_pair(alpha, agent1_good2, agent2_good1)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn symmetric_cobb_douglas(eps: f64) -> PyResult<Self> {
        crisis_core::Economy::symmetric_cobb_douglas(eps)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn agents(&self) -> usize {
        self.inner.agents()
    }

    #[getter]
    fn goods(&self) -> usize {
        self.inner.goods()
    }

    #[getter]
    fn endowments(&self) -> Vec<Vec<f64>> {
        self.inner.endowments().to_vec()
    }

    fn excess_demand(&self, prices: Vec<f64>) -> PyResult<Vec<f64>> {
        let p = crisis_core::Price::new(prices).map_err(to_py)?;
        self.inner.excess_demand(&p).map_err(to_py)
    }

    fn reduced_excess_demand(&self, p_free: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.reduced(&p_free).map_err(to_py)
    }

    fn jacobian_reduced(&self, p_free: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let j = self
            .inner
            .jacobian_reduced(&DVector::from_vec(p_free))
            .map_err(to_py)?;
        Ok(j.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Economy(m={}, l={}, endowments={:?})", self.inner.agents(), self.inner.goods(), self.inner.endowments())
    }
}

fn equilibrium_dict<'py>(py: Python<'py>, eq: &Equilibrium) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("price", eq.price.as_slice().to_vec())?;
    d.set_item("residual", eq.residual)?;
    d.set_item("critical", eq.critical)?;
    d.set_item("det_sign", eq.det_sign)?;
    d.set_item("index", eq.index())?;
    Ok(d)
}

/// Equilibria found by multi-start Newton in the price box.
#[pyfunction]
#[pyo3(signature = (economy, grid=200, lo=None, hi=None))]
fn enumerate_fiber<'py>(
    py: Python<'py>,
    economy: &Economy,
    grid: usize,
    lo: Option<f64>,
    hi: Option<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let b = price_box(&economy.inner, lo, hi)?;
    let fiber = core_enumerate(&economy.inner, &b, grid);
    fiber.equilibria.iter().map(|e| equilibrium_dict(py, e)).collect()
}

/// Crisis certificate of the equilibrium refined from `price`, as a dict.
#[pyfunction]
#[pyo3(signature = (economy, price, seed=42))]
fn certify_crisis<'py>(py: Python<'py>, economy: &Economy, price: Vec<f64>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let eq = crisis_core::solve_equilibrium(&economy.inner, &DVector::from_vec(price)).map_err(to_py)?;
    let opts = CertifyOptions {
        seed,
        ..CertifyOptions::default()
    };
    let cert = core_certify(&eq, None, &opts).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("price", eq.price.as_slice().to_vec())?;
    d.set_item("kernel_dim", cert.kernel_dim)?;
    d.set_item("odd", cert.odd)?;
    d.set_item("v", cert.direction_v.as_slice().to_vec())?;
    d.set_item("min_sv", cert.min_singular_value)?;
    d.set_item("rank_gap", cert.rank_gap)?;
    d.set_item("verdict", cert.verdict.as_str())?;
    Ok(d)
}

/// Fold of the natural projection reached by moving one endowment
/// coordinate; returns the critical economy and its price.
#[pyfunction]
fn locate_fold(economy: &Economy, p0: Vec<f64>, coordinate: usize) -> PyResult<(Economy, Vec<f64>)> {
    let eq = core_locate_fold(&economy.inner, &DVector::from_vec(p0), coordinate).map_err(to_py)?;
    Ok((Economy { inner: eq.market.clone() }, eq.price.as_slice().to_vec()))
}

/// Signed equilibrium count of a regular economy.
#[pyfunction]
#[pyo3(signature = (economy, grid=200))]
fn natural_projection_degree(economy: &Economy, grid: usize) -> PyResult<i32> {
    degree_of_natural_projection(&economy.inner, &economy.inner.default_price_box(), grid).map_err(to_py)
}

/// Discriminant points `(x, y, z, delta, certified)` of a family given as JSON.
#[pyfunction]
#[pyo3(signature = (family_json, lo, hi, grid=16))]
fn discriminant(family_json: &str, lo: [f64; 3], hi: [f64; 3], grid: usize) -> PyResult<Vec<(f64, f64, f64, f64, bool)>> {
    let family = FamilySpec::from_json(family_json).map_err(to_py)?;
    let b = Bounds::new(lo.to_vec(), hi.to_vec()).map_err(to_py)?;
    let pts = core_discriminant(&family, &b, grid).map_err(to_py)?;
    Ok(pts.iter().map(|p| (p.x, p.y, p.z, p.delta, p.certified_envelope)).collect())
}

/// Summary of the price-restoration experiment around a crisis.
#[pyfunction]
fn restore_prices<'py>(py: Python<'py>, economy: &Economy, price: Vec<f64>, radius: f64) -> PyResult<Bound<'py, PyDict>> {
    let eq = Equilibrium::at(&economy.inner, DVector::from_vec(price)).map_err(to_py)?;
    let r = restore_prices_experiment(&eq, radius, &RestoreOptions::default()).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("plus", equilibrium_dict(py, &r.plus)?)?;
    d.set_item("minus", equilibrium_dict(py, &r.minus)?)?;
    d.set_item("gap", r.gap)?;
    d.set_item("avoiding_completed", r.avoiding.completed)?;
    d.set_item("avoiding_distance", r.avoiding.endpoint_distance)?;
    d.set_item("crossing_crisis", r.crossing.crisis_hit)?;
    d.set_item("alternative_holds", r.alternative_holds())?;
    Ok(d)
}

#[pymodule]
fn crisis(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Economy>()?;
    m.add_function(wrap_pyfunction!(enumerate_fiber, m)?)?;
    m.add_function(wrap_pyfunction!(certify_crisis, m)?)?;
    m.add_function(wrap_pyfunction!(locate_fold, m)?)?;
    m.add_function(wrap_pyfunction!(natural_projection_degree, m)?)?;
    m.add_function(wrap_pyfunction!(discriminant, m)?)?;
    m.add_function(wrap_pyfunction!(restore_prices, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
