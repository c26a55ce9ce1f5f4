//! Detection and certification of unavoidable crises in pure exchange
//! economies, with the supporting machinery: intrinsic second derivatives,
//! Brouwer degree, bifurcation detection, envelopes of curve families and
//! path lifting.

pub mod cli;
pub mod degree;
pub mod economy;
pub mod envelope;
pub mod error;
pub mod intrinsic;
pub mod lifting;
pub mod manifold;
pub mod numeric;

pub use economy::{Economy, Market, Price, Role, SyntheticMarket, UtilitySpec};
pub use error::{Error, Result};
pub use intrinsic::{certify_crisis, CrisisCertificate, SingularityReport, Verdict};
pub use manifold::{enumerate_fiber, solve_equilibrium, Equilibrium, Fiber, PriceBox};
