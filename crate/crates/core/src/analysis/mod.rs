//! Error functionals, convergence-rate fitting, Gronwall-inequality checkers
//! and a priori bound checks.

pub mod apriori;
pub mod error;
pub mod gronwall;
pub mod quadrature;
pub mod rate;

pub use apriori::{apriori_l2_check, AprioriReport, L2Norms};
pub use error::{scheme_error, ErrorEntry};
pub use gronwall::{gronwall_cont_check, gronwall_disc_check, random_suite, ContinuousCase, DiscreteCase, GronwallOutcome, SuiteTally};
pub use quadrature::QuadratureRule;
pub use rate::{fit_rate, RateFit};
