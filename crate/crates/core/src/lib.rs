//! Policy elimination with experiment design for linear MDPs.

pub mod design;
pub mod error;
pub mod instances;
pub mod linalg;
pub mod lower_bound;
pub mod mdp;
pub mod pedel;
pub mod policy_class;
pub mod regret;

pub use error::{Error, Result};
