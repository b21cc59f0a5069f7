//! Numerical laboratory for BMO martingales.
//!
//! Two backends: exact finite filtrations ([`tree`]) where every conditional
//! expectation is a finite sum, and seeded Brownian Monte Carlo ([`mc`]) for
//! quantities that only exist in continuous time.

pub mod bmo;
pub mod corpus;
pub mod counterexample;
pub mod error;
pub mod exponent;
pub mod inequality;
pub mod linear;
pub mod mc;
pub mod report;
pub mod scalar;
pub mod solvers;
pub mod spectral;
pub mod tree;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use scalar::Scalar;
pub use tree::{TreeFiltration, TreeMartingale, TreeProcess, TreeStoppingTime};

pub type RealProcess = TreeProcess<f64>;
pub type ComplexProcess = TreeProcess<Complex64>;
pub type RealMartingale = TreeMartingale<f64>;
pub type ComplexMartingale = TreeMartingale<Complex64>;
pub type SinglePrecisionMartingale = TreeMartingale<f32>;
