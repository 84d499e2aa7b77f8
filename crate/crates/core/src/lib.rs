//! Large-scale multiple testing of cross-covariance functions for
//! high-dimensional functional data.
//!
//! The crate tests all `p(p-1)/2` cross-covariance surfaces of a panel of
//! `p` functional variables with a Hilbert–Schmidt statistic, calibrates
//! each test against a four-cumulant approximation of its chi-square
//! mixture null, and selects a common threshold on the normal-quantile
//! scale that keeps the estimated false discovery proportion below a
//! target level. The same engine runs on pre-smoothed curves from noisy
//! discrete observations and on nodewise regression residuals, which
//! yields a functional graphical model.

pub mod covtest;
pub mod error;
pub mod fgm;
pub mod harness;
pub mod mtproc;
pub mod nulldist;
pub mod presmooth;
pub mod quadrature;
pub mod scalar;
pub mod simgen;
pub mod threshbase;

pub use covtest::{CurvePanel, GramSet, Pair, PairTestRecord};
pub use error::{Error, Result};
pub use mtproc::{DiscoverySet, TestBattery};
pub use nulldist::{Cumulants, MixtureNull};
pub use presmooth::{DiscretePanel, SmootherConfig};
pub use quadrature::FunctionGrid;
pub use scalar::Real;

/// Double-precision grid.
pub type Grid = FunctionGrid<f64>;
/// Double-precision curve panel.
pub type Panel = CurvePanel<f64>;
/// Single-precision curve panel.
pub type Panel32 = CurvePanel<f32>;
/// Double-precision Gram matrices.
pub type Grams = GramSet<f64>;
