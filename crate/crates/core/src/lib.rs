//! Steady-state solver for an economy of heterogeneous firms that accumulate
//! both physical capital and customer capital.

pub mod calibration;
pub mod distribution;
pub mod egm;
pub mod equilibrium;
pub mod error;
pub mod interp;
pub mod model;
pub mod moments;
pub mod panel;
pub mod productivity;
pub mod regression;

pub use error::{Error, NodeIndex, Result};
pub use model::{AggregateGuess, DerivedConstants, FirmState, Parameters, StaticSolution};
