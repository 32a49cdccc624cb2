//! Simulation and analysis of pair-correlated atoms scattered from two colliding condensates.
//!
//! The chain runs end to end: trap ground state and source momentum widths,
//! Monte Carlo generation of correlated atom pairs on the collision shell,
//! a detector model with time-of-flight reconstruction, windowed pair
//! histograms normalized into second-order correlation maps, Gaussian peak
//! fits, and derived pair statistics (peak-height scaling, Cauchy-Schwarz
//! ratio, number-difference variance).

pub mod correlator;
pub mod detector;
pub mod error;
pub mod fitter;
pub mod gp;
pub mod halo;
pub mod kinematics;
pub mod stats;

pub use error::{Error, Result};
