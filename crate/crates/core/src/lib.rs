//! Battery open-circuit-voltage and internal-resistance estimation from
//! low-rate charge/discharge logs, with a simulated cycler for testing.

pub mod battery_model;
pub mod config;
pub mod error;
pub mod interp;
pub mod io;
pub mod ocv_estimation;
pub mod ocv_model;
pub mod parallel;
pub mod pipeline;
pub mod protocols;
pub mod resistance;
pub mod rng;
pub mod soc;

pub use error::{Error, Result};
pub use ocv_model::OcvParameters;
