pub mod calibration;
pub mod cli;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod initial_s;
pub mod mm;
pub mod model;
pub mod quadrature;
pub mod rho;
pub mod scale;
