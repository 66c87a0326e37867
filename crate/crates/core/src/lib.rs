//! Return-time statistics of finite quantum walks monitored at a detector
//! state, either by weak (ancilla-mediated) measurements of strength `eta`,
//! by projective measurements, or by projective measurements made at random
//! steps with probability `p`.
//!
//! ```
//! use monitored_walk::{build_evolution, twolevel::qubit_system};
//! use monitored_walk::{amplitudes, genfunc, statistics};
//!
//! let sys = qubit_system(1.0);
//! let evo = build_evolution(&sys, 1.0, 0.5).unwrap();
//! let series = amplitudes::monitored_series_adaptive(&evo, 1e-12).unwrap();
//! let stats = statistics::mean_return_series(&series);
//! let w = genfunc::winding_number(&sys, 1.0, genfunc::WindingMethod::Roots).unwrap();
//! assert_eq!(w.certified_n_w().unwrap(), 2);
//! assert!((stats.mean_n - 4.0).abs() < 1e-6);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amplitudes;
pub mod error;
pub mod genfunc;
pub mod io;
pub mod linalg;
pub mod randomtime;
pub mod recursion;
pub mod sampling;
pub mod spectral;
pub mod statistics;
pub mod twolevel;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
pub use spectral::{build_evolution, build_system, MonitoredEvolution, SpectralSystem};
