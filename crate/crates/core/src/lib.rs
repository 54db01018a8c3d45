//! Finite-size error laboratory for periodic MP2/MP3/CCD(n) amplitudes and
//! energies on Monkhorst-Pack meshes, plus a singular-quadrature lab.

pub mod amplitudes;
pub mod eri;
pub mod error;
pub mod fft3;
pub mod lattice;
pub mod lobpcg;
pub mod meanfield;
pub mod quadrature;
pub mod reduce;
pub mod study;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
