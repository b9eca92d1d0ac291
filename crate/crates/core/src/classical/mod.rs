//! Classical reconstruction: filtered backprojection and SART.

mod fft;
pub mod fdk;
pub mod sart;

pub use fdk::{circular_orbit, fdk_reconstruct, FdkOptions, Orbit, RampFilter};
pub use sart::{sart_reconstruct, SartOptions, SartResult, ViewOrder};
