//! Uplink bi-static sensing with an unsynchronized user equipment.
//!
//! The crate simulates OFDM channel state information (CSI) at a base station
//! (BS) whose uplink transmitter (the UE) suffers per-packet timing offsets and
//! carrier frequency offsets, and estimates from it:
//!
//! * angles of arrival with a 2D MUSIC search over a uniform planar array,
//! * Doppler-plus-CFO (DPO) and range with decoupled 1D MUSIC searches,
//! * a Kalman-filtered version of each beam's CSI that suppresses the timing
//!   offset before range estimation,
//! * the UE location and the scatterer locations on the bi-static ellipsoid.
//!
//! [`crb`] holds the closed-form range Cramér-Rao bound and a numerical Fisher
//! information check, and [`harness`] runs Monte-Carlo sweeps and writes CSV.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aoa;
pub mod channel;
pub mod crb;
pub mod drde;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod localization;
pub mod pipeline;
pub mod subspace;

pub use error::{Error, Result};
pub use num_complex::Complex64;
