//! Weighted sum-rate beamforming for multi-cell MU-MIMO downlink.
//!
//! The crate contains the classical fractional-programming (FP) iteration,
//! its inversion-free FastFP variant, and GNNFP: classical FP with the
//! per-cell beamformer update replaced by a graph neural network acting on
//! a ball-constrained standard quadratic form of that update.
//!
//! ```
//! use gnnfp::channel::{generate_instance, mrt_initializer, NetworkConfig};
//! use gnnfp::fp::{classical_fp, weighted_sum_rate};
//!
//! let inst = generate_instance(&NetworkConfig::new(2, 2, 4, 2).with_seed(3)).unwrap();
//! let v0 = mrt_initializer(&inst);
//! let (v, trace) = classical_fp(&inst, &v0, 10).unwrap();
//! assert!(weighted_sum_rate(&inst, &v) >= trace.wsr[0]);
//! ```

pub mod autodiff;
pub mod bench;
pub mod channel;
pub mod dataset;
pub mod fp;
pub mod gnn;
pub mod io;
pub mod numerics;
pub mod reform;
pub mod training;
