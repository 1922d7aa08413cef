//! Mean-field primal-dual heuristic for stochastic capacity design of flow
//! networks.

pub mod consensus;
pub mod dynamics;
pub mod error;
pub mod macro_net;
pub mod mfg;
pub mod micro;
pub mod numerics;
pub mod sim;
pub mod state;

pub use error::{Error, Result};
