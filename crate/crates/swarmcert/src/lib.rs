//! Certified TDMA slot allocation for the control loops of a UAV swarm, with
//! a closed-loop simulator, baselines and an experiment harness.

pub mod allocator;
pub mod baselines;
pub mod cert;
pub mod chain;
pub mod config;
pub mod error;
pub mod harness;
pub mod lmi;
pub mod mission;
pub mod mjls;
pub mod network;
pub mod plant;
pub mod sim;
pub mod streams;
pub mod twin;

pub use config::Config;
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/certificates.md")]
    mod certificates {}
    #[doc = include_str!("../../../book/src/lyapunov.md")]
    mod lyapunov {}
    #[doc = include_str!("../../../book/src/interaction.md")]
    mod interaction {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
