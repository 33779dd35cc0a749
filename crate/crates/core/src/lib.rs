//! Link-level simulation of FBMC/OQAM with per-subcarrier MMSE decision
//! feedback equalization (uplink) and Tomlinson-Harashima precoding
//! (downlink) obtained through UL-to-DL MSE duality.

pub mod channel;
pub mod config;
pub mod equalizer;
pub mod error;
pub mod filterbank;
pub mod matrices;
pub mod oqam;
pub mod sim;
pub mod thp;

pub use config::{Design, SimConfig};
pub use error::{Error, Result};
pub use sim::{SimRunResult, Simulator};
