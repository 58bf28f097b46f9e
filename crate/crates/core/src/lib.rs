pub mod barrier;
pub mod config;
pub mod ddp;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod mppi;
pub mod sc_mppi;
pub mod sim;

pub use error::{Error, Result};
