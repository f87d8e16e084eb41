pub mod baseline;
pub mod beam_design;
pub mod channel;
pub mod ems;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod sounding;
pub mod tde;

pub use channel::{ChannelPath, ChannelRealization, SystemConfig};
pub use error::{Error, Result};
