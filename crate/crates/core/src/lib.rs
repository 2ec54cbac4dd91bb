pub mod analysis;
pub mod data;
pub mod error;
pub mod layers;
pub mod msgc;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{MsgcError, Result};
