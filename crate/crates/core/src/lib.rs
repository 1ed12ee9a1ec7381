pub mod attack;
pub mod barrier;
pub mod control;
pub mod error;
pub mod estimation;
pub mod ft_estimation;
pub mod geometry;
pub mod lidar;
pub mod ndt;
pub mod sim;
pub mod world;

pub use error::{Error, Result};
