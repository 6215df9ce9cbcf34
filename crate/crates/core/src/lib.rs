pub mod checks;
pub mod discriminator;
pub mod dist;
pub mod env;
pub mod error;
pub mod lagrangian;
pub mod world_model;
pub mod nn;
pub mod planner;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
