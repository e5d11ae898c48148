pub mod bounds;
pub mod error;
pub mod index;
pub mod linalg;
pub mod mdp;
pub mod plant;

pub use error::{Error, Result};
pub mod sched;
