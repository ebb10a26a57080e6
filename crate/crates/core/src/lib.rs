pub mod error;
pub mod groups;
pub mod io;
pub mod model;
pub mod numerics;
pub mod saliency;
pub mod second_order;
pub mod trainer;

pub use error::{Error, Result};
