//! Dual propagation: training layered networks with dyadic (two-state)
//! neurons and closed-form layerwise inference, plus a back-propagation
//! reference, optimisers, a trainer and MNIST/IDX data handling.

pub mod checkpoint;
pub mod data;
pub mod dyadic;
pub mod error;
pub mod loss;
pub mod network;
pub mod optim;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
