pub mod cell;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod maze;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
