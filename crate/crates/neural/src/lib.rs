//! Neural survival models: a small autodiff engine, encoders, a monotone
//! survival decoder, training and interpretation tools.

pub mod interpret;
pub mod models;
pub mod params;
pub mod tensor;
pub mod training;
