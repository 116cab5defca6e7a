//! Order book reconstruction, fill-time probes, features and classical
//! survival statistics.

pub mod book;
pub mod features;
pub mod lobster;
pub mod probes;
pub mod survival;
pub mod synth;
