//! Test support: slow, obviously-correct reference implementations and a
//! planted-signal check-in generator.
//!
//! Nothing here shares code with the engine. Matrices are plain
//! `Vec<Vec<f64>>` in row-vector convention (`h W`).

pub mod oracle;
pub mod planted;

pub type Mat = Vec<Vec<f64>>;
