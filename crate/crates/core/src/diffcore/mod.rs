//! Reverse-mode differentiation: tape, parameters, composite layers, and
//! finite-difference verification.

pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;

pub use nn::{cosine_matrix, cosine_sim, gru_cell, Gru, GruVars, Linear, LinearVars, Norm, NormVars};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Shape, Tape, Var};
