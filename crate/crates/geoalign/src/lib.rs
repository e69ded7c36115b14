//! Desk-scale multi-granularity vision-language alignment: tiny dual
//! encoders trained with global, region-phrase, hard-negative, and
//! cross-view consistency objectives over a procedurally generated
//! remote-sensing-style corpus.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod region;
pub mod rng;
pub mod train;
