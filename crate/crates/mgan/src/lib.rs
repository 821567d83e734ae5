//! Multi-granularity alignment networks (MGAN) for aspect-level sentiment
//! classification, transferring from coarse aspect-category data to
//! fine-grained aspect-term data.
//!
//! The coarse network stacks a BiLSTM encoder, Context2Aspect attention,
//! the Coarse2Fine attention with its auxiliary category head and fusion
//! gate, and position-aware sentiment attention; the fine network shares
//! everything except Coarse2Fine and replaces learned position relevance
//! with the closed-form span rule. A contrastive feature alignment couples
//! the two sentence representations during alternating training.
//!
//! Numerics are pure-Rust f64: a small dense tensor, a reverse-mode tape,
//! Adam, and finite-difference verification live alongside the model.

pub mod attention;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;
