//! Worker-AI collaborative dataset creation for NLI-style classification.

pub mod audit;
pub mod corpus;
pub mod dynamics;
pub mod exemplars;
pub mod filtering;
pub mod pipeline;
pub mod prompting;
pub mod review;
pub mod service;
pub mod synth;
pub mod text;
pub mod toytrainer;
