//! Grammar-preserving counterfactuals for LLM prompts.
//!
//! A prompt's dependency parse is turned into a tree of removable segments
//! ([`segment`]); valid segment combinations are counted, enumerated, sampled
//! and realized as text ([`engine`]); model responses to each variant are
//! scored ([`evaluator`]) and explained with KernelSHAP ([`attribution`]).

pub mod analysis;
pub mod attribution;
pub mod bench;
pub mod cli;
pub mod conllu;
pub mod document;
pub mod engine;
pub mod evaluator;
pub mod gateway;
pub mod rules;
pub mod segment;
pub mod service;
