//! Streaming all-in-one video restoration guided by language-grounded
//! degradation prompts.
//!
//! The crate covers the whole offline pipeline: synthesizing degraded video
//! pairs ([`degrade`]), grounding frames in text and embedding the
//! descriptions ([`grounding`]), the restoration network itself ([`model`]),
//! its training loop ([`train`]) and evaluation / analysis tools ([`eval`]).

pub mod autograd;
pub mod cli;
pub mod degrade;
pub mod eval;
pub mod fsutil;
pub mod grounding;
pub mod model;
pub mod rng;
pub mod train;
pub mod video;
