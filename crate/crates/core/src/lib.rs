//! Deterministic building blocks for long-form reasoning data pipelines.
//!
//! This crate is the pure, IO-free half of the `thoughtforge` toolkit:
//!
//! - [`format`]: the four-marker trajectory format — parsing, canonical
//!   rendering, prompt construction, and solution-completion prompts.
//! - [`verify`]: answer extraction from rendered solutions and math-aware
//!   equivalence checking against ground truths.
//! - [`corpus`]: problems, quality scores (repetition, language mix, near
//!   duplicates), the fixed-order rejection filter, and seeded
//!   domain/difficulty mixing.
//! - [`backend`]: the text-generation backend contract, perplexity, and a
//!   deterministic simulated backend for closed-loop runs without a server.
//! - [`record`]: trajectory records and provenance as stored in pools.
//! - [`refine`]: SFT selection and preference-pair construction rules.
//!
//! Everything here is `no_std`-compatible (with `alloc`); the default `std`
//! feature only widens dependency internals. File formats, HTTP transport,
//! concurrency, and the CLI live in the companion `thoughtforge` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backend;
pub mod corpus;
pub mod format;
pub mod record;
pub mod refine;
mod util;
pub mod verify;

pub use backend::{
    compute_perplexity, Backend, BackendError, GenRequest, ScoredText, SimulatedBackend,
    SimulatorConfig,
};
pub use corpus::{Difficulty, Domain, FilterPolicy, FilterReport, MixSpec, Problem};
pub use format::{parse_trajectory, render_trajectory, FormatError, PromptTemplate, Trajectory};
pub use record::{Origin, Provenance, TrajectoryRecord};
pub use refine::{PairMode, PreferencePair, SelectionPolicy};
pub use verify::{equivalent, extract_answer, GroundTruth, Verdict, VerdictReason};
