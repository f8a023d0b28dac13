//! The pipeline around the core building blocks: a durable record pool
//! with versioned dataset manifests, exploration against generation
//! backends, teacher-dump ingest, selection previews, and training-file
//! emission — plus the command line that wires the stages together.

pub mod cli;
pub mod config;
pub mod emit;
pub mod explore;
pub mod http;
pub mod ingest;
pub mod iterate;
pub mod pool;
pub mod stats;
