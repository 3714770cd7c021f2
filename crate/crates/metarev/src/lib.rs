//! Meta-review generation over peer-review conversation forests.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`conversation`]: typed documents, samples and tree statistics
//! - [`relations`]: the seven document-level relation matrices
//! - [`assembly`]: vocabulary, delimiter-separated input assembly, token masks
//! - [`autograd`]: a small reverse-mode tape over dense `f64` matrices
//! - [`model`]: the micro encoder-decoder with relation-sparse attention,
//!   block-sparse attention kernels and beam-search generation
//! - [`heads`]: auxiliary prediction heads and the combined training objective
//! - [`training`]: deterministic training loop, optimizer, checkpoints
//! - [`corpus`]: conflict labeling, corpus statistics, abstractiveness
//! - [`evaluation`]: summary-overlap metric and the acceptance-consistency metric
//! - [`synth`]: deterministic synthetic corpora for tests and smoke runs

pub mod assembly;
pub mod autograd;
pub mod conversation;
pub mod corpus;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod relations;
pub mod synth;
pub mod training;
