//! Unsupervised consistency training across prompt-format variations.
//!
//! Each instance is scored under `V` semantically equivalent formats. A
//! strict-majority vote over the per-format predictions yields a pseudo-label;
//! training then combines a cross-entropy pull toward that label with
//! divergence losses that align the less confident formats to the confident
//! majority. The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, finite-difference checks
//! - [`scorer`]: the linear prompt-conditioned classifier and label scoring
//! - [`consensus`]: vote counting and the confident/non-confident split
//! - [`losses`]: consensus cross-entropy, JSD, flip KL, swarm baseline
//! - [`metrics`]: observed agreement, macro-F1 and the per-format report
//! - [`synthdata`]: synthetic multi-format tasks with stratified splits
//! - [`trainer`]: gradient descent, model selection and the study harnesses

pub mod consensus;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod scorer;
pub mod synthdata;
pub mod trainer;
