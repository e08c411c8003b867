//! Desk-scale benchmark for replay-based class-incremental semantic
//! segmentation.
//!
//! A frozen-encoder segmentation model learns classes in incremental steps.
//! Old-class knowledge is preserved by replaying images from a conditional
//! generator or a keyword-retrieval source, pseudo-labeled by small per-step
//! helper decoders, and by self-inpainting the background with the previous
//! model's predictions. The crate ships the synthetic dataset generator, the
//! incremental protocols, the model and training loop, the replay machinery,
//! baselines (fine-tuning, store-and-replay, joint training), metrics, and a
//! CLI for running and sweeping experiments.

pub mod cli;
pub mod core;
pub mod eval;
pub mod protocol;
pub mod replay;
pub mod segmodel;
pub mod synthdata;
pub mod trainer;
