//! Diffusion-based lesion detection as iterative noise-to-box refinement.
//!
//! The crate trains a small denoiser to pull noisy box proposals onto lesions
//! in CT-like images and refines random boxes into detections with a
//! deterministic DDIM sampler. Training targets are densified with a
//! center-aligned box padding strategy so that every image supplies a full
//! set of regression targets even when it contains a single lesion.
//!
//! Module map:
//! - [`geometry`]: boxes, coordinate spaces, IoU/GIoU.
//! - [`diffusion`]: cosine noise schedule, forward corruption, DDIM update.
//! - [`padding`]: ground-truth padding strategies (center-aligned and ablation baselines).
//! - [`matching`]: Hungarian assignment and the set loss with analytic gradients.
//! - [`denoiser`]: the pluggable denoiser — a trainable perceptron over
//!   ROI-pooled multi-window features, plus a cheating oracle for pipeline tests.
//! - [`pipeline`]: training and inference orchestration.
//! - [`synthdata`]: synthetic CT-like phantom generator and dataset I/O.
//! - [`evalmetrics`]: TP/FP assignment, FROC curve, sensitivity at fixed FPPI, NMS.

pub mod denoiser;
pub mod diffusion;
pub mod evalmetrics;
pub mod geometry;
pub mod matching;
pub mod padding;
pub mod pipeline;
pub mod synthdata;
