//! Cross-ray neural radiance fields on the CPU.
//!
//! A self-contained pipeline for novel-view synthesis from "unconstrained"
//! photo collections — multi-view images of one scene that differ in global
//! appearance (exposure, tint, sky) and contain transient occluders:
//!
//! * [`tensor`] — dense tensors with a tape-based reverse-mode autodiff
//!   engine and a finite-difference gradient checker.
//! * [`linalg`] — symmetric eigendecomposition (cyclic Jacobi), PSD matrix
//!   square roots, and the closed-form optimal feature-statistics transform
//!   with its optimality oracle.
//! * [`scene`] — procedural generation of synthetic photo collections with
//!   known cameras, per-image appearance variants, occluders and masks.
//! * [`field`] — positional encoding, the radiance-field MLP, stratified ray
//!   sampling, volume rendering, and cross-ray feature grids.
//! * [`appearance`] — appearance/content encoders, the learned
//!   covariance-product transform, the convolutional decoder, and the
//!   appearance loss.
//! * [`transient`] — the lightweight segmentation network, grid sampling of
//!   visibility maps, and the masked occlusion loss.
//! * [`trainer`] — the training loop with ablation-variant wiring,
//!   checkpointing and CSV logging.
//! * [`render`] — tiled full-image inference, amortized multi-appearance
//!   rendering, and appearance interpolation.
//! * [`metrics`] — PSNR, SSIM, mask IoU, and dataset evaluation.
//! * [`cli`] — the command-line surface.

pub mod appearance;
pub mod cli;
pub mod field;
pub mod linalg;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod tensor;
pub mod trainer;
pub mod transient;
