//! Crowd-head localization by compressed-sensing output encoding (CSOE).
//!
//! Sparse 2D point sets (head locations) are encoded into dense code vectors:
//! a Radon transform turns the point map into a sparse sinogram, and a random
//! Gaussian sensing matrix compresses each sinogram column into a short code
//! (`x = D a`). A small observation network regresses the code from an image;
//! unrolled shrinkage-thresholding layers recover the sinogram from the code;
//! filtered backprojection and peak extraction turn it back into coordinates.
//!
//! The pipeline stages map onto the modules:
//!
//! 1. [`radon`] – point map ↔ sinogram conversion and peak decoding.
//! 2. [`sensing`] – Gaussian sensing matrices and the `x = D a` encoding.
//! 3. [`recovery`] – ISTA, trainable LISTA layers, and a smoothed
//!    high-precision solver used as a differentiation oracle.
//! 4. [`recon_grad`] – analytic backpropagation through the reconstruction
//!    layer (exact support-based rules and batch-stable approximations).
//! 5. [`obsnet`] – the observation network: shared-weight dilated branches,
//!    channel gating, center pooling, all with hand-written backward passes.
//! 6. [`scene`] / [`training`] – synthetic scene generation and the joint
//!    end-to-end trainer.
//! 7. [`metrics`] / [`ablation`] – localization metrics, density-stratified
//!    analysis, and the component ablation harness.
//!
//! Batch-shaped inner loops (per-sample training, per-column recovery,
//! backprojection rows) run on rayon when the default `parallel` feature is
//! enabled; results are bitwise identical to the sequential fallback because
//! every reduction happens in fixed order (see [`exec`]).

pub mod ablation;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod obsnet;
pub mod radon;
pub mod recon_grad;
pub mod recovery;
pub mod scene;
pub mod sensing;
pub mod training;

pub use error::{Error, Result};
