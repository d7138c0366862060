//! Synthesis of angiographic volumes from non-angiographic ones.
//!
//! The pipeline encodes each z-slice into a token grid ([`codec`]), derives
//! vessel-aware conditioning from the non-angiographic latents
//! ([`embedder`]), and runs an x₀-predicting latent diffusion model whose
//! blocks aggregate tokens along a minimum spanning tree of their features
//! ([`scan`]) and couple neighboring slices ([`attention`]). [`metrics`]
//! scores the result in 2D (PSNR, SSIM) and 3D (Dice, Jaccard, connectivity).

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod components;
pub mod config;
pub mod diffusion;
pub mod embedder;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod phantom;
pub mod pipeline;
pub mod scan;
pub mod selfcheck;
pub mod tokens;
pub mod volume;

pub use error::{Error, Result};
