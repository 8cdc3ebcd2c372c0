//! Residual-conditioned optimal transport for all-in-one image restoration.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and the reverse-mode autodiff tape.
//! * [`degrade`]: synthetic degradations, procedural scenes, datasets and
//!   Fourier residual statistics.
//! * [`objective`]: transport costs, the Fourier residual regulariser, the
//!   unpaired/paired transport losses, the potential loss and the
//!   contrastive task loss.
//! * [`nets`]: the two-pass transport map (generator + residual embedding
//!   module) and the potential network.
//! * [`train`]: RMSProp and the alternating potential/transport optimisation.
//! * [`ot`]: exact discrete and 1-D optimal transport oracles.
//! * [`eval`]: PSNR/SSIM, the embedding probe and ablation runs.
//! * [`io`]: binary tensor files, checkpoints, manifests and configs.

pub mod degrade;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod nets;
pub mod objective;
pub mod ot;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
