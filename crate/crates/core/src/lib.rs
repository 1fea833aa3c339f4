//! Domain adaptation through the vicinal space between a labeled source
//! domain and an unlabeled target domain.
//!
//! The crate is `no_std` (with `alloc`) and contains everything numeric:
//! a small tape-based reverse-mode autodiff engine, synthetic domain
//! pairs, the encoder / classifier / EMP-learner model, the EMP-Mixup
//! minimax, contrastive views and labels, target-label consensus, the
//! training step and the equilibrium diagnostics. File formats, config
//! parsing and the command line live in the `covi` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod math;

pub mod checkpoint;
pub mod consensus;
pub mod contrastive;
pub mod diagnostics;
pub mod domains;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod vicinal;

pub use error::{Error, Result};
pub use model::{Group, ModelDims, ModelParams, RatioGrid};
pub use objective::Objective;
pub use optim::Sgd;
pub use tensor::{Gradients, Tape, Tensor, Var};
