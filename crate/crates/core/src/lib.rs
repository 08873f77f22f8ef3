//! Sharpness-aware training of hybrid models: a scientific ODE/PDE part with
//! a few interpretable parameters (θ) composed with a neural network (φ).
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and the reverse-mode tape
//! - [`nn`]: the partitioned parameter vector, MLPs and small conv nets
//! - [`ode`]: taped RK4, Dormand–Prince 5(4) for data generation, the Laplacian
//! - [`hybrid`]: pendulum, Duffing and reaction-diffusion hybrid models
//! - [`optim`]: losses, regularisers, Adam, cosine schedule and φ-only SAM
//! - [`data`]: synthetic dataset generation and the `HSDT` file format
//! - [`harness`]: configs, multi-seed runs, sweeps, reports and checkpoints

pub mod data;
pub mod harness;
pub mod hybrid;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod tensor;

mod binio;
pub mod rng;

use std::path::PathBuf;

pub use tensor::{Tape, Tensor, TensorError, Var};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid parameter layout: {0}")]
    Layout(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integration failed at step {step}: {msg}")]
    Integration { step: usize, msg: String },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
