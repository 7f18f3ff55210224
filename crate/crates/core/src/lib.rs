//! Privileged pooling: keypoint-supervised attention maps that gate first- and
//! second-order pooling of a convolutional feature map.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and finite-difference checking
//! - [`nn`]: convolution and linear layers
//! - [`linalg`]: Newton–Schulz matrix square root and a Jacobi eigen oracle
//! - [`attention`]: attention head and the attention losses
//! - [`pooling`]: AvgPool, AvgPrPool, CovPool and CovPrPool
//! - [`model`]: backbone + attention + pooling + classifier, checkpoints
//! - [`data`]: synthetic biased dataset, annotations, augmentation
//! - [`train`]: SGD with momentum and the training loop
//! - [`eval`]: accuracy reports, attention cropping, attention export
//! - [`experiment`]: seeded train-and-evaluate trials
//! - [`cli`]: the `privpool` command line

pub mod attention;
pub mod check;
pub mod cli;
pub mod data;
mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod pooling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, TensorError, Var};

/// Number of worker threads, honouring `PRIVPOOL_THREADS` when set.
pub fn worker_threads() -> usize {
    std::env::var("PRIVPOOL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Builds a rayon pool capped by [`worker_threads`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))
}
