//! Desk-scale laboratory for merging independently fine-tuned experts into a
//! single multitask model.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`svd`], [`rng`] — dense f64/f32 arithmetic, a one-sided
//!   Jacobi SVD, and a splittable counter-based PRNG.
//! - [`autodiff`] — reverse-mode gradients for the small layer vocabulary
//!   (affine, tanh, softmax, distance losses) plus gradient descent with
//!   decoupled weight decay.
//! - [`model`], [`checkpoint`] — parameter sets, task vectors, task heads,
//!   expert bundles and their text checkpoint format (`.mfckpt`).
//! - [`merge`] — seven merging operators over task vectors.
//! - [`interference`], [`ri`] — the cross-task interference metric and the
//!   resolving-interference adaptation loop, plus the distillation baselines.
//! - [`suite`], [`train`], [`experiment`], [`report`] — synthetic multi-task
//!   suites, expert training, the experiment battery and report emission.
//!
//! All numeric kernels are generic over the scalar type (`f32`/`f64` via
//! [`Scalar`]); the harness layers pin `f64`, which is also the default type
//! parameter everywhere.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod interference;
pub mod merge;
pub mod metric;
pub mod model;
pub mod report;
pub mod ri;
pub mod rng;
pub mod scalar;
pub mod suite;
pub mod svd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Concrete aliases for the two supported scalar types.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamSet64 = model::ParamSet<f64>;
pub type TaskVector64 = model::TaskVector<f64>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Runs `f` inside a rayon pool with `jobs` worker threads (`None` keeps the
/// global pool). Results are scheduling-independent by construction, so this
/// only affects wall-clock time.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}
