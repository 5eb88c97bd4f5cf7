//! Sparse channel estimation under structured interference.
//!
//! The channel `h` and the interference `n` in `y = A h + n + ε` are sampled
//! jointly by a K-sample reverse diffusion. The channel prior is a
//! zero-mean complex Gaussian with per-tap variances `γ` that are re-estimated
//! by EM at every diffusion step (the SBL mechanism), while the interference
//! prior enters only through its score: analytic for Gaussian-process
//! interference, or a learned convolutional network for structured sources
//! such as LFM chirps.
//!
//! Module map:
//!
//! * [`signal`]: measurement model, scenario generators, `.cbin` signal files
//! * [`sde`]: VP schedule, complex perturbation kernel, Tweedie denoiser
//! * [`score`]: prior score providers, including the `.dmsc` network engine
//! * [`guidance`]: DMPS / ΠGDM perturbed-likelihood scores and K-sample assembly
//! * [`sampler`]: predictor-corrector sampler with EM updates of `γ`
//! * [`baselines`]: MMSE, OMP and EM-SBL estimators that treat `n + ε` as white
//! * [`bench`]: Monte-Carlo experiment runner and report emission
//! * [`config`]: flat `key = value` configuration files

pub mod baselines;
pub mod bench;
pub mod config;
pub mod error;
pub mod guidance;
pub mod linalg;
pub mod sampler;
pub mod score;
pub mod sde;
pub mod signal;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use signal::ComplexVector;
