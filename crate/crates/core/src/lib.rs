//! Energy-based generative modeling with restricted Boltzmann machines.
//!
//! This crate implements binary RBMs, convolutional RBMs, and deep restricted
//! Boltzmann networks (DRBNs) — stacks of RBM layers whose hidden units feed
//! the next layer's visible units directly. All layers of a DRBN are trained
//! jointly with persistent contrastive divergence: each update collects
//! data-dependent statistics from a single sampled upward pass, advances a
//! pool of persistent fantasy particles by `k` full up-and-down Gibbs cycles,
//! and applies one Adam step per layer, all against the pre-update parameters.
//!
//! Module map:
//!
//! - [`tensor`] — row-major dense tensors plus the matrix kernels under everything
//! - [`rng`] — seeded, splittable random streams (ChaCha8-based)
//! - [`math`] — sigmoid/softplus/log-sum-exp and Bernoulli sampling
//! - [`adam`] — Adam optimizer state and update step
//! - [`conv`] — strided valid convolution, its transpose, and the filter-gradient kernel
//! - [`rbm`] — a dense binary RBM: energy, conditionals, free energy, gradients
//! - [`conv_rbm`] — a convolutional RBM with shared filters and a scalar visible bias
//! - [`layer`] — the dense/conv layer abstraction a network is composed of
//! - [`net`] — layer specs, the architecture mini-language, passes, generation
//! - [`trainer`] — joint PCD training with persistent particles
//! - [`data`] — IDX/PNM ingestion, binarization, grid export, synthetic corpora
//! - [`classifier`] — softmax head on frozen features, fine-tuning, FC baseline
//! - [`persistence`] — versioned binary model files and resumable checkpoints

pub mod adam;
pub mod classifier;
pub mod conv;
pub mod conv_rbm;
pub mod data;
pub mod error;
pub mod layer;
pub mod math;
pub mod net;
pub mod persistence;
pub mod rbm;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
