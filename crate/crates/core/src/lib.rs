//! Distributed stochastic optimization with quantized gradient communication.
//!
//! The crate simulates a parameter server driving `n` workers that each hold a
//! finite sum of `m` component losses. Workers compress gradient *differences*
//! with an unbiased quantization operator before "transmitting" them, the
//! DIANA trick that lets the compression noise vanish as the per-worker shift
//! vectors learn the optimal gradients. On top of the plain DIANA step the
//! crate implements the variance-reduced variants (L-SVRG, SAGA and epoch
//! SVRG), so the methods converge linearly to arbitrary accuracy instead of a
//! noise neighborhood.
//!
//! Everything is deterministic given the master seed: per-worker randomness is
//! derived from `(seed, worker, purpose, round)` and trajectories are
//! bit-identical across runs and thread counts. Every transmitted message is
//! accounted in a communication ledger under a declared bit model, which is
//! the x-axis of communication-efficiency comparisons.
//!
//! Module map:
//!
//! * [`quantize`] — unbiased quantization operators (random dithering, random
//!   sparsification, block dithering) with exact bit-cost accounting.
//! * [`problems`] — finite-sum logistic / quadratic objectives, regularizers
//!   and prox operators, smoothness constants, finite-difference checks.
//! * [`dataio`] — LIBSVM parsing, deterministic partitioning, synthetic
//!   problem generation.
//! * [`algos`] — single-round state transitions for DIANA, VR-DIANA (both
//!   variants) and SVRG-DIANA, plus unquantized reference methods and the
//!   theorem-prescribed default hyperparameters.
//! * [`metrics`] — Lyapunov functions and convergence diagnostics.
//! * [`engine`] — the simulated runtime: stream derivation, reference solves,
//!   experiment execution and traces.
//! * [`verify`] — the statistical property suites behind `qgrad verify`.

pub mod algos;
pub mod dataio;
pub mod engine;
pub mod linalg;
pub mod metrics;
pub mod problems;
pub mod quantize;
pub mod verify;
