//! Non-parametric conditional factor regression (NCFR).
//!
//! A multivariate linear regression `Y = Q (S ⊙ Z) + E_y`, `S ⊙ Z = P X + E_z`
//! whose latent layer has an unbounded number of sparse features selected by an
//! Indian Buffet Process mask `S`. Inference is Gibbs sampling with a collapsed
//! mask update and Metropolis-Hastings moves that create or retire features.
//!
//! Layout:
//!
//! * [`model`]: data types, joint likelihood, residuals, prediction.
//! * [`ibp`]: Indian Buffet Process densities, priors and simulation.
//! * [`gibbs`]: the conditional updates and the full sweep.
//! * [`proposals`]: new-feature candidate functions and annealing schedule.
//! * [`baselines`]: full-rank regression and fixed-K factor regression.
//! * [`synth`]: synthetic data and train/test splits.
//! * [`eval`]: prediction metrics and run summaries.
//! * [`runner`]: experiment configuration, chains, persistence.
//! * [`io`]: dataset file format.

pub mod baselines;
pub mod cputime;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod ibp;
pub mod io;
pub mod linalg;
pub mod model;
pub mod proposals;
pub mod runner;
pub mod synth;

pub use error::{NcfrError, Result};
pub use gibbs::{gibbs_sweep, SamplerOptions, SweepConfig, SweepReport};
pub use model::{AlphaMode, Hyperparams, LatentState, NoiseMode, RegressionDataset};
pub use proposals::{AnnealSchedule, ProposalKind, ProposalStrategy};

/// Random stream used by every sampler in the crate.
///
/// ChaCha8 is portable, serializable (checkpoints carry the exact stream
/// position) and supports independent streams for parallel chains.
pub type ChainRng = rand_chacha::ChaCha8Rng;
