//! Heterogeneous matrix factorization: matrix completion with Dirichlet-process
//! mixture priors on both the user and the item factors.
//!
//! Inference comes in three flavours that share one state type, [`ModelState`]:
//! batch coordinate ascent ([`batch`]), streaming updates with component
//! spawning and merging ([`online`]), and empirical-Bayes hyperparameter
//! updates ([`empirical`]).

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod batch;
pub mod data;
pub mod empirical;
pub mod error;
pub mod math;
pub mod model;
pub mod online;
pub mod ratings;

pub use baselines::{fit_bpmf, SgdConfig, SgdModel, StepSchedule};
pub use batch::{fit_batch, BatchConfig, BatchFit};
pub use error::{HemfError, Result};
pub use math::SymmetricPd;
pub use model::{
    compute_elbo, init_state, predict_entry, sample_from_model, CommunityPosterior, CommunityUpdate,
    FactorPosterior, Hyperparameters, MembershipPosterior, ModelState, Side, SideState, StickPosterior,
    SyntheticData,
};
pub use online::{ChunkEntry, ChunkReport, EntryKind, GlobalUpdate, OnlineConfig, OnlineSession, RatingChunk};
pub use ratings::{Rating, SparseRatings};
