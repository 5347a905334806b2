//! Kinship-coupled hidden Markov models for joint copy-number analysis.
//!
//! Several per-individual Gaussian-emission chains share one transition
//! matrix and are tied through a similarity-weighted agreement factor: joint
//! transitions into a state tuple are down-weighted by `ω^{s_ij}` for every
//! ordered pair of individuals that disagrees. The crate provides
//!
//! - exact EM on the joint `Q^I`-state chain for small panels, with a
//!   brute-force enumeration oracle for tests ([`exact`]);
//! - structured mean-field variational EM that scales to large panels, the
//!   independent-chains baseline being its `ω = 1` special case
//!   ([`variational`]);
//! - posterior decoding rules ([`decoding`]), state-count and
//!   coupling-strength selection ([`selection`]);
//! - a window-design simulator, evaluation metrics and a replicated
//!   benchmark harness ([`simulate`]);
//! - file formats: signal/kinship matrices, SNP kinship, log R ratios,
//!   model archives and report tables ([`io`]).

pub mod decoding;
pub mod error;
pub mod exact;
pub mod io;
pub mod model;
pub mod numeric;
pub mod selection;
pub mod simulate;
pub mod variational;

pub use error::{ChmmError, Result};
pub use model::{
    ChainParams, CouplingParams, EmissionMode, EmissionParams, JointStateCodec, ModelDims,
    ModelParams, ObservationMatrix, SimilarityMatrix, DEFAULT_JOINT_STATE_CAP,
};
