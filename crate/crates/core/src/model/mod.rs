//! The tensor-channel equivariant network.
//!
//! Every atom carries scalar, vector and symmetric rank-2 tensor channels.
//! Each interaction block updates the scalars from invariant messages, then
//! the vectors from directional messages, then the tensors from RR/RV/VV
//! basis messages, each with a residual connection. Two readouts are
//! available: a gated superposition of the tensor channels and the
//! readout-only baseline that builds the tensor from vector features.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{Checkpoint, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Branches, ModelConfig, Readout};
pub use network::{blocks_to_mat3, AtomState, Bound, GraphBatch, Model};
pub use params::{param_count, param_specs, Init, ParamSet, ParamSpec, HEAD_INIT_SCALE, MAX_Z};
