//! Sequential recommendation with per-sequence architecture routing.
//!
//! A light router reads a user's interaction history and picks one
//! `(embedding width, hidden width, depth)` submodel out of a weight-sliced
//! transformer supernet. Router and supernet train jointly: the discrete
//! choice is sampled with the Gumbel-max trick, gradients reach the router
//! through its Gumbel-softmax relaxation, and two auxiliary losses keep the
//! route distribution balanced and steer easy users toward small submodels.

pub mod backbone;
pub mod data;
pub mod dynlayers;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod router;
pub mod trainer;

pub use backbone::{Route, RoutingSpace, Supernet, SupernetConfig};
pub use data::{Dataset, InteractionSequence, SyntheticConfig};
pub use error::{Error, Result};
pub use numerics::{ParamId, ParamStore, RngState, Tape, Tensor, Var};
pub use router::{Router, RouterOutput};
pub use trainer::{Model, TrainConfig};
