//! Toy-scale laboratory for head-level attention-perturbation guidance in a
//! micro diffusion transformer trained by flow matching.

pub mod attention;
pub mod data;
pub mod dit;
pub mod error;
pub mod io;
pub mod objectives;
pub mod rng;
pub mod sampler;
pub mod search;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use attention::{HeadId, PerturbMethod, PerturbSpec};
pub use dit::{dit_forward, Cond, DitConfig, DitWeights};
pub use error::{Error, Result};
pub use objectives::ObjectiveId;
pub use rng::Rng;
pub use sampler::{sample, GuidanceConfig, PertAnchor};
pub use search::{headhunt, SearchConfig, SearchState};
pub use sweep::{sweep, SweepConfig};
pub use tensor::Tensor;
pub use train::{train, TrainConfig};
