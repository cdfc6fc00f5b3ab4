//! Small continuous-action soft actor-critic learner.

pub mod adam;
pub mod mlp;
pub mod policy;
pub mod replay;
pub mod sac;

pub use adam::Adam;
pub use mlp::{Gradients, Mlp, Trace};
pub use policy::{ActionMode, GaussianPolicy, PolicySample};
pub use replay::{Batch, ReplayBuffer};
pub use sac::{SacAgent, SacConfig, UpdateDiagnostics};
