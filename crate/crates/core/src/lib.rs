//! Output-preserving weight rescaling for attention and low-rank adapters,
//! with the numerical checks and simulations that go with it.

pub mod attention;
pub mod checkpoint;
pub mod landscape;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod transform;
pub mod verify;

pub use attention::{AttentionLayout, AttentionWeights, LoraPair};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, DType};
pub use rng::Rng;
pub use tensor::Matrix;
pub use transform::{Balancer, NormKind, Rescale, ScalePlan, Strategy};
