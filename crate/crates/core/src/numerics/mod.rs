//! Dense tensors, MLPs with reverse passes, Adam, and parameter checkpoints.

mod adam;
mod checkpoint;
mod mlp;
mod ops;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{hex_digest, Checkpoint, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{Activation, Mlp, Params, Trace};
pub use tensor::Tensor;
pub use ops::{expectile_grad, expectile_loss, logsumexp, mean, softmax, std_dev, Normalizer};
