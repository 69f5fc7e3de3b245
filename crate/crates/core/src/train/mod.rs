//! Loss, optimizer, training loop and checkpoints.

mod adam;
mod checkpoint;
mod engine;
mod loss;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use engine::{checkpoint_name, evaluate, is_checkpoint_epoch, predict_samples, train, EpochLog, TrainConfig};
pub use loss::bce_value;
