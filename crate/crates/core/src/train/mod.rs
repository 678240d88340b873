//! Masked pinball objective, optimizer, schedule, checkpoints and the loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, Dtype,
};
pub use loss::{pinball_loss, pinball_loss_graph};
pub use optim::{clip_grad_norm, lr_at, optimizer_step, OptimizerState, TrainConfig};
pub use trainer::{step_rng, train_loop, SampleSource, StepMetrics, Trainer, WindowSpec};
