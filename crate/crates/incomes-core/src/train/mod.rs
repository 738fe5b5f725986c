//! Training: frozen-teacher supervision, the combined loss with
//! differentiable recompression, batch-size sampling, and the pretraining
//! and edit-training loops.

pub mod config;
pub mod loss;
pub mod pretrain;
pub mod run;
pub mod sampler;
pub mod teacher;

pub use loss::{batch_step, BatchStats, LossOptions, TrainExample};
pub use sampler::BatchSizeSampler;
pub use teacher::{Teacher, TeacherOutput};
