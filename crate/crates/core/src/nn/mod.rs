//! Trainable reconstruction: tensors, differentiable ops, the projection
//! encoder, the volume decoder, losses, the optimizer, and checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod ops;
pub mod tensor;

pub use adam::{scheduled_lr, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decoder::{decoder_backward, decoder_forward, DecoderGrads, DecoderParams};
pub use encoder::{encoder_backward, encoder_forward, EncoderGrads, EncoderParams};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use losses::{
    projection_loss, reconstruction_loss, sample_ray_batch, total_loss, LossValues, LossWeights,
    RayBatch,
};
pub use model::{
    make_training_set, train_loop, train_loop_with, ModelConfig, ModelState, TrainSample,
};
pub use tensor::Tensor;
