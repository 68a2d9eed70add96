//! The segmentor: strided convolutional encoder, recurrent criss-cross
//! attention, a 1×1 decoder head with upsampling and a sigmoid output.

mod checkpoint;
mod model;
mod optim;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{binarize, build_segmentor, Param, ProbabilityMap, Segmentor, SegmentorConfig, Upsample};
pub use optim::{poly_lr, Sgd};
pub use train::{stack_images, train, BatchSampler, LogRow, MaskPair, TrainConfig, TrainLog, TrainOutcome};
