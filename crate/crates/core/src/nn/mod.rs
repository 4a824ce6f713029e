//! A small trainable 3D segmenter with reverse-mode differentiation.

pub mod checkpoint;
mod conv;
pub mod loss;
pub mod net;
pub mod optim;
pub mod tape;
pub mod train;

pub use checkpoint::{
    decode_checkpoint, decode_checkpoint_with_meta, encode_checkpoint, encode_checkpoint_with_meta, layer_schemes,
    load_checkpoint, save_checkpoint, CheckpointError, LayerSchemes, WeightEncoding,
};
pub use loss::{cross_entropy, cross_entropy_logits, LossBreakdown};
pub use net::{ActScales, Forward, Net, NetConfig, NetError, QuantPlan, QuantTap};
pub use optim::{Adam, PlateauScheduler};
pub use tape::{Gradients, Tape, Var};
pub use train::{class_frequencies, evaluate_objective, train, EpochRecord, ObjectiveEval, ObjectiveWeights, Scan, TrainConfig, TrainError, TrainOutcome};
