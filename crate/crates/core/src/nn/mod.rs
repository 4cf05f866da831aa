//! Small 3D classification networks: convolution levels followed by either
//! an MLP head or two self-attention heads feeding the MLP.

pub mod augment;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod spec;
pub mod train;

pub use augment::{augment, ZcaWhitener};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{attention_head, Act};
pub use model::{softmax, ForwardOutput, TrainedModel};
pub use spec::{AugmentConfig, Backbone, ConvLevelSpec, HeadSpec, MlpSpec, NetworkSpec, TrainConfig, NUM_CLASSES};
pub use train::{train, EarlyStopping, LabeledCohort, LabeledExample, StopDecision, TrainReport};
