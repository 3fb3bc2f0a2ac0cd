//! Model assembly, training, evaluation, ablation and checkpoints.

pub mod ablate;
pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;

pub use ablate::{ablate, AblationRow, AblationTable, Axis};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use eval::{evaluate, read_records, write_dump, EmptyPredictor, Evaluation, ModelPredictor, OraclePredictor, Predictor, SampleDump};
pub use model::{DataShape, Model, Prediction};
pub use optim::{lr_at, AdamW};
pub use train::{batch_gradients, initial_params, train, LogLine, Trained};
