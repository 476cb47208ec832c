//! Token-level fixation prediction: corpus preparation, the
//! BiLSTM/transformer regressor, training and cross-validation.

mod corpus;
mod model;
mod train;

pub use corpus::{
    align_subword_labels, build_examples, standardize_fixations, FixationRecord, GazeExample, LabeledSentence,
};
pub use model::{
    load_word_vectors, parse_word_vectors, predict_gaze, GazeConfig, GazeModel, GazePredictor, GazeScores,
};
pub use train::{
    cross_validate_gaze, evaluate_mse, example_mse, kfold_partition, predict_batch, train_gaze, CrossValidationReport,
    GazeTrainConfig, GazeTrainReport,
};
