//! The toy masked-diffusion transformer, its training loop, and the logit
//! oracle abstraction the decoder runs against.

mod oracle;
mod training;
mod transformer;
mod vocab;
pub mod weights;

pub use oracle::{LogitOracle, ScriptedOracle};
pub use training::{
    corrupt, make_training_example, padded_targets, train, train_with_progress, TrainingConfig,
    TrainingExample, TrainingItem,
};
pub use transformer::{DiffusionModel, ForwardCache, ModelConfig};
pub use vocab::{TokenId, Vocabulary};
pub use weights::{load_weights, load_weights_for, save_weights};

/// Reserved token ids and content-token helpers of the built-in vocabulary.
pub mod tokens {
    pub use super::vocab::{
        ADD, COPY, DIGIT_BASE, EOS, MASK, NUM_WORDS, PERIOD, PLUS, QA, SEP, WORD_BASE,
    };
}
