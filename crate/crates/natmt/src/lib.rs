//! Non-autoregressive neural machine translation with enhanced decoder
//! inputs, end to end: dense-tensor autodiff, corpus handling, phrase
//! tables, transformer teacher/student models, distillation, training with
//! alignment and adversarial regularizers, length-window inference with
//! teacher rescoring, BLEU, and latency accounting.

pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder_input;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod inference;
pub mod phrase;
pub mod tape;
pub mod training;
pub mod tensor;
pub mod toy;

pub use error::{CorpusError, EvalError, ModelError, TableError, TensorError};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
