//! Modular multilingual translation training.
//!
//! Each language owns exactly one encoder and one decoder. Modules are trained
//! jointly over a schedule of translation directions, new languages are added
//! by training a fresh module against a frozen existing one, and any encoder
//! can be composed with any decoder at inference time.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod lang;
pub mod registry;
pub mod seed;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod transformer;

pub use error::{Error, ErrorKind, Result};
pub use lang::{Direction, LanguageId};
pub use tokenizer::BpeModel;
