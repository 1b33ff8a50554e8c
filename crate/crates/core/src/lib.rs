//! Desk-scale BERT-family encoders (BERT / ALBERT / DistilBERT / RoBERTa
//! variants) built from scratch, with a Stanford Sentiment Treebank
//! fine-tuning and evaluation harness.

pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod pretrain;
pub mod seeding;
pub mod tensor;
pub mod tokenizer;
pub mod treebank;

pub use error::{Error, Result};
