//! Pretraining for a parameter-shared transformer encoder with three joint
//! objectives: whole-word masked language modeling, sentence order
//! prediction and word order prediction.

pub mod corpus;
pub mod corruption;
pub mod model;
pub mod numeric;
pub mod optimizer;
pub mod tokenizer;
pub mod trainer;
