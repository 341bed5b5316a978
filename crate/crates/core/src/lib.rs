//! Multi-task classification of entity modifiers.
//!
//! Given pre-identified entity mentions in text, predict one label per
//! modifier type (negation, subject, uncertainty, severity, ...) with a
//! shared encoder and one softmax head per modifier.

pub mod cli;
pub mod corpus;
pub mod evaluate;
pub mod featurize;
pub mod model;
pub mod train;
pub mod util;
