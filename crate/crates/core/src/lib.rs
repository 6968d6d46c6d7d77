//! Speaker embeddings learned from unlabeled dialogues.
//!
//! A small GRU encoder is trained with contrastive losses that treat each
//! dialogue as a class, while a compactness-based rejection step damps
//! dialogues that likely mix several speakers. Everything runs on synthetic
//! corpora with known ground truth so results can be checked by EER.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numeric;
pub mod rejection;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
