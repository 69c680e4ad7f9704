//! Hybrid deep embedding recommender with aspect-level explanations.
//!
//! The crate learns dynamic user/item embeddings and aspect
//! preference/quality vectors from ratings and time-stamped reviews,
//! predicts ratings, and scores aspect explanations with the GOFE metric.
//!
//! Pipeline stages map onto the modules below:
//!
//! 1. [`corpus`] — parse review data, assign ids, bucket by time, split.
//! 2. [`aspects`] — match lexicons against reviews and build the
//!    counting/sentiment supervision targets.
//! 3. [`reviewvec`] — pre-train per-(entity, time-step) review embeddings.
//! 4. [`model`] — the network itself, built on the [`numerics`] autodiff tape.
//! 5. [`trainer`] — mini-batch optimization with gradient checking.
//! 6. [`eval`] / [`explain`] — RMSE/MAE, GOFE, and explanation rendering.
//! 7. [`cli`] — subcommand orchestration over a single config file.

pub mod error;
pub mod numerics;

pub use error::{HdeError, Result};
