//! Melody modelling with an LSTM built from first principles.
//!
//! The pipeline runs `midi` (bytes to events), `score` (events to quantized
//! note events), `corpus` (tokens, vocabularies, windows), `lstm` (the
//! network), `trainer` and `generator`. `numerics` holds the matrix type and
//! the seeded RNG shared by all of them.

pub mod midi;
pub mod numerics;
pub mod score;
pub mod corpus;
pub mod lstm;
pub mod trainer;
pub mod generator;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/midi.md")]
    mod midi {}
    #[doc = include_str!("../../../book/src/score.md")]
    mod score {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/lstm.md")]
    mod lstm {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
}
