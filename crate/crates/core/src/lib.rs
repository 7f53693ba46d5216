//! Poker world-model laboratory: synthetic six-max no-limit hold'em hands in
//! PHH text form, a masked-token GPT trained on them, and probes that read
//! hand rank, actions and equity back out of its residual stream. A small
//! exact POMDP toolkit checks the belief-state linearity identity that
//! motivates linear probing.

pub mod agents;
pub mod analysis;
pub mod belief;
pub mod cards;
pub mod datagen;
pub mod engine;
pub mod equity;
pub mod model;
pub mod par;
pub mod phh;
pub mod probes;
pub mod tokenizer;
