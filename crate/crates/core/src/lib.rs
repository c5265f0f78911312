//! Measure how vision encoders bind and segregate object information in
//! their token space.
//!
//! The pipeline runs from COCO annotations ([`coco`]) to balanced probing
//! datasets ([`tasks`]), reads per-layer token embeddings ([`store`]),
//! selects object tokens ([`select`]), trains linear probes ([`probe`]) and
//! turns the resulting accuracies into binding and entanglement scores
//! ([`measures`]).

pub mod coco;
pub mod measures;
pub mod probe;
pub mod seed;
pub mod select;
pub mod store;
pub mod tasks;
