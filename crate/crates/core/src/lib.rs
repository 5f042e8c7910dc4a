//! Event-gated streaming video dialogue at desk scale.
//!
//! A perception loop (state-space feature extractor + learned gate) runs at
//! frame cadence with constant per-frame cost; an autoregressive cognition
//! backend is invoked only when the gate opens. The crate also ships the
//! dataset construction pipeline, the two-stage training procedure, the
//! timing/language evaluation metrics, and a per-step-invocation baseline
//! for complexity comparison.

pub mod cognition;
pub mod datagen;
pub mod epfe;
pub mod features;
pub mod gate;
pub mod memory;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod training;
