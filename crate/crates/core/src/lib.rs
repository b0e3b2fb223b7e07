//! Core library of the myoband workbench: wire protocol, signal synthesis,
//! dataset recordings, preprocessing, features, classifiers, quality
//! metrics, online decoding and the benchmark harness.

pub mod features;
pub mod harness;
pub mod models;
pub mod online;
pub mod preprocess;
pub mod protocol;
pub mod quality;
pub mod recording;
pub mod source;
pub mod stats;
pub mod synth;
