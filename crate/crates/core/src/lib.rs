//! Dense-to-dynamic-MoE pipeline for a miniature next-scale image
//! transformer: autodiff core, synthetic token pyramids, the transformer
//! itself, activation sparsification, expert construction, norm-regression
//! routing, FLOP accounting and the experiment harness.

pub mod autodiff;
pub mod dynrouter;
pub mod error;
pub mod flops;
pub mod harness;
pub mod model;
pub mod moefy;
pub mod optim;
pub mod pyramid;
pub mod sparsify;
pub mod tensor;

pub use dynrouter::{gate, ForwardMode, Gating, GatingTrace, MoeLayer, RouterNet, TauSchedule};
pub use error::{Error, Result};
pub use flops::{count_generation, count_linear, FlopsReport, TimingReport};
pub use model::{ModelConfig, NextScaleModel, SamplerConfig};
pub use moefy::{ClusterConfig, ExpertSet};
pub use pyramid::{PyramidConfig, Sample, TokenHierarchy};
pub use tensor::Tensor;
