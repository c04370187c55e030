//! Laboratory for attention-block placement in ResNet re-identification
//! backbones: a small reverse-mode tensor engine, SE / HAC / non-local /
//! channel-wise non-local blocks, a ResNet-50-style backbone with enumerable
//! insertion positions, analytic and measured cost models, re-id training and
//! evaluation, a synthetic dataset, and the design-space search on top.

pub mod tensor;
pub mod nn;
pub mod blocks;
pub mod backbone;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod eval;
pub mod training;
pub mod nas;
pub mod report;

/// Version stamped into every CSV/JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;
