//! Linearithmic approximation of symmetric matrices.
//!
//! A symmetric `n x n` matrix is modelled as `Q D Q^T`, where `Q` is a product
//! of `lg(n)` butterfly layers of Givens rotations and `D` is diagonal. The
//! model is learned from input/output pairs `(x, H x)` by projected SGD, and
//! can track the Hessian of an objective online during gradient descent.

pub mod butterfly;
pub mod codec;
pub mod error;
pub mod factorization;
pub mod hesstrack;
pub mod synth;

pub use butterfly::{pairing, ButterflyLayer, ButterflyProduct, DegeneratePolicy, GivensBlock, OpCounter};
pub use error::{Error, Result};
pub use factorization::{
    average_angle, average_angle_between, train_rotation_only, AngleStats, BatchMode, GradientRecord,
    SymmetricFactorization, Trace, TraceRow, TrainConfig, TrainSample,
};
pub use synth::{haar_rotation, synthetic_hessian, Sampler, SyntheticHessian, SyntheticSpec};
pub use hesstrack::{
    MinibatchPolicy, Objective, MinibatchObjective, RunLog, StepReport, TrackerConfig, TrackerState, TrackingMode,
};
