//! Weight-space model editing with task vectors, and subgroup fairness
//! evaluation of the edited models.
//!
//! * [`ckpt`]: checkpoint container reader/writer.
//! * [`arith`]: task-vector algebra (diff, add, negate, scale, apply, merge,
//!   inject).
//! * [`metrics`]: accuracy, demographic parity, equalized odds and accuracy
//!   parity per protected subgroup.
//! * [`lab`]: synthetic subgroup-annotated corpus and a small classifier used
//!   to exercise the editing protocols end to end.
//! * [`sweep`]: coefficient sweeps, selection and result emission.

pub mod arith;
pub mod ckpt;
pub mod fsutil;
pub mod lab;
pub mod manifest;
pub mod metrics;
pub mod par;
pub mod sweep;

pub use arith::{ArithError, TaskVector, WeightedVector};
pub use ckpt::{read_checkpoint, write_checkpoint, Checkpoint, CkptError, Dtype, Tensor};
pub use metrics::{evaluate, GroupReport, MetricsError, PredictionRecord};
