//! Student-teacher feature distillation for image anomaly detection.
//!
//! The pipeline trains a student network to reproduce a frozen teacher's
//! features on normal images while a parallel abnormality branch learns to
//! flag synthesized defects. Per-stage feature discrepancies are fused by a
//! small segmentation head into a pixel anomaly map; image scores are the
//! mean of the hottest pixels. Everything runs in f64 on the CPU and is
//! bit-deterministic for a fixed seed.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod seg_head;
pub mod synthesis;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
