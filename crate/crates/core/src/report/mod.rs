//! Cost and memory models, run-matrix orchestration and report emission.

mod config;
mod matrix;
mod output;
mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{load_configs, MaskConfig, MatrixFile, RunConfig, RunMode, SEED_ENV};
pub use matrix::{median, run_config, run_matrix, MetricValue, RunResult};
pub use output::{render_svg, to_csv, to_json, write_reports, OutputFormat, CSV_HEADER};
pub use verify::{verify_suite, VerifyCase};

use crate::attnref::AttnError;
use crate::cpmech::CpError;
use crate::fabric::StageTimeline;
use crate::masks::MaskError;
use crate::numcore::ShapeError;
use crate::workload::WorkloadError;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Cp(#[from] CpError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("timeline has zero total time")]
    ZeroTime,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelClass {
    /// Materialises the full score and probability matrices.
    NaiveFullMask,
    /// Tiled kernel keeping only a per-row normaliser.
    FusedLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub kernel: KernelClass,
    pub batch: u64,
    pub seq_len: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub elem_bytes: u64,
}

impl MemoryModel {
    pub fn new(kernel: KernelClass, batch: u64, seq_len: u64, heads: u64, head_dim: u64) -> Self {
        Self {
            kernel,
            batch,
            seq_len,
            heads,
            head_dim,
            elem_bytes: 2,
        }
    }

    pub fn peak_bytes(&self) -> u64 {
        peak_activation_elements(self) * self.elem_bytes
    }
}

/// Peak activation elements of one attention layer.
///
/// Both classes keep `13·b·s·h·d` for inputs, outputs and their gradients.
/// The naive class adds `5·b·h·s²` for scores, probabilities and masks; the
/// fused class adds one `b·h·s` normaliser instead.
pub fn peak_activation_elements(m: &MemoryModel) -> u64 {
    let (b, s, h, d) = (m.batch, m.seq_len, m.heads, m.head_dim);
    let linear = 13 * b * s * h * d;
    match m.kernel {
        KernelClass::NaiveFullMask => linear + 5 * b * h * s * s,
        KernelClass::FusedLinear => linear + b * h * s,
    }
}

/// Per-device TFLOPs/s over a simulated timeline.
pub fn effective_tflops(flops: u64, timeline: &StageTimeline, world_size: usize) -> Result<f64, ReportError> {
    tflops_over(flops, timeline.total, world_size)
}

pub(crate) fn tflops_over(flops: u64, seconds: f64, world_size: usize) -> Result<f64, ReportError> {
    if !(seconds > 0.0) {
        return Err(ReportError::ZeroTime);
    }
    Ok(flops as f64 / (seconds * world_size as f64) / 1e12)
}
