//! Knowledge distillation, int8 quantization and latency measurement.

mod kd;
mod latency;
mod quant;
mod student;

#[cfg(test)]
mod tests;

pub use kd::{kd_loss_ce, kd_loss_js, kd_loss_var, student_loss, student_loss_var, KdKind, ProbDist};
pub use latency::{bench_latency, hardware_note, percentile, LatencyReport, BENCH_BEAM};
pub use quant::{quantize_int8, quantize_model, QuantSlot, QuantizedModel, QuantizedTensor};
pub use student::{generate_pseudo_labels, train_student, PseudoLabels, StudentConfig};
