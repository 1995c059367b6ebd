use std::time::Instant;

use crate::error::{Error, Result};
use crate::seq2seq::{beam_search, Translator, DEFAULT_MAX_LEN};
use crate::text::EOS;

pub const BENCH_BEAM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub model_id: String,
    pub hardware: String,
    /// Per-query wall-clock milliseconds, in measurement order.
    pub samples_ms: Vec<f64>,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

pub fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu}; {} {}; 1 thread", std::env::consts::OS, std::env::consts::ARCH)
}

impl LatencyReport {
    pub fn to_text(&self) -> String {
        format!(
            "model={} samples={} p50_ms={:.3} p95_ms={:.3} hardware=\"{}\"",
            self.model_id,
            self.samples_ms.len(),
            self.p50_ms,
            self.p95_ms,
            self.hardware
        )
    }
}

/// Times single-threaded beam-3 decoding of `queries` (cycled), after
/// `warmup` untimed decodes.
pub fn bench_latency(
    model: &dyn Translator,
    queries: &[String],
    warmup: usize,
    samples: usize,
    model_id: &str,
) -> Result<LatencyReport> {
    if samples < 200 || warmup < 10 {
        return Err(Error::InvalidArgument(format!(
            "need samples >= 200 and warmup >= 10, got {samples} and {warmup}"
        )));
    }
    if queries.is_empty() {
        return Err(Error::Empty("latency queries".into()));
    }
    let encoded: Vec<Vec<usize>> = queries
        .iter()
        .map(|q| {
            let mut ids = model.vocab().encode(q);
            ids.push(EOS);
            ids
        })
        .collect();
    for i in 0..warmup {
        beam_search(model, &encoded[i % encoded.len()], BENCH_BEAM, DEFAULT_MAX_LEN)?;
    }
    let mut ms = Vec::with_capacity(samples);
    for i in 0..samples {
        let q = &encoded[i % encoded.len()];
        let t0 = Instant::now();
        let h = beam_search(model, q, BENCH_BEAM, DEFAULT_MAX_LEN)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(h);
    }
    Ok(LatencyReport {
        model_id: model_id.to_string(),
        hardware: hardware_note(),
        p50_ms: percentile(&ms, 50.0),
        p95_ms: percentile(&ms, 95.0),
        samples_ms: ms,
    })
}
