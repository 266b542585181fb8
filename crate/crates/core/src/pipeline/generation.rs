use super::{decode_step, DecodeConfig, StepOutput, TrafficReport};
use crate::error::{Error, Result};
use crate::kernels::DenseMatrix;
use crate::kvmodel::{CodecBundle, SegmentedCache};
use crate::Scalar;

/// Externally supplied inputs for one generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<T> {
    /// Per layer, `H_q × d_head`.
    pub queries: Vec<DenseMatrix<T>>,
    /// Per layer, `H_kv · d_head` entries (heads back to back).
    pub new_keys: Vec<Vec<T>>,
    pub new_values: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryTrace<T> {
    pub steps: Vec<TraceStep<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport<T> {
    pub steps: Vec<StepOutput<T>>,
    pub total: TrafficReport,
}

/// Drives `cfg.path` over a trace. Each step appends its KV row to every
/// layer first, so the token attends to itself, then decodes.
pub fn run_generation<T: Scalar>(
    cache: &mut SegmentedCache<T>,
    trace: &QueryTrace<T>,
    codecs: Option<&CodecBundle<T>>,
    cfg: &DecodeConfig,
) -> Result<GenerationReport<T>> {
    let layers = cache.shape().layers;
    let mut steps = Vec::with_capacity(trace.steps.len());
    let mut total = TrafficReport::default();
    for (t, step) in trace.steps.iter().enumerate() {
        if step.new_keys.len() != layers || step.new_values.len() != layers {
            return Err(Error::dim(
                "run_generation",
                format!("step {t}: KV rows for {} / {} layers, model has {layers}", step.new_keys.len(), step.new_values.len()),
            ));
        }
        for l in 0..layers {
            cache.append_token_kv(l, &step.new_keys[l], &step.new_values[l])?;
        }
        let out = decode_step(cache, &step.queries, codecs, cfg)?;
        total.accumulate(&out.traffic);
        steps.push(out);
    }
    Ok(GenerationReport { steps, total })
}
