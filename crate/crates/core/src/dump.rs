//! Entry naming for KVD1 dumps.
//!
//! Vision KV: `layer{l}.head{h}.K` and `.V`, each `n × d_head`.
//! Compressed KV: `.Kc`, `.Vc`, and `.mu` (per-sample mean only).
//! Decode attention: `step{t}.attn`, either one row over vision tokens or
//! `heads × tokens` (head-averaged on read).
//! Query traces: `step{t}.layer{l}.q` (`H_q × d_head`), `.k_new` and `.v_new`
//! (`H_kv × d_head`).
//! Decode outputs: `step{t}.layer{l}.out` (`H_q × d_head`).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::DenseMatrix;
use crate::kvmodel::format::{EntryMap, FormatError, KvTensor};
use crate::kvmodel::{CodecBundle, KvPair};
use crate::valuecodec::MeanPolicy;
use crate::pipeline::{QueryTrace, StepOutput, TraceStep};
use crate::Scalar;

pub fn kv_name(layer: usize, head: usize, part: &str) -> String {
    format!("layer{layer}.head{head}.{part}")
}

fn parse_kv_name(name: &str) -> Option<(usize, usize, &str)> {
    let rest = name.strip_prefix("layer")?;
    let (l, rest) = rest.split_once(".head")?;
    let (h, part) = rest.split_once('.')?;
    Some((l.parse().ok()?, h.parse().ok()?, part))
}

/// `[layer][head]` grid of the entries whose names end in `part`.
fn grid<'a>(entries: &'a [KvTensor], part: &str) -> Result<Vec<Vec<&'a KvTensor>>> {
    let mut found: BTreeMap<(usize, usize), &KvTensor> = BTreeMap::new();
    for e in entries {
        if let Some((l, h, p)) = parse_kv_name(&e.name) {
            if p == part {
                found.insert((l, h), e);
            }
        }
    }
    if found.is_empty() {
        return Ok(Vec::new());
    }
    let layers = found.keys().map(|k| k.0).max().unwrap_or(0) + 1;
    let heads = found.keys().map(|k| k.1).max().unwrap_or(0) + 1;
    (0..layers)
        .map(|l| {
            (0..heads)
                .map(|h| {
                    found
                        .get(&(l, h))
                        .copied()
                        .ok_or_else(|| FormatError::MissingEntry(kv_name(l, h, part)).into())
                })
                .collect()
        })
        .collect()
}

/// Vision KV entries of one sample.
pub fn visual_entries<T: Scalar>(dump: &[Vec<KvPair<T>>]) -> Vec<KvTensor> {
    let mut out = Vec::new();
    for (l, heads) in dump.iter().enumerate() {
        for (h, p) in heads.iter().enumerate() {
            out.push(KvTensor::from_matrix(kv_name(l, h, "K"), &p.keys));
            out.push(KvTensor::from_matrix(kv_name(l, h, "V"), &p.values));
        }
    }
    out
}

/// Reads `[layer][head]` vision KV; other entries are ignored.
pub fn parse_visual<T: Scalar>(entries: &[KvTensor]) -> Result<Vec<Vec<KvPair<T>>>> {
    let keys = grid(entries, "K")?;
    let values = grid(entries, "V")?;
    if keys.is_empty() {
        return Err(FormatError::MissingEntry(kv_name(0, 0, "K")).into());
    }
    if keys.len() != values.len() || keys[0].len() != values.first().map_or(0, Vec::len) {
        return Err(Error::validation(0, None, "K and V entries cover different layers or heads"));
    }
    let shape = (keys[0][0].shape.clone(), keys[0][0].name.clone());
    keys.iter()
        .zip(&values)
        .enumerate()
        .map(|(l, (ks, vs))| {
            ks.iter()
                .zip(vs)
                .enumerate()
                .map(|(h, (k, v))| {
                    if k.shape != shape.0 || v.shape != shape.0 {
                        return Err(Error::validation(
                            l,
                            Some(h),
                            format!("K {:?} / V {:?} differ from {} {:?}", k.shape, v.shape, shape.1, shape.0),
                        ));
                    }
                    KvPair::new(k.to_matrix()?, v.to_matrix()?)
                })
                .collect()
        })
        .collect()
}

/// Compressed vision KV of one sample under `bundle`: retained key rows and
/// value coefficients, plus the token mean under the per-sample policy.
pub fn compressed_entries<T: Scalar>(bundle: &CodecBundle<T>, dump: &[Vec<KvPair<T>>]) -> Result<Vec<KvTensor>> {
    if dump.len() != bundle.layers().len() {
        return Err(Error::Config(format!("dump has {} layers, bundle {}", dump.len(), bundle.layers().len())));
    }
    let mut out = Vec::new();
    for (l, (heads, codec)) in dump.iter().zip(bundle.layers()).enumerate() {
        if heads.len() != bundle.kv_heads() {
            return Err(Error::Config(format!("layer {l}: {} heads, bundle {}", heads.len(), bundle.kv_heads())));
        }
        for (h, p) in heads.iter().enumerate() {
            out.push(KvTensor::from_matrix(kv_name(l, h, "Kc"), &codec.keys.compress_keys(&p.keys)?));
            let (vc, mu) = codec.values.compress_values(h, &p.values)?;
            out.push(KvTensor::from_matrix(kv_name(l, h, "Vc"), &vc));
            if codec.values.mean_policy() == MeanPolicy::PerSample {
                out.push(KvTensor::from_vector(kv_name(l, h, "mu"), &mu));
            }
        }
    }
    Ok(out)
}

/// Per-step attention over vision tokens, `step0.attn`, `step1.attn`, …
/// A 2-D entry is averaged over its rows.
pub fn parse_attention_steps(entries: &[KvTensor]) -> Result<Vec<Vec<f64>>> {
    let map = EntryMap::new(entries);
    let mut out = Vec::new();
    while let Some(e) = map.get(&format!("step{}.attn", out.len())) {
        let row = match e.shape.len() {
            1 => e.data.iter().map(|&x| x as f64).collect(),
            2 => {
                let m: DenseMatrix<f64> = e.to_matrix()?;
                (0..m.cols())
                    .map(|c| (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / m.rows().max(1) as f64)
                    .collect()
            }
            _ => return Err(Error::dim("parse_attention_steps", format!("{} has shape {:?}", e.name, e.shape))),
        };
        out.push(row);
    }
    Ok(out)
}

pub fn attention_entries(maps: &[Vec<f64>]) -> Vec<KvTensor> {
    maps.iter()
        .enumerate()
        .map(|(t, m)| KvTensor::from_vector(format!("step{t}.attn"), m))
        .collect()
}

fn step_name(t: usize, l: usize, part: &str) -> String {
    format!("step{t}.layer{l}.{part}")
}

fn rows_to_matrix<T: Scalar>(flat: &[T], d: usize) -> DenseMatrix<T> {
    let heads = flat.len() / d.max(1);
    DenseMatrix::from_fn(heads, d, |h, j| flat[h * d + j])
}

pub fn trace_entries<T: Scalar>(trace: &QueryTrace<T>) -> Vec<KvTensor> {
    let mut out = Vec::new();
    for (t, s) in trace.steps.iter().enumerate() {
        for (l, q) in s.queries.iter().enumerate() {
            let d = q.cols();
            out.push(KvTensor::from_matrix(step_name(t, l, "q"), q));
            out.push(KvTensor::from_matrix(step_name(t, l, "k_new"), &rows_to_matrix(&s.new_keys[l], d)));
            out.push(KvTensor::from_matrix(step_name(t, l, "v_new"), &rows_to_matrix(&s.new_values[l], d)));
        }
    }
    out
}

pub fn parse_trace<T: Scalar>(entries: &[KvTensor]) -> Result<QueryTrace<T>> {
    let map = EntryMap::new(entries);
    let mut steps = Vec::new();
    loop {
        let t = steps.len();
        if map.get(&step_name(t, 0, "q")).is_none() {
            break;
        }
        let mut step = TraceStep {
            queries: Vec::new(),
            new_keys: Vec::new(),
            new_values: Vec::new(),
        };
        let mut l = 0;
        while let Some(q) = map.get(&step_name(t, l, "q")) {
            step.queries.push(q.to_matrix()?);
            step.new_keys.push(map.require(&step_name(t, l, "k_new"))?.to_matrix::<T>()?.into_data());
            step.new_values.push(map.require(&step_name(t, l, "v_new"))?.to_matrix::<T>()?.into_data());
            l += 1;
        }
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(FormatError::MissingEntry(step_name(0, 0, "q")).into());
    }
    Ok(QueryTrace { steps })
}

pub fn output_entries<T: Scalar>(steps: &[StepOutput<T>]) -> Vec<KvTensor> {
    let mut out = Vec::new();
    for (t, s) in steps.iter().enumerate() {
        for (l, o) in s.outputs.iter().enumerate() {
            out.push(KvTensor::from_matrix(step_name(t, l, "out"), o));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvmodel::format::{decode_kvd, encode_kvd};
    use crate::synth::{gen_query_trace, gen_visual_kv, SynthProfile};

    fn profile() -> SynthProfile {
        SynthProfile {
            n: 6,
            d_head: 3,
            kv_heads: 2,
            layers: 2,
            key_rank: 3,
            key_cosine: vec![0.9, 0.6],
            ..Default::default()
        }
    }

    #[test]
    fn names() {
        assert_eq!(kv_name(3, 1, "K"), "layer3.head1.K");
        assert_eq!(parse_kv_name("layer12.head0.Vc"), Some((12, 0, "Vc")));
        assert_eq!(parse_kv_name("step1.attn"), None);
        assert_eq!(parse_kv_name("layerx.head0.K"), None);
    }

    #[test]
    fn visual_round_trip() {
        let kv: Vec<Vec<KvPair<f32>>> = gen_visual_kv(&profile(), 0).unwrap();
        let bytes = encode_kvd(&visual_entries(&kv)).unwrap();
        let back: Vec<Vec<KvPair<f32>>> = parse_visual(&decode_kvd(&bytes).unwrap()).unwrap();
        assert_eq!(back, kv);
    }

    #[test]
    fn missing_head_is_reported() {
        let kv: Vec<Vec<KvPair<f32>>> = gen_visual_kv(&profile(), 0).unwrap();
        let mut entries = visual_entries(&kv);
        entries.retain(|e| e.name != "layer1.head0.K");
        let err = parse_visual::<f32>(&entries).unwrap_err();
        assert!(err.to_string().contains("layer1.head0.K"), "{err}");
    }

    #[test]
    fn trace_round_trip() {
        let trace: QueryTrace<f32> = gen_query_trace(&profile(), 3).unwrap();
        let back: QueryTrace<f32> = parse_trace(&trace_entries(&trace)).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn attention_rows_are_head_averaged() {
        let entries = vec![
            KvTensor::new("step0.attn", vec![3], vec![0.2, 0.3, 0.5]),
            KvTensor::new("step1.attn", vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            KvTensor::new("step3.attn", vec![3], vec![0.0; 3]),
        ];
        let maps = parse_attention_steps(&entries).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[1], vec![0.5, 0.0, 0.5]);
    }
}
