use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use kvcapsule::analysis::{
    attention_fidelity_layers, head_averaged_span, hidden_dim_rank, redundancy_stats, topk_overlap,
    FidelityMetrics,
};
use kvcapsule::dump::{
    attention_entries, compressed_entries, output_entries, parse_attention_steps, parse_trace, parse_visual,
    trace_entries, visual_entries,
};
use kvcapsule::keycodec::{train_key_codec, ReconstructorKind, TrainConfig};
use kvcapsule::kvmodel::{
    encode_codec_bundle, new_cache, validate_codec_bundle, CacheMode, CodecBundle, KvPair, LayerCodec, LayerKv,
    ModelShape,
};
use kvcapsule::memmodel::{break_even, image_sweep, FootprintParams};
use kvcapsule::pipeline::{
    make_schedule, max_relative_error, run_generation, Ablation, DecodeConfig, DecodePath, GenerationReport,
    QueryTrace, TrafficReport,
};
use kvcapsule::synth::{gen_prefill, gen_query_trace, gen_visual_kv, SynthProfile};
use kvcapsule::valuecodec::fit_value_pca;
use kvcapsule::Matrix;

use crate::args::*;
use crate::io::*;

type Dump = Vec<Vec<KvPair<f32>>>;

fn load_dump(path: &Path) -> CliResult<Dump> {
    let entries = read_kvd(path)?;
    parse_visual(&entries).map_err(|e| CliError::at(path, e))
}

fn load_bundle(path: &Path) -> CliResult<CodecBundle<f32>> {
    let bytes = read_bytes(path)?;
    validate_codec_bundle(&bytes).map(|b| b.0).map_err(|e| CliError::at(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_bytes(path, text.as_bytes())
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64) -> CliResult<()> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} {v} outside [{lo}, {hi}]")))
    }
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let profile = SynthProfile {
        seed: a.seed,
        n: a.n,
        d_head: a.d_head,
        kv_heads: a.kv_heads,
        layers: a.layers,
        group_size: a.group_size,
        text_tokens: a.text_tokens,
        key_cosine: a.key_cosine.clone(),
        value_cosine: a.value_cosine,
        key_rank: a.key_rank.unwrap_or(a.n),
        value_spectrum: a.value_spectrum.into(),
        value_rank: a.value_rank,
        drift: a.drift,
    };
    profile.validate()?;
    create_dir(&a.out)?;
    let trace: Option<QueryTrace<f32>> = if a.steps > 0 { Some(gen_query_trace(&profile, a.steps)?) } else { None };
    let shape = ModelShape::new(profile.layers, profile.kv_heads, profile.query_heads(), profile.d_head, 4)?;
    for s in 0..a.samples {
        let kv: Dump = gen_visual_kv(&profile, s)?;
        let mut entries = visual_entries(&kv);
        if let Some(trace) = &trace {
            // Last-layer attention over the vision span, one row per query head.
            let input: Vec<LayerKv<f32>> = gen_prefill(&profile, s, 1)?;
            let mut cache = new_cache(shape, &input, None, CacheMode::Full)?;
            let rep = run_generation(&mut cache, trace, None, &DecodeConfig::default())?;
            let maps: Vec<Vec<f64>> = rep
                .steps
                .iter()
                .map(|st| head_averaged_span(&st.weights[profile.layers - 1], profile.text_tokens, profile.n))
                .collect::<Result<_, _>>()?;
            entries.extend(attention_entries(&maps));
        }
        write_kvd(&a.out.join(format!("sample{s}.kvd")), &entries)?;
    }
    if let Some(trace) = &trace {
        write_kvd(&a.out.join("trace.kvd"), &trace_entries(trace))?;
    }
    let meta = Meta::new("synth").with("seed", a.seed).with("samples", a.samples).with("steps", a.steps);
    write_text(&a.out.join("profile.json"), &json_with_meta(&meta, "profile", &profile)?)
}

#[derive(Serialize)]
struct FitLayer {
    layer: usize,
    retention: f64,
    retained: usize,
    key_val_cosine: f64,
    key_train_cosine: f64,
    key_val_mse: f64,
    value_tail_energy: f64,
    warnings: Vec<String>,
}

pub fn fit(a: &FitArgs) -> CliResult<()> {
    let dumps: Vec<Dump> = a.data.iter().map(|p| load_dump(p)).collect::<CliResult<_>>()?;
    let (layers, heads) = (dumps[0].len(), dumps[0][0].len());
    let shape = dumps[0][0][0].keys.shape();
    for (d, path) in dumps.iter().zip(&a.data) {
        if d.len() != layers || d[0].len() != heads || d[0][0].keys.shape() != shape {
            return Err(CliError::Data(format!(
                "{}: geometry differs from {} ({layers} layers, {heads} heads, {shape:?})",
                path.display(),
                a.data[0].display()
            )));
        }
    }
    let schedule = make_schedule(layers, a.r0, a.r1)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        mask_weight: a.mask_weight,
        tau_start: a.tau_start,
        tau_end: a.tau_end,
        hard_from: a.hard_from,
        seed: a.seed,
        kind: a.kind.into(),
        hidden: a.hidden,
        val_fraction: a.val_fraction,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let policy = a.mean_policy.into();

    let fitted: Vec<_> = (0..layers)
        .into_par_iter()
        .map(|l| {
            let r = schedule.at(l);
            let keys: Vec<Vec<Matrix>> = dumps.iter().map(|d| d[l].iter().map(|p| p.keys.clone()).collect()).collect();
            let values: Vec<Vec<Matrix>> = dumps.iter().map(|d| d[l].iter().map(|p| p.values.clone()).collect()).collect();
            let cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(l as u64),
                ..cfg.clone()
            };
            let (kc, report) = train_key_codec(&keys, r, &cfg)?;
            let (vc, pca) = fit_value_pca(&values, r, policy)?;
            Ok::<_, kvcapsule::Error>((LayerCodec { retention: r, keys: kc, values: vc }, report, pca))
        })
        .collect::<Result<_, _>>()?;

    let mut csv = String::from("layer,epoch,phase,tau,train_mse,val_mse,val_cosine,mean_mask\n");
    let mut summary = Vec::new();
    let mut codecs = Vec::new();
    for (l, (codec, report, pca)) in fitted.into_iter().enumerate() {
        for e in &report.epochs {
            csv.push_str(&format!(
                "{l},{},{},{},{},{},{},{}\n",
                e.epoch,
                if matches!(e.phase, kvcapsule::keycodec::Phase::Soft) { "soft" } else { "hard" },
                e.tau,
                e.train_mse,
                e.val_mse,
                e.val_cosine,
                e.mean_mask
            ));
        }
        summary.push(FitLayer {
            layer: l,
            retention: codec.retention,
            retained: codec.retained(),
            key_val_cosine: report.val_cosine,
            key_train_cosine: report.train_cosine,
            key_val_mse: report.val_mse,
            value_tail_energy: pca.heads.iter().map(|h| h.tail_energy).sum(),
            warnings: pca.warnings(),
        });
        codecs.push(codec);
    }
    let bundle = CodecBundle::new(codecs)?;
    create_dir(&a.out)?;
    write_bytes(&a.out.join("codec.kvc"), &encode_codec_bundle(&bundle)?)?;
    let meta = Meta::new("fit")
        .with("seed", a.seed)
        .with("schedule", json!({"layers": layers, "r0": a.r0, "r1": a.r1}))
        .with("samples", dumps.len())
        .with("train", &cfg);
    write_text(&a.out.join("train.csv"), &csv_with_meta(&meta, &csv))?;
    write_text(&a.out.join("fit.json"), &json_with_meta(&meta, "layers", &summary)?)
}

pub fn compress(a: &CompressArgs) -> CliResult<()> {
    let bundle = load_bundle(&a.bundle)?;
    let dump = load_dump(&a.input)?;
    let entries = compressed_entries(&bundle, &dump).map_err(|e| CliError::at(&a.input, e))?;
    write_kvd(&a.out, &entries)
}

struct Run {
    shape: ModelShape,
    input: Vec<LayerKv<f32>>,
    trace: QueryTrace<f32>,
    bundle: Option<CodecBundle<f32>>,
}

fn load_run(r: &RunArgs) -> CliResult<Run> {
    let images: Vec<Dump> = r.images.iter().map(|p| load_dump(p)).collect::<CliResult<_>>()?;
    let trace_entries = read_kvd(&r.trace)?;
    let trace: QueryTrace<f32> = parse_trace(&trace_entries).map_err(|e| CliError::at(&r.trace, e))?;
    let bundle = r.bundle.as_deref().map(load_bundle).transpose()?;
    let first = &images[0];
    let (layers, kv_heads, d) = (first.len(), first[0].len(), first[0][0].keys.cols());
    let query_heads = trace.steps[0].queries.first().map_or(0, Matrix::rows);
    let shape = ModelShape::new(layers, kv_heads, query_heads, d, r.kv_bytes).map_err(|e| CliError::at(&r.trace, e))?;
    let input = (0..layers)
        .map(|l| LayerKv {
            text: vec![KvPair::empty(d); kv_heads],
            images: images.iter().map(|img| img.get(l).cloned().unwrap_or_default()).collect(),
        })
        .collect();
    Ok(Run { shape, input, trace, bundle })
}

fn execute(run: &Run, path: DecodePath, ablation: Ablation) -> CliResult<GenerationReport<f32>> {
    let mode = match path {
        DecodePath::BaselineFull => CacheMode::Full,
        _ => CacheMode::Compressed(ablation),
    };
    let bundle = match path {
        DecodePath::BaselineFull => None,
        _ => Some(
            run.bundle
                .as_ref()
                .ok_or_else(|| CliError::Usage(format!("{path:?} path needs --bundle")))?,
        ),
    };
    let mut cache = new_cache(run.shape, &run.input, bundle, mode)?;
    let cfg = DecodeConfig {
        path,
        ablation,
        sigma: None,
    };
    Ok(run_generation(&mut cache, &run.trace, bundle, &cfg)?)
}

#[derive(Serialize)]
struct TrafficRow {
    step: usize,
    #[serde(flatten)]
    traffic: TrafficReport,
    persistent_bytes: u64,
}

fn traffic_rows(rep: &GenerationReport<f32>) -> Vec<TrafficRow> {
    rep.steps
        .iter()
        .enumerate()
        .map(|(step, s)| TrafficRow {
            step,
            traffic: s.traffic,
            persistent_bytes: s.traffic.persistent(),
        })
        .collect()
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let run = load_run(&a.run)?;
    let rep = execute(&run, a.path.into(), a.ablation.into())?;
    create_dir(&a.out)?;
    write_kvd(&a.out.join("outputs.kvd"), &output_entries(&rep.steps))?;
    let meta = Meta::new("simulate")
        .with("path", DecodePath::from(a.path))
        .with("ablation", Ablation::from(a.ablation))
        .with("images", a.run.images.len())
        .with("steps", rep.steps.len())
        .with("kv_bytes", a.run.kv_bytes)
        .with("schedule", run.bundle.as_ref().map(CodecBundle::schedule));
    let rows = traffic_rows(&rep);
    match a.format {
        Format::Csv => {
            let mut csv = String::from(
                "step,text_bytes,vision_bytes,mean_bytes,generated_bytes,codec_bytes,temporary_bytes,persistent_bytes\n",
            );
            for r in &rows {
                let t = &r.traffic;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.step, t.text_bytes, t.vision_bytes, t.mean_bytes, t.generated_bytes, t.codec_bytes, t.temporary_bytes, r.persistent_bytes
                ));
            }
            write_text(&a.out.join("traffic.csv"), &csv_with_meta(&meta, &csv))
        }
        Format::Json => write_text(&a.out.join("traffic.json"), &json_with_meta(&meta, "steps", &rows)?),
    }
}

#[derive(Serialize)]
struct FidelityRow {
    path: DecodePath,
    ablation: Ablation,
    #[serde(flatten)]
    metrics: FidelityMetrics,
    max_output_error: f64,
}

fn fidelity_rows(run: &Run) -> CliResult<Vec<FidelityRow>> {
    let base = execute(run, DecodePath::BaselineFull, Ablation::Both)?;
    let linear = run.bundle.as_ref().is_some_and(|b| b.kind() == ReconstructorKind::Linear);
    let mut cases = vec![
        (DecodePath::Reconstruct, Ablation::Both),
        (DecodePath::Reconstruct, Ablation::KeysOnly),
        (DecodePath::Reconstruct, Ablation::ValuesOnly),
        (DecodePath::StaticCompressed, Ablation::Both),
    ];
    if linear {
        cases.insert(1, (DecodePath::Fused, Ablation::Both));
    }
    let flat = |rep: &GenerationReport<f32>| rep.steps.iter().flat_map(|s| s.weights.clone()).collect::<Vec<_>>();
    let base_w = flat(&base);
    cases
        .into_iter()
        .map(|(path, ablation)| {
            let rep = execute(run, path, ablation)?;
            let err = rep
                .steps
                .iter()
                .zip(&base.steps)
                .flat_map(|(a, b)| a.outputs.iter().zip(&b.outputs).map(|(x, y)| max_relative_error(x, y)))
                .fold(0.0, f64::max);
            Ok(FidelityRow {
                path,
                ablation,
                metrics: attention_fidelity_layers(&base_w, &flat(&rep))?,
                max_output_error: err,
            })
        })
        .collect()
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    check_range("fraction", a.fraction, f64::MIN_POSITIVE, 1.0)?;
    for &l in &a.levels {
        check_range("levels", l, f64::MIN_POSITIVE, 1.0)?;
    }
    create_dir(&a.out)?;
    let meta = Meta::new("analyze")
        .with("inputs", a.data.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())
        .with("levels", &a.levels)
        .with("fraction", a.fraction)
        .with("overlap_denominator", "reference top set")
        .with("attention_maps", "head-averaged");

    // Redundancy and ranks are averaged over samples.
    let mut red: Vec<(usize, f64, f64)> = Vec::new();
    let mut ranks: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut rank_meta = Vec::new();
    let mut overlap_csv = String::from("sample,step_i,step_j,overlap\n");
    let mut any_attn = false;
    for (s, path) in a.data.iter().enumerate() {
        let entries = read_kvd(path)?;
        let dump: Dump = parse_visual(&entries).map_err(|e| CliError::at(path, e))?;
        let stats = redundancy_stats(&dump).map_err(|e| CliError::at(path, e))?;
        let rk = hidden_dim_rank(&dump, &a.levels).map_err(|e| CliError::at(path, e))?;
        if s == 0 {
            red = stats.iter().map(|r| (r.layer, 0.0, 0.0)).collect();
            ranks = rk.iter().map(|r| vec![(0, 0); r.levels.len()]).collect();
            rank_meta = rk.iter().map(|r| (r.layer, r.d_head)).collect();
        } else if stats.len() != red.len() {
            return Err(CliError::Data(format!("{}: layer count differs from first sample", path.display())));
        }
        for (acc, r) in red.iter_mut().zip(&stats) {
            acc.1 += r.key_cosine;
            acc.2 += r.value_cosine;
        }
        for (acc, r) in ranks.iter_mut().zip(&rk) {
            for (a, (k, v)) in acc.iter_mut().zip(r.key_ranks.iter().zip(&r.value_ranks)) {
                a.0 += k;
                a.1 += v;
            }
        }
        let maps = parse_attention_steps(&entries).map_err(|e| CliError::at(path, e))?;
        if maps.len() >= 2 {
            any_attn = true;
            let o = topk_overlap(&maps, a.fraction).map_err(|e| CliError::at(path, e))?;
            for i in 0..o.rows() {
                for j in 0..o.cols() {
                    overlap_csv.push_str(&format!("{s},{i},{j},{}\n", o.get(i, j)));
                }
            }
        }
    }
    let count = a.data.len() as f64;
    let mut csv = String::from("layer,key_cosine,value_cosine\n");
    for (l, k, v) in &red {
        csv.push_str(&format!("{l},{},{}\n", k / count, v / count));
    }
    write_text(&a.out.join("redundancy.csv"), &csv_with_meta(&meta, &csv))?;

    let mut csv = String::from("layer,level,key_rank,value_rank,d_head,key_fraction,value_fraction\n");
    for ((layer, d), per_level) in rank_meta.iter().zip(&ranks) {
        for (level, (k, v)) in a.levels.iter().zip(per_level) {
            let (k, v) = (*k as f64 / count, *v as f64 / count);
            csv.push_str(&format!("{layer},{level},{k},{v},{d},{},{}\n", k / *d as f64, v / *d as f64));
        }
    }
    write_text(&a.out.join("rank.csv"), &csv_with_meta(&meta, &csv))?;
    if any_attn {
        write_text(&a.out.join("overlap.csv"), &csv_with_meta(&meta, &overlap_csv))?;
    }

    if let (Some(bundle), Some(trace)) = (&a.bundle, &a.trace) {
        let run = load_run(&RunArgs {
            images: vec![a.data[0].clone()],
            trace: trace.clone(),
            bundle: Some(bundle.clone()),
            kv_bytes: 4,
        })?;
        let rows = fidelity_rows(&run)?;
        let meta = meta.with("fidelity_image", a.data[0].display().to_string()).with(
            "schedule",
            run.bundle.as_ref().map(CodecBundle::schedule),
        );
        write_text(&a.out.join("fidelity.json"), &json_with_meta(&meta, "fidelity", &rows)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    step: usize,
    baseline_vision_bytes: u64,
    fused_vision_bytes: u64,
    vision_ratio: f64,
    baseline_persistent_bytes: u64,
    fused_persistent_bytes: u64,
    persistent_ratio: f64,
    fused_codec_bytes: u64,
    fused_temporary_bytes: u64,
    max_output_error: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    if a.run.bundle.is_none() {
        return Err(CliError::Usage("bench needs --bundle".into()));
    }
    let run = load_run(&a.run)?;
    let base = execute(&run, DecodePath::BaselineFull, Ablation::Both)?;
    let fused = execute(&run, DecodePath::Fused, Ablation::Both)?;
    let rows: Vec<BenchRow> = base
        .steps
        .iter()
        .zip(&fused.steps)
        .enumerate()
        .map(|(step, (b, f))| BenchRow {
            step,
            baseline_vision_bytes: b.traffic.vision_bytes,
            fused_vision_bytes: f.traffic.vision_bytes,
            vision_ratio: ratio(f.traffic.vision_bytes, b.traffic.vision_bytes),
            baseline_persistent_bytes: b.traffic.persistent(),
            fused_persistent_bytes: f.traffic.persistent(),
            persistent_ratio: ratio(f.traffic.persistent(), b.traffic.persistent()),
            fused_codec_bytes: f.traffic.codec_bytes,
            fused_temporary_bytes: f.traffic.temporary_bytes,
            max_output_error: b
                .outputs
                .iter()
                .zip(&f.outputs)
                .map(|(x, y)| max_relative_error(y, x))
                .fold(0.0, f64::max),
        })
        .collect();
    let bundle = run.bundle.as_ref().expect("checked above");
    let schedule = make_schedule(bundle.layers().len(), bundle.schedule()[0], *bundle.schedule().last().unwrap_or(&1.0));
    let meta = Meta::new("bench")
        .with("images", a.run.images.len())
        .with("kv_bytes", a.run.kv_bytes)
        .with("schedule", bundle.schedule())
        .with("effective_retention", schedule.ok().map(|s| s.effective_retention(bundle.n())))
        .with(
            "total_vision_ratio",
            ratio(fused.total.vision_bytes, base.total.vision_bytes),
        )
        .with(
            "total_persistent_ratio",
            ratio(fused.total.persistent(), base.total.persistent()),
        );
    let text = match a.format {
        Format::Csv => {
            let mut csv = String::from("step,baseline_vision_bytes,fused_vision_bytes,vision_ratio,baseline_persistent_bytes,fused_persistent_bytes,persistent_ratio,fused_codec_bytes,fused_temporary_bytes,max_output_error\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.step,
                    r.baseline_vision_bytes,
                    r.fused_vision_bytes,
                    r.vision_ratio,
                    r.baseline_persistent_bytes,
                    r.fused_persistent_bytes,
                    r.persistent_ratio,
                    r.fused_codec_bytes,
                    r.fused_temporary_bytes,
                    r.max_output_error
                ));
            }
            csv_with_meta(&meta, &csv)
        }
        Format::Json => json_with_meta(&meta, "steps", &rows)?,
    };
    emit(a.out.as_deref(), &text)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print_stdout(text);
            Ok(())
        }
    }
}

pub fn memplan(a: &MemplanArgs) -> CliResult<()> {
    if a.n == 0 || a.max_images == 0 {
        return Err(CliError::Usage("--n and --max-images must be positive".into()));
    }
    let p = FootprintParams {
        batch: a.batch,
        kv_heads: a.kv_heads,
        prompt_tokens: a.prompt_tokens,
        n: a.n,
        images: 1,
        generated: a.generated,
        d_head: a.d_head,
        kv_bytes: a.kv_bytes,
        schedule: make_schedule(a.layers, a.r0, a.r1)?,
        mean_policy: a.mean_policy.into(),
        kind: a.kind.into(),
        hidden: a.hidden,
    };
    let be = break_even(&p, &image_sweep(a.n, a.max_images))?;
    let meta = Meta::new("memplan")
        .with("schedule", json!({"layers": a.layers, "r0": a.r0, "r1": a.r1}))
        .with("mean_retention", p.schedule.mean_retention())
        .with("params", &p)
        .with("break_even", be.crossing);
    let text = match a.format {
        Format::Csv => csv_with_meta(&meta, &be.to_csv()),
        Format::Json => json_with_meta(&meta, "rows", &be.rows)?,
    };
    emit(a.out.as_deref(), &text)
}

/// Paths every subcommand reads, for the no-mutation guarantee in tests.
pub fn inputs(cmd: &Command) -> Vec<PathBuf> {
    match cmd {
        Command::Fit(a) => a.data.clone(),
        Command::Compress(a) => vec![a.bundle.clone(), a.input.clone()],
        Command::Simulate(a) => run_inputs(&a.run),
        Command::Bench(a) => run_inputs(&a.run),
        Command::Analyze(a) => a.data.iter().chain(&a.bundle).chain(&a.trace).cloned().collect(),
        Command::Synth(_) | Command::Memplan(_) => Vec::new(),
    }
}

fn run_inputs(r: &RunArgs) -> Vec<PathBuf> {
    r.images.iter().chain(std::iter::once(&r.trace)).chain(&r.bundle).cloned().collect()
}
