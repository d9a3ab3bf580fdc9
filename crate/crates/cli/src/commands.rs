use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use udta::arch::{build_network, Config, ModelSpec, DESK_SPEC_JSON, FULL_SPEC_JSON};
use udta::checkpoint::Checkpoint;
use udta::checks::{self, F32_TOLERANCE, F64_TOLERANCE};
use udta::data::{generate, Dataset, SynthSpec};
use udta::graph::GradCheckConfig;
use udta::pipeline::{run_adaptation, run_pretrain, run_train_autoencoders, PipelineConfig};
use udta::profile::{compare_configs, profile, BackwardCost, CostModel, ProfileReport};
use udta::train::{EpochMetrics, RunReport, TrainConfig};

use crate::manifest::RunManifest;
use crate::{
    AdaptArgs, BackwardRule, BaselineArgs, Cli, Command, Format, GenDataArgs, GradArch, GradcheckArgs, ProfileArgs,
    StageArgs, EXIT_INVARIANT, EXIT_IO, EXIT_USAGE,
};

/// Bad flags or flag combinations.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A gradient check above tolerance.
#[derive(Debug, thiserror::Error)]
#[error("gradient check failed: {0}")]
pub struct GradcheckFailed(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<GradcheckFailed>().is_some() {
            return EXIT_INVARIANT;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if let Some(err) = cause.downcast_ref::<udta::Error>() {
            match err {
                udta::Error::Invariant(_) | udta::Error::Unidirectional { .. } => return EXIT_INVARIANT,
                udta::Error::Io(_)
                | udta::Error::BadMagic { .. }
                | udta::Error::BadVersion { .. }
                | udta::Error::Truncated { .. } => return EXIT_IO,
                // look through node context at the underlying cause
                udta::Error::AtNode { .. } => continue,
                _ => return EXIT_USAGE,
            }
        }
    }
    EXIT_USAGE
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os("UDTA_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("udta-out"))
}

pub fn run(cli: Cli) -> Result<()> {
    let root = out_root(&cli);
    match &cli.command {
        Command::Profile(a) => cmd_profile(&root, a),
        Command::GenData(a) => cmd_gen_data(&root, a),
        Command::Pretrain(a) => fan_out(&root, a, |dir, seed| cmd_pretrain(&root, dir, a, seed)),
        Command::TrainAe(a) => fan_out(&root, a, |dir, seed| cmd_train_ae(&root, dir, a, seed)),
        Command::Adapt(a) => fan_out(&root, &a.stage, |dir, seed| cmd_adapt(&root, dir, a, seed)),
        Command::Baseline(a) => fan_out(&root, &a.stage, |dir, seed| cmd_baseline(&root, dir, a, seed)),
        Command::Gradcheck(a) => cmd_gradcheck(&root, a),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let out: Vec<T> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| usage(format!("bad {what} `{p}`"))))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(usage(format!("empty {what} list")));
    }
    Ok(out)
}

/// Runs `work` once per seed. A `--seeds` list puts each run in its own
/// `seed-<s>` directory on its own thread.
fn fan_out(root: &Path, a: &StageArgs, work: impl Fn(PathBuf, u64) -> Result<()> + Sync) -> Result<()> {
    let Some(list) = &a.seeds else {
        return work(root.to_path_buf(), a.seed);
    };
    let seeds: Vec<u64> = parse_list(list, "seed")?;
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let dir = root.join(format!("seed-{seed}"));
                let work = &work;
                s.spawn(move || work(dir, seed).with_context(|| format!("seed {seed}")))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    results.into_iter().collect()
}

fn load_spec(path: Option<&Path>, default_json: &str, manifest: &mut RunManifest) -> Result<ModelSpec> {
    match path {
        Some(p) => {
            manifest.hash_file(p)?;
            Ok(ModelSpec::load(p)?)
        }
        None => {
            manifest.hash_bytes("bundled-spec", default_json.as_bytes());
            Ok(ModelSpec::from_json(default_json)?)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- profile

#[derive(Serialize)]
struct ProfileResolved<'a> {
    configs: Vec<String>,
    sweep: Option<&'a str>,
    cost_model: CostModel,
    reference: &'a str,
    format: &'a str,
}

fn cmd_profile(root: &Path, a: &ProfileArgs) -> Result<()> {
    let cost = CostModel {
        mac_cost: a.mac_cost,
        batch: a.batch,
        backward: match a.backward {
            BackwardRule::Doubled => BackwardCost::Doubled,
            BackwardRule::Split => BackwardCost::Split,
        },
    };
    cost.validate().map_err(|e| usage(e.to_string()))?;
    let configs: Vec<Config> = match (a.configs.as_str(), &a.sweep) {
        ("all", None) => Config::TABLE.to_vec(),
        ("all", Some(_)) => vec![],
        (list, _) => list
            .split(',')
            .map(|s| Config::parse(s.trim()).map_err(|e| usage(e.to_string())))
            .collect::<Result<_>>()?,
    };
    let mut manifest = RunManifest::new(
        "profile",
        &ProfileResolved {
            configs: configs.iter().map(|c| c.label().to_string()).collect(),
            sweep: a.sweep.as_deref(),
            cost_model: cost,
            reference: &a.reference,
            format: if a.format == Format::Csv { "csv" } else { "json" },
        },
        None,
    )?;
    let spec = load_spec(a.spec.as_deref(), FULL_SPEC_JSON, &mut manifest)?;
    if let Some(out) = &a.out {
        manifest.outputs.push(out.clone());
    }
    manifest.write(&root.join("profile"))?;

    let report = |label: String, spec: &ModelSpec, config: Config| -> Result<ProfileReport> {
        let net = build_network::<f32>(spec, config)?;
        Ok(profile(&label, &net.graph, net.loss, &net.trainable, &cost)?)
    };
    let mut rows = Vec::new();
    for &c in &configs {
        rows.push(report(c.label().to_string(), &spec, c)?);
    }
    if let Some(sweep) = &a.sweep {
        let (var, values) = sweep
            .split_once('=')
            .ok_or_else(|| usage(format!("sweep must look like b=1,3 or u=2,4, got `{sweep}`")))?;
        for v in parse_list::<usize>(values, "sweep value")? {
            let (label, s) = match var.trim() {
                "b" | "B" => (format!("udta_b{v}"), spec.with_thin_blocks(v)),
                "u" => (format!("udta_u{v}"), spec.with_expansion(v)),
                other => return Err(usage(format!("unknown sweep variable `{other}` (use b or u)"))),
            };
            let s = s.map_err(|e| usage(e.to_string()))?;
            rows.push(report(label, &s, Config::Udta { joint_encoder: false })?);
        }
    }
    if rows.is_empty() {
        return Err(usage("nothing to profile"));
    }
    let reference = rows.iter().position(|r| r.label == a.reference).unwrap_or(0);
    let cmp = compare_configs(rows, reference, cost)?;
    let text = match a.format {
        Format::Csv => cmp.to_csv(),
        Format::Json => cmp.to_json() + "\n",
    };
    match &a.out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    source: Option<SynthSpec>,
    target: Option<SynthSpec>,
}

fn cmd_gen_data(root: &Path, a: &GenDataArgs) -> Result<()> {
    let file: SynthFile = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => SynthFile::default(),
    };
    let mut resolved = SynthFile {
        source: Some(file.source.unwrap_or_else(SynthSpec::desk_source)),
        target: Some(file.target.unwrap_or_else(SynthSpec::desk_target)),
    };
    if let Some(s) = a.data_seed {
        resolved.source.as_mut().unwrap().seed = s;
        // distinct template stream for the target task
        resolved.target.as_mut().unwrap().seed = s.wrapping_add(1_000_003);
    }
    let dir = root.join("data");
    let mut manifest = RunManifest::new("gen-data", &resolved, a.data_seed)?;
    if let Some(p) = &a.config {
        manifest.hash_file(p)?;
    }
    for task in ["source", "target"] {
        for split in ["train", "test"] {
            manifest.outputs.push(dir.join(task).join(format!("{split}.udtd")));
        }
    }
    manifest.write(&dir)?;
    for (task, spec) in [("source", resolved.source.unwrap()), ("target", resolved.target.unwrap())] {
        let (train, test) = generate(&spec)?;
        let d = dir.join(task);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        train.save(d.join("train.udtd"))?;
        test.save(d.join("test.udtd"))?;
        write_file(&d.join("synth.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
        println!("{task}: {} train / {} test samples, {} classes", train.len(), test.len(), spec.classes);
    }
    Ok(())
}

// ---------------------------------------------------------------- training stages

/// Stage overrides from a JSON file; command-line flags win over these.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageOverrides {
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
}

fn resolve_stage(a: &StageArgs, mut base: TrainConfig, manifest_inputs: &mut Vec<PathBuf>) -> Result<TrainConfig> {
    let file = match &a.config {
        Some(p) => {
            manifest_inputs.push(p.clone());
            serde_json::from_slice::<StageOverrides>(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => StageOverrides::default(),
    };
    if let Some(v) = a.epochs.or(file.epochs) {
        base.epochs = v;
    }
    if let Some(v) = a.lr.or(file.lr) {
        base.lr = v;
    }
    if let Some(v) = a.batch_size.or(file.batch_size) {
        base.batch_size = v;
    }
    base.validate().map_err(|e| usage(e.to_string()))?;
    Ok(base)
}

fn load_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = Dataset::load(dir.join("train.udtd")).with_context(|| format!("loading data from {}", dir.display()))?;
    let test = Dataset::load(dir.join("test.udtd")).with_context(|| format!("loading data from {}", dir.display()))?;
    if train.classes != test.classes {
        bail!(udta::Error::Config(format!(
            "{}: train has {} classes, test {}",
            dir.display(),
            train.classes,
            test.classes
        )));
    }
    Ok((train, test))
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {what} checkpoint {}", path.display()))
}

#[derive(Serialize)]
struct StageResolved<'a> {
    spec: &'a ModelSpec,
    data: &'a Path,
    train: &'a TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    backbone: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoders: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a str>,
}

struct Metrics(Vec<String>);

impl Metrics {
    fn sink(&mut self) -> impl FnMut(&EpochMetrics) + '_ {
        |m: &EpochMetrics| {
            eprintln!(
                "[{}] epoch {:>3}  loss {:.5}{}",
                m.stage,
                m.epoch,
                m.loss,
                m.top1.map(|t| format!("  top1 {t:.4}")).unwrap_or_default()
            );
            self.0.push(m.to_json_line());
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.0.join("\n");
        text.push('\n');
        write_file(path, text)
    }
}

struct StageSetup {
    pcfg: PipelineConfig,
    manifest: RunManifest,
    train: Dataset,
    test: Dataset,
}

/// Common preparation of a training stage: spec, data and config
/// resolution, and the manifest (written before any training).
#[allow(clippy::too_many_arguments)]
fn setup_stage(
    name: &str,
    a: &StageArgs,
    seed: u64,
    data_dir: &Path,
    base: TrainConfig,
    inputs: &[&Path],
    config_label: Option<&str>,
    out: &Path,
    outputs: &[&str],
) -> Result<StageSetup> {
    let mut files = Vec::new();
    let tc = resolve_stage(a, base, &mut files)?;
    let mut manifest = RunManifest::new(name, &serde_json::Value::Null, Some(seed))?;
    let spec = load_spec(a.spec.as_deref(), DESK_SPEC_JSON, &mut manifest)?;
    for f in &files {
        manifest.hash_file(f)?;
    }
    let (train, test) = load_split(data_dir)?;
    manifest.hash_file(&data_dir.join("train.udtd"))?;
    manifest.hash_file(&data_dir.join("test.udtd"))?;
    for p in inputs {
        manifest.hash_file(p)?;
    }
    let backbone = inputs.first().copied();
    let encoders = inputs.get(1).copied();
    manifest.config = serde_json::to_value(StageResolved {
        spec: &spec,
        data: data_dir,
        train: &tc,
        backbone,
        encoders,
        config: config_label,
    })?;
    manifest.outputs = outputs.iter().map(|o| out.join(o)).collect();
    manifest.write(out)?;

    let mut pcfg = PipelineConfig::desk(seed);
    pcfg.spec = spec;
    match tc.stage {
        udta::train::Stage::Pretrain => {
            pcfg.source.classes = train.classes;
            pcfg.pretrain = tc;
        }
        udta::train::Stage::AeTrain => {
            pcfg.source.classes = train.classes;
            pcfg.autoencoder = tc;
        }
        udta::train::Stage::Adapt => {
            pcfg.target.classes = train.classes;
            pcfg.adapt = tc;
        }
    }
    Ok(StageSetup {
        pcfg,
        manifest,
        train,
        test,
    })
}

fn cmd_pretrain(root: &Path, dir: PathBuf, a: &StageArgs, seed: u64) -> Result<()> {
    let data = a.data.clone().unwrap_or_else(|| root.join("data/source"));
    let out = dir.join("pretrain");
    let s = setup_stage(
        "pretrain",
        a,
        seed,
        &data,
        TrainConfig::pretrain(),
        &[],
        None,
        &out,
        &["backbone.udtc", "metrics.jsonl"],
    )?;
    let mut metrics = Metrics(Vec::new());
    let (ckpt, _) = run_pretrain(&s.pcfg, &s.train, Some(&s.test), &mut metrics.sink())?;
    ckpt.save(&s.manifest.outputs[0])?;
    metrics.write(&s.manifest.outputs[1])?;
    Ok(())
}

#[derive(Serialize)]
struct AeReport {
    trained_mse: Vec<f64>,
    random_mse: Vec<f64>,
    ratio: Vec<f64>,
    backbone_nodes_in_traces: u64,
}

fn cmd_train_ae(root: &Path, dir: PathBuf, a: &StageArgs, seed: u64) -> Result<()> {
    let data = a.data.clone().unwrap_or_else(|| root.join("data/source"));
    let backbone = a.backbone.clone().unwrap_or_else(|| dir.join("pretrain/backbone.udtc"));
    let out = dir.join("train-ae");
    let s = setup_stage(
        "train-ae",
        a,
        seed,
        &data,
        TrainConfig::autoencoder(),
        &[&backbone],
        None,
        &out,
        &["encoders.udtc", "metrics.jsonl", "ae_report.json"],
    )?;
    let bb = load_checkpoint(&backbone, "backbone")?;
    let mut metrics = Metrics(Vec::new());
    let (enc, outcome) = run_train_autoencoders(&s.pcfg, &bb, &s.train, &s.test, &mut metrics.sink())?;
    enc.save(&s.manifest.outputs[0])?;
    metrics.write(&s.manifest.outputs[1])?;
    let report = AeReport {
        ratio: outcome
            .trained_mse
            .iter()
            .zip(&outcome.random_mse)
            .map(|(t, r)| t / r)
            .collect(),
        backbone_nodes_in_traces: outcome.report.traces.backbone_nodes,
        trained_mse: outcome.trained_mse,
        random_mse: outcome.random_mse,
    };
    write_file(&s.manifest.outputs[2], serde_json::to_string_pretty(&report)? + "\n")
}

#[derive(Serialize)]
struct TraceReport {
    config: String,
    steps: u64,
    backbone_nodes: u64,
    encoder_nodes: u64,
    backbone_backward_flops: u64,
    total_backward_flops: u64,
    steps_with_backbone: u64,
    distinct_nodes_visited: usize,
    final_top1: Option<f64>,
    epochs: Vec<EpochTrace>,
}

#[derive(Serialize)]
struct EpochTrace {
    epoch: usize,
    backbone_backward_flops: u64,
}

impl TraceReport {
    fn new(config: Config, r: &RunReport) -> Self {
        TraceReport {
            config: config.label().to_string(),
            steps: r.traces.steps,
            backbone_nodes: r.traces.backbone_nodes,
            encoder_nodes: r.traces.encoder_nodes,
            backbone_backward_flops: r.traces.backbone_backward_flops,
            total_backward_flops: r.traces.total_backward_flops,
            steps_with_backbone: r.traces.steps_with_backbone,
            distinct_nodes_visited: r.traces.visited_union.len(),
            final_top1: r.final_top1,
            epochs: r
                .epochs
                .iter()
                .map(|e| EpochTrace {
                    epoch: e.epoch,
                    backbone_backward_flops: e.backbone_backward_flops,
                })
                .collect(),
        }
    }
}

fn adaptation_stage(
    root: &Path,
    dir: &Path,
    a: &StageArgs,
    seed: u64,
    config: Config,
    encoders: Option<PathBuf>,
) -> Result<()> {
    let data = a.data.clone().unwrap_or_else(|| root.join("data/target"));
    let backbone = a.backbone.clone().unwrap_or_else(|| dir.join("pretrain/backbone.udtc"));
    let out = match config {
        Config::Udta { joint_encoder: false } => dir.join("adapt"),
        Config::Udta { joint_encoder: true } => dir.join("adapt-joint"),
        other => dir.join(format!("baseline-{}", other.label())),
    };
    let mut inputs: Vec<&Path> = Vec::new();
    if config != Config::Scratch {
        inputs.push(&backbone);
    }
    if let Some(e) = &encoders {
        inputs.push(e);
    }
    let base = match config {
        Config::Udta { joint_encoder } => TrainConfig::adapt(joint_encoder),
        other => TrainConfig::baseline(other.trainable_components()),
    };
    let s = setup_stage(
        if config.is_udta() { "adapt" } else { "baseline" },
        a,
        seed,
        &data,
        base,
        &inputs,
        Some(config.label()),
        &out,
        &["adapted.udtc", "metrics.jsonl", "trace_report.json"],
    )?;
    let bb = if config == Config::Scratch {
        Checkpoint { tensors: vec![] }
    } else {
        load_checkpoint(&backbone, "backbone")?
    };
    let enc = match &encoders {
        Some(p) => Some(load_checkpoint(p, "encoder")?),
        None => None,
    };
    let mut metrics = Metrics(Vec::new());
    let result = run_adaptation(&s.pcfg, config, &bb, enc.as_ref(), &s.train, &s.test, &mut metrics.sink());
    metrics.write(&s.manifest.outputs[1])?;
    let (net, report) = result?;
    Checkpoint::from_graph(&net.graph, |_| true).save(&s.manifest.outputs[0])?;
    let trace = TraceReport::new(config, &report);
    write_file(&s.manifest.outputs[2], serde_json::to_string_pretty(&trace)? + "\n")?;
    println!(
        "{}: top1 {:.4}, backbone backward FLOPs {}",
        config.label(),
        report.final_top1.unwrap_or(f64::NAN),
        trace.backbone_backward_flops
    );
    Ok(())
}

fn cmd_adapt(root: &Path, dir: PathBuf, a: &AdaptArgs, seed: u64) -> Result<()> {
    let encoders = if a.joint_encoder {
        if a.encoders.is_some() {
            return Err(usage("--encoders conflicts with --joint-encoder (encoders train from scratch)"));
        }
        None
    } else {
        Some(a.encoders.clone().unwrap_or_else(|| dir.join("train-ae/encoders.udtc")))
    };
    let config = Config::Udta {
        joint_encoder: a.joint_encoder,
    };
    adaptation_stage(root, &dir, &a.stage, seed, config, encoders)
}

fn cmd_baseline(root: &Path, dir: PathBuf, a: &BaselineArgs, seed: u64) -> Result<()> {
    let config = Config::parse(&a.kind).map_err(|e| usage(e.to_string()))?;
    if config.is_udta() {
        return Err(usage("use `adapt` for UDTA; baseline kinds are scratch, full_ft, top_ft, mp, ra"));
    }
    adaptation_stage(root, &dir, &a.stage, seed, config, None)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Serialize)]
struct GradcheckResolved {
    arch: &'static str,
    probes: usize,
    step: f64,
    seed: u64,
    tolerance: f64,
}

fn cmd_gradcheck(root: &Path, a: &GradcheckArgs) -> Result<()> {
    if a.probes == 0 {
        return Err(usage("--probes must be at least 1"));
    }
    let (name, mut cfg, tol) = match a.arch {
        GradArch::UdtaDesk => ("udta-desk", GradCheckConfig::single(a.probes), F32_TOLERANCE),
        GradArch::LinearToy => ("linear-toy", GradCheckConfig::double(a.probes), F64_TOLERANCE),
    };
    if let Some(step) = a.step {
        if !(step > 0.0 && step.is_finite()) {
            return Err(usage(format!("--step must be positive, got {step}")));
        }
        cfg.step = step;
    }
    cfg.seed = a.seed;
    let manifest = RunManifest::new(
        "gradcheck",
        &GradcheckResolved {
            arch: name,
            probes: cfg.probes,
            step: cfg.step,
            seed: cfg.seed,
            tolerance: tol,
        },
        Some(a.seed),
    )?;
    manifest.write(&root.join("gradcheck"))?;
    let report = match a.arch {
        GradArch::UdtaDesk => checks::desk_gradcheck::<f32>(Config::Udta { joint_encoder: false }, true, &cfg, checks::DESK_BATCH)?,
        GradArch::LinearToy => checks::linear_toy_gradcheck::<f64>(&cfg)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.evaluated == 0 {
        return Err(GradcheckFailed("every probe hit a kink; nothing was compared".into()).into());
    }
    if report.max_rel_error >= tol {
        let w = report.worst.as_ref().unwrap();
        return Err(GradcheckFailed(format!(
            "worst relative error {:.3e} >= {tol:.0e} at node {} `{}` ({}), slot {} index {}",
            w.rel_error, w.node, w.name, w.op, w.slot, w.index
        ))
        .into());
    }
    println!(
        "PASS {name}: worst relative error {:.3e} < {tol:.0e} over {} probes ({} skipped at kinks)",
        report.max_rel_error, report.evaluated, report.skipped_kinks
    );
    Ok(())
}
