//! The desk-scale three-stage pipeline: pretrain on a source task, train
//! the autoencoders on source activations, then adapt each configuration to
//! the target task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{build_autoencoder_network, build_network, Config, ModelSpec, Network};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, SynthSpec};
use crate::error::Result;
use crate::graph::Component;
use crate::train::{self, MetricsSink, RunReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Architecture; `classes` is overridden by each task's class count.
    pub spec: ModelSpec,
    pub source: SynthSpec,
    pub target: SynthSpec,
    pub pretrain: TrainConfig,
    pub autoencoder: TrainConfig,
    /// Shared settings of every adaptation run (trainable components are
    /// chosen per configuration).
    pub adapt: TrainConfig,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn desk(seed: u64) -> Self {
        PipelineConfig {
            spec: ModelSpec::desk(),
            source: SynthSpec::desk_source(),
            target: SynthSpec::desk_target(),
            pretrain: TrainConfig::pretrain(),
            autoencoder: TrainConfig::autoencoder(),
            adapt: TrainConfig::adapt(false),
            seed,
        }
    }

    pub fn source_spec(&self) -> Result<ModelSpec> {
        self.spec.with_classes(self.source.classes)
    }

    pub fn target_spec(&self) -> Result<ModelSpec> {
        self.spec.with_classes(self.target.classes)
    }

    /// Stage-specific seed, so stages draw from independent streams.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(stage)
    }

    /// Adaptation config of one table configuration.
    pub fn adapt_config(&self, config: Config) -> TrainConfig {
        let base = TrainConfig {
            seed: self.stage_seed(3),
            ..self.adapt.clone()
        };
        match config {
            Config::Udta { joint_encoder } => TrainConfig {
                joint_encoder,
                trainable: TrainConfig::adapt(joint_encoder).trainable,
                ..base
            },
            other => TrainConfig {
                joint_encoder: false,
                trainable: other.trainable_components().to_vec(),
                ..base
            },
        }
    }
}

fn is_backbone(n: &crate::graph::GraphNode) -> bool {
    n.component == Component::Backbone
}

/// Stage 1: random-init backbone and classifier trained on the source task.
/// Returns the backbone checkpoint.
pub fn run_pretrain(
    cfg: &PipelineConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    sink: MetricsSink,
) -> Result<(Checkpoint, RunReport)> {
    let mut net = build_network::<f32>(&cfg.source_spec()?, Config::FullFt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(1));
    net.graph.initialize(&mut rng, |_| true);
    let tc = TrainConfig {
        seed: cfg.stage_seed(1),
        ..cfg.pretrain.clone()
    };
    let report = train::pretrain(&mut net, train_set, test_set, &tc, sink)?;
    Ok((Checkpoint::from_graph(&net.graph, is_backbone), report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderOutcome {
    pub report: RunReport,
    /// Held-out MSE per autoencoder after training.
    pub trained_mse: Vec<f64>,
    /// Held-out MSE of the same autoencoders at their random initialization.
    pub random_mse: Vec<f64>,
}

/// Stage 2: autoencoders trained on frozen source activations. Returns the
/// encoder checkpoint (decoders are discarded).
pub fn run_train_autoencoders(
    cfg: &PipelineConfig,
    backbone: &Checkpoint,
    train_set: &Dataset,
    test_set: &Dataset,
    sink: MetricsSink,
) -> Result<(Checkpoint, AutoencoderOutcome)> {
    let mut net = build_autoencoder_network::<f32>(&cfg.source_spec()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(2));
    net.graph.initialize(&mut rng, |_| true);
    backbone.apply(&mut net.graph)?;
    let random_mse = train::reconstruction_mse(&mut net, test_set, 64)?;
    let tc = TrainConfig {
        seed: cfg.stage_seed(2),
        ..cfg.autoencoder.clone()
    };
    let report = train::train_autoencoders(&mut net, train_set, Some(test_set), &tc, sink)?;
    let trained_mse = train::reconstruction_mse(&mut net, test_set, 64)?;
    let encoders = Checkpoint::from_graph(&net.graph, |n| n.component == Component::Encoder);
    Ok((
        encoders,
        AutoencoderOutcome {
            report,
            trained_mse,
            random_mse,
        },
    ))
}

/// Target network for `config`, with fresh adapters and classifier and, for
/// every configuration except Scratch, the pretrained backbone and encoders.
pub fn prepare_network(
    cfg: &PipelineConfig,
    config: Config,
    backbone: &Checkpoint,
    encoders: Option<&Checkpoint>,
) -> Result<Network<f32>> {
    let mut net = build_network::<f32>(&cfg.target_spec()?, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(4));
    net.graph.initialize(&mut rng, |_| true);
    if config != Config::Scratch {
        backbone.apply(&mut net.graph)?;
    }
    if let Some(enc) = encoders {
        enc.apply(&mut net.graph)?;
    }
    Ok(net)
}

/// Stage 3 for one configuration.
pub fn run_adaptation(
    cfg: &PipelineConfig,
    config: Config,
    backbone: &Checkpoint,
    encoders: Option<&Checkpoint>,
    train_set: &Dataset,
    test_set: &Dataset,
    sink: MetricsSink,
) -> Result<(Network<f32>, RunReport)> {
    let mut net = prepare_network(cfg, config, backbone, encoders)?;
    let tc = cfg.adapt_config(config);
    let report = if config.is_udta() {
        train::adapt(&mut net, train_set, Some(test_set), &tc, sink)?
    } else {
        train::run_baseline_adaptation(&mut net, train_set, Some(test_set), &tc, sink)?
    };
    Ok((net, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigOutcome {
    pub config: Config,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub pretrain: RunReport,
    pub autoencoders: AutoencoderOutcome,
    pub backbone: Checkpoint,
    pub encoders: Checkpoint,
    pub runs: Vec<ConfigOutcome>,
    /// Final parameters of each adapted network, in `runs` order.
    pub adapted: Vec<Checkpoint>,
}

impl PipelineOutcome {
    pub fn top1(&self, config: Config) -> Option<f64> {
        self.runs.iter().find(|r| r.config == config)?.report.final_top1
    }
}

/// All three stages, adapting every configuration in `configs`.
pub fn run_full(cfg: &PipelineConfig, configs: &[Config], sink: MetricsSink) -> Result<PipelineOutcome> {
    let (src_train, src_test) = crate::data::generate(&cfg.source)?;
    let (tgt_train, tgt_test) = crate::data::generate(&cfg.target)?;
    let (backbone, pretrain) = run_pretrain(cfg, &src_train, Some(&src_test), sink)?;
    let (encoders, autoencoders) = run_train_autoencoders(cfg, &backbone, &src_train, &src_test, sink)?;
    let mut runs = Vec::new();
    let mut adapted = Vec::new();
    for &config in configs {
        let (net, report) = run_adaptation(cfg, config, &backbone, Some(&encoders), &tgt_train, &tgt_test, sink)?;
        adapted.push(Checkpoint::from_graph(&net.graph, |_| true));
        runs.push(ConfigOutcome { config, report });
    }
    Ok(PipelineOutcome {
        pretrain,
        autoencoders,
        backbone,
        encoders,
        runs,
        adapted,
    })
}
