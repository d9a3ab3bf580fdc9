use serde::{Deserialize, Serialize};

use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::graph::{Component, ModelGraph, NodeId, Op, TrainableSet};
use crate::tensor::{Element, SampleShape};

/// Node range of one inverted-residual block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub stage: usize,
    pub first: NodeId,
    pub last: NodeId,
}

impl BlockInfo {
    pub fn contains(&self, id: NodeId) -> bool {
        self.first <= id && id <= self.last
    }
}

#[derive(Clone, Debug)]
pub struct BackboneHandles {
    pub input: NodeId,
    /// Output of the last block of every stage.
    pub stage_outputs: Vec<NodeId>,
    pub blocks: Vec<BlockInfo>,
    /// Pooled `1x1xhead_channels` feature.
    pub features: NodeId,
}

#[derive(Clone, Debug)]
pub struct AdapterHandles {
    /// Encoder conv per encoded attachment point, as `(stage, node)`.
    pub encoders: Vec<(usize, NodeId)>,
    pub thin_blocks: Vec<BlockInfo>,
    /// Input node of each thin block (attachment or merge).
    pub thin_inputs: Vec<NodeId>,
    pub pooled: NodeId,
}

/// Options for [`build_ir_block`].
#[derive(Clone, Copy, Debug)]
pub struct IrBlock {
    pub in_c: usize,
    pub out_c: usize,
    pub expansion: usize,
    pub stride: usize,
    pub component: Component,
    /// Add a channel-scale adapter in parallel to the depthwise conv.
    pub residual_adapter: bool,
}

/// Inverted residual block: 1x1 expand + BN + ReLU6, 3x3 depthwise + BN +
/// ReLU6, 1x1 project + BN without activation, and an identity skip when
/// the stride is 1 and the widths match. Returns the output node and the
/// node range.
pub fn build_ir_block<T: Element>(
    g: &mut ModelGraph<T>,
    input: NodeId,
    block: IrBlock,
    prefix: &str,
) -> Result<(NodeId, BlockInfo)> {
    if block.expansion < 1 {
        return Err(Error::InvalidSpec(format!("{prefix}: expansion must be at least 1")));
    }
    if g.node(input).shape.c != block.in_c {
        return Err(Error::InvalidSpec(format!(
            "{prefix}: input has {} channels, block expects {}",
            g.node(input).shape.c,
            block.in_c
        )));
    }
    let comp = block.component;
    let hidden = block.in_c * block.expansion;
    let first = NodeId(g.len());
    let e = g.add(
        format!("{prefix}.expand.conv"),
        Op::Conv1x1 { out_channels: hidden, stride: 1, bias: false },
        &[input],
        comp,
    )?;
    let e = g.add(format!("{prefix}.expand.bn"), Op::BatchNorm, &[e], comp)?;
    let e = g.add(format!("{prefix}.expand.relu"), Op::Relu6, &[e], comp)?;
    let mut dw = g.add(
        format!("{prefix}.dw.conv"),
        Op::Depthwise3x3 { stride: block.stride },
        &[e],
        comp,
    )?;
    if block.residual_adapter {
        let a = g.add(
            format!("{prefix}.dw.ra.scale"),
            Op::ChannelScale { stride: block.stride },
            &[e],
            Component::Adapter,
        )?;
        let a = g.add(format!("{prefix}.dw.ra.bn"), Op::BatchNorm, &[a], Component::Adapter)?;
        dw = g.add(format!("{prefix}.dw.ra.add"), Op::Add, &[dw, a], comp)?;
    }
    let d = g.add(format!("{prefix}.dw.bn"), Op::BatchNorm, &[dw], comp)?;
    let d = g.add(format!("{prefix}.dw.relu"), Op::Relu6, &[d], comp)?;
    let p = g.add(
        format!("{prefix}.project.conv"),
        Op::Conv1x1 { out_channels: block.out_c, stride: 1, bias: false },
        &[d],
        comp,
    )?;
    let mut out = g.add(format!("{prefix}.project.bn"), Op::BatchNorm, &[p], comp)?;
    if block.stride == 1 && block.in_c == block.out_c {
        out = g.add(format!("{prefix}.add"), Op::Add, &[input, out], comp)?;
    }
    Ok((out, BlockInfo { stage: usize::MAX, first, last: out }))
}

/// MobileNetV2 backbone: stem conv through the final 1x1 conv and global
/// average pool, every node tagged Backbone.
pub fn build_backbone<T: Element>(
    g: &mut ModelGraph<T>,
    spec: &ModelSpec,
    residual_adapters: bool,
) -> Result<BackboneHandles> {
    let res = spec.input_resolution;
    let input = g.input("input", SampleShape::new(spec.input_channels, res, res))?;
    let bb = Component::Backbone;
    let stem_c = spec.stem_channels();
    let x = g.add(
        "backbone.stem.conv",
        Op::Conv3x3 { out_channels: stem_c, stride: spec.stem.stride },
        &[input],
        bb,
    )?;
    let x = g.add("backbone.stem.bn", Op::BatchNorm, &[x], bb)?;
    let mut x = g.add("backbone.stem.relu", Op::Relu6, &[x], bb)?;
    let mut c = stem_c;
    let mut stage_outputs = Vec::new();
    let mut blocks = Vec::new();
    let mut k = 0;
    for (stage, row) in spec.blocks.iter().enumerate() {
        let out_c = spec.stage_channels(stage);
        for rep in 0..row.n {
            let stride = if rep == 0 { row.s } else { 1 };
            let (y, mut info) = build_ir_block(
                g,
                x,
                IrBlock {
                    in_c: c,
                    out_c,
                    expansion: row.t,
                    stride,
                    component: bb,
                    residual_adapter: residual_adapters,
                },
                &format!("backbone.b{k}"),
            )?;
            info.stage = stage;
            blocks.push(info);
            x = y;
            c = out_c;
            k += 1;
        }
        stage_outputs.push(x);
    }
    let head_c = spec.head_channels();
    let h = g.add(
        "backbone.head.conv",
        Op::Conv1x1 { out_channels: head_c, stride: 1, bias: false },
        &[x],
        bb,
    )?;
    let h = g.add("backbone.head.bn", Op::BatchNorm, &[h], bb)?;
    let h = g.add("backbone.head.relu", Op::Relu6, &[h], bb)?;
    let features = g.add("backbone.pool", Op::GlobalAvgPool, &[h], bb)?;
    Ok(BackboneHandles {
        input,
        stage_outputs,
        blocks,
        features,
    })
}

/// Linear 1x1 conv `in_c -> in_c / d`, tagged Encoder.
pub fn build_encoder<T: Element>(g: &mut ModelGraph<T>, from: NodeId, d: usize, name: &str) -> Result<NodeId> {
    let in_c = g.node(from).shape.c;
    if d == 0 || in_c % d != 0 {
        return Err(Error::InvalidSpec(format!(
            "encoder `{name}`: {in_c} channels not divisible by d = {d}"
        )));
    }
    g.add(
        name,
        Op::Conv1x1 { out_channels: in_c / d, stride: 1, bias: false },
        &[from],
        Component::Encoder,
    )
}

/// Encoder followed by a 1x1 decoder back to `in_c` (tagged AuxDecoder).
/// Returns `(encoder, decoder)`.
pub fn build_autoencoder<T: Element>(
    g: &mut ModelGraph<T>,
    from: NodeId,
    d: usize,
    encoder_name: &str,
    decoder_name: &str,
) -> Result<(NodeId, NodeId)> {
    let in_c = g.node(from).shape.c;
    let enc = build_encoder(g, from, d, encoder_name)?;
    let dec = g.add(
        decoder_name,
        Op::Conv1x1 { out_channels: in_c, stride: 1, bias: false },
        &[enc],
        Component::AuxDecoder,
    )?;
    Ok((enc, dec))
}

/// IR-shaped block with expansion `u`, tagged Adapter.
pub fn build_thin_block<T: Element>(
    g: &mut ModelGraph<T>,
    input: NodeId,
    out_c: usize,
    u: usize,
    stride: usize,
    prefix: &str,
) -> Result<(NodeId, BlockInfo)> {
    if u <= 1 {
        return Err(Error::InvalidSpec(format!("{prefix}: thin-block expansion must exceed 1")));
    }
    let in_c = g.node(input).shape.c;
    build_ir_block(
        g,
        input,
        IrBlock {
            in_c,
            out_c,
            expansion: u,
            stride,
            component: Component::Adapter,
            residual_adapter: false,
        },
        prefix,
    )
}

pub fn encoder_name(stage: usize) -> String {
    format!("encoder.s{stage}.conv")
}

pub fn decoder_name(stage: usize) -> String {
    format!("decoder.s{stage}.conv")
}

/// Attaches the thin-block stack. The first block reads its attachment
/// directly or through an encoder; each later block reads the sum of the
/// encoded attachment and the previous block's output. Nothing flows back
/// into the backbone.
pub fn attach_udta<T: Element>(
    g: &mut ModelGraph<T>,
    backbone: &BackboneHandles,
    spec: &ModelSpec,
) -> Result<AdapterHandles> {
    let atts = spec.attachments();
    let mut encoders = Vec::new();
    let mut sources = Vec::new();
    for a in atts {
        let node = backbone.stage_outputs[a.stage];
        let src = if a.encode {
            let e = build_encoder(g, node, spec.d, &encoder_name(a.stage))?;
            encoders.push((a.stage, e));
            e
        } else {
            node
        };
        sources.push(src);
    }
    let mut thin_blocks = Vec::new();
    let mut thin_inputs = Vec::new();
    let mut prev: Option<NodeId> = None;
    for (i, &src) in sources.iter().enumerate() {
        let block_in = match prev {
            None => src,
            Some(p) => {
                let (ps, ss) = (g.node(p).shape, g.node(src).shape);
                if ps != ss {
                    return Err(Error::InvalidSpec(format!(
                        "thin block {i}: previous output {ps} cannot merge with attachment {ss}"
                    )));
                }
                g.add(format!("adapter.merge{i}"), Op::Add, &[src, p], Component::Adapter)?
            }
        };
        let here = g.node(block_in).shape;
        let (out_c, stride) = match sources.get(i + 1) {
            Some(&next) => {
                let ns = g.node(next).shape;
                let stride = if ns.h == here.h {
                    1
                } else if ns.h == here.h.div_ceil(2) {
                    2
                } else {
                    return Err(Error::InvalidSpec(format!(
                        "thin block {i}: cannot step from {here} to {ns} with stride 1 or 2"
                    )));
                };
                (ns.c, stride)
            }
            None => (spec.adapter_channels(), 1),
        };
        let (out, info) = build_thin_block(g, block_in, out_c, spec.u, stride, &format!("adapter.t{i}"))?;
        thin_inputs.push(block_in);
        thin_blocks.push(info);
        prev = Some(out);
    }
    let pooled = g.add("adapter.pool", Op::GlobalAvgPool, &[prev.unwrap()], Component::Adapter)?;
    g.check_unidirectional()?;
    Ok(AdapterHandles {
        encoders,
        thin_blocks,
        thin_inputs,
        pooled,
    })
}

/// Concatenates pooled backbone and adapter features (when present) and
/// applies a linear head, all tagged Classifier. Returns the logits node.
pub fn build_classifier<T: Element>(
    g: &mut ModelGraph<T>,
    backbone_features: NodeId,
    adapter_features: Option<NodeId>,
    classes: usize,
) -> Result<NodeId> {
    if classes < 2 {
        return Err(Error::InvalidSpec("classifier needs at least two classes".into()));
    }
    let feat = match adapter_features {
        Some(a) => g.add("classifier.concat", Op::Concat, &[backbone_features, a], Component::Classifier)?,
        None => backbone_features,
    };
    g.add(
        "classifier.fc",
        Op::Linear { out_features: classes, bias: true },
        &[feat],
        Component::Classifier,
    )
}

/// Training configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Config {
    /// Random-init backbone, everything trained.
    Scratch,
    /// Pretrained backbone, everything trained.
    FullFt,
    /// Only the classifier trained.
    TopFt,
    /// Batch-norm scale and bias of the backbone plus the classifier.
    ModelPatch,
    /// Channel-wise adapters parallel to every depthwise conv plus the
    /// classifier.
    ResidualAdapter,
    /// Thin-adapter stack plus the classifier; `joint_encoder` also trains
    /// the encoders.
    Udta { joint_encoder: bool },
}

impl Config {
    pub const TABLE: [Config; 6] = [
        Config::Scratch,
        Config::FullFt,
        Config::TopFt,
        Config::ModelPatch,
        Config::ResidualAdapter,
        Config::Udta { joint_encoder: false },
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Config::Scratch => "scratch",
            Config::FullFt => "full_ft",
            Config::TopFt => "top_ft",
            Config::ModelPatch => "model_patch",
            Config::ResidualAdapter => "residual_adapter",
            Config::Udta { joint_encoder: false } => "udta",
            Config::Udta { joint_encoder: true } => "udta_joint",
        }
    }

    pub fn parse(s: &str) -> Result<Config> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "scratch" => Config::Scratch,
            "full_ft" | "fullft" | "full" => Config::FullFt,
            "top_ft" | "topft" | "top" => Config::TopFt,
            "model_patch" | "mp" => Config::ModelPatch,
            "residual_adapter" | "ra" => Config::ResidualAdapter,
            "udta" => Config::Udta { joint_encoder: false },
            "udta_joint" | "joint" => Config::Udta { joint_encoder: true },
            other => return Err(Error::Config(format!("unknown config `{other}`"))),
        })
    }

    pub fn is_udta(&self) -> bool {
        matches!(self, Config::Udta { .. })
    }

    /// Trainable components of this configuration.
    pub fn trainable_components(&self) -> &'static [Component] {
        match self {
            Config::Scratch | Config::FullFt => &[Component::Backbone, Component::Classifier],
            Config::TopFt => &[Component::Classifier],
            Config::ModelPatch => &[Component::Patch, Component::Classifier],
            Config::ResidualAdapter => &[Component::Adapter, Component::Classifier],
            Config::Udta { joint_encoder: false } => &[Component::Adapter, Component::Classifier],
            Config::Udta { joint_encoder: true } => &[Component::Adapter, Component::Encoder, Component::Classifier],
        }
    }
}

/// A built graph with its handles, loss and trainable set.
#[derive(Clone, Debug)]
pub struct Network<T: Element = f32> {
    pub graph: ModelGraph<T>,
    pub config: Config,
    pub backbone: BackboneHandles,
    pub adapter: Option<AdapterHandles>,
    pub logits: NodeId,
    pub loss: NodeId,
    pub trainable: TrainableSet,
}

/// Builds the classification network for `config`. Parameters are left at
/// their allocation defaults; call [`ModelGraph::initialize`] or load a
/// checkpoint.
pub fn build_network<T: Element>(spec: &ModelSpec, config: Config) -> Result<Network<T>> {
    spec.validate()?;
    let mut g = ModelGraph::new();
    let backbone = build_backbone(&mut g, spec, config == Config::ResidualAdapter)?;
    let adapter = if config.is_udta() {
        Some(attach_udta(&mut g, &backbone, spec)?)
    } else {
        None
    };
    let logits = build_classifier(&mut g, backbone.features, adapter.as_ref().map(|a| a.pooled), spec.classes)?;
    let loss = g.add("loss", Op::CrossEntropy, &[logits], Component::Classifier)?;
    if config == Config::ModelPatch {
        let bns: Vec<NodeId> = g
            .nodes()
            .iter()
            .filter(|n| n.component == Component::Backbone && n.op == Op::BatchNorm)
            .map(|n| n.id)
            .collect();
        for id in bns {
            g.set_component(id, Component::Patch);
        }
    }
    let trainable = TrainableSet::from_components(&g, config.trainable_components());
    Ok(Network {
        graph: g,
        config,
        backbone,
        adapter,
        logits,
        loss,
        trainable,
    })
}

/// Backbone plus one autoencoder per encoded attachment point, each with an
/// MSE reconstruction loss against the activation it compresses.
#[derive(Clone, Debug)]
pub struct AutoencoderNetwork<T: Element = f32> {
    pub graph: ModelGraph<T>,
    pub backbone: BackboneHandles,
    /// `(stage, encoder, decoder, loss)` per autoencoder.
    pub autoencoders: Vec<AutoencoderHandles>,
}

#[derive(Clone, Copy, Debug)]
pub struct AutoencoderHandles {
    pub stage: usize,
    pub target: NodeId,
    pub encoder: NodeId,
    pub decoder: NodeId,
    pub loss: NodeId,
}

pub fn build_autoencoder_network<T: Element>(spec: &ModelSpec) -> Result<AutoencoderNetwork<T>> {
    spec.validate()?;
    let mut g = ModelGraph::new();
    let backbone = build_backbone(&mut g, spec, false)?;
    let mut autoencoders = Vec::new();
    for a in spec.attachments().iter().filter(|a| a.encode) {
        let target = backbone.stage_outputs[a.stage];
        let (encoder, decoder) = build_autoencoder(&mut g, target, spec.d, &encoder_name(a.stage), &decoder_name(a.stage))?;
        let loss = g.add(format!("loss.s{}", a.stage), Op::Mse, &[decoder, target], Component::AuxDecoder)?;
        autoencoders.push(AutoencoderHandles {
            stage: a.stage,
            target,
            encoder,
            decoder,
            loss,
        });
    }
    Ok(AutoencoderNetwork {
        graph: g,
        backbone,
        autoencoders,
    })
}
