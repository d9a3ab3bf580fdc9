//! MobileNetV2 backbone, thin-adapter stack and baseline configurations.

mod build;
mod spec;

pub use build::{
    attach_udta, build_autoencoder, build_autoencoder_network, build_backbone, build_classifier, build_encoder,
    build_ir_block, build_network, build_thin_block, decoder_name, encoder_name, AdapterHandles,
    AutoencoderHandles, AutoencoderNetwork, BackboneHandles, BlockInfo, Config, IrBlock, Network,
};
pub use spec::{
    round_channels, Attachment, ClassifierMerge, MergeRule, ModelSpec, StageSpec, StemSpec, DESK_SPEC_JSON,
    FULL_SPEC_JSON, SPEC_VERSION,
};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::SampleShape;

/// Stem output of MobileNetV2 at 224x224.
pub const REFERENCE_STEM: (usize, usize) = (112, 32);
/// `(spatial, channels)` of each stage output of MobileNetV2 at 224x224.
pub const REFERENCE_STAGES: [(usize, usize); 7] =
    [(112, 16), (56, 24), (28, 32), (14, 64), (14, 96), (7, 160), (7, 320)];
/// Final 1x1 conv output.
pub const REFERENCE_HEAD: (usize, usize) = (7, 1280);

/// Builds the backbone of `spec` and compares its stem, stage and head
/// shapes with the standard MobileNetV2 tables.
pub fn verify_reference_shapes(spec: &ModelSpec) -> Result<()> {
    let mut g = ModelGraph::<f32>::new();
    let h = build_backbone(&mut g, spec, false)?;
    let check = |what: String, got: SampleShape, (s, c): (usize, usize)| {
        let want = SampleShape::new(c, s, s);
        if got == want {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("{what}: built {got}, reference {want}")))
        }
    };
    if h.stage_outputs.len() != REFERENCE_STAGES.len() {
        return Err(Error::InvalidSpec(format!(
            "{} stages, reference table has {}",
            h.stage_outputs.len(),
            REFERENCE_STAGES.len()
        )));
    }
    let stem = g.find("backbone.stem.relu").expect("stem exists");
    check("stem".into(), g.node(stem).shape, REFERENCE_STEM)?;
    for (i, (&id, &want)) in h.stage_outputs.iter().zip(&REFERENCE_STAGES).enumerate() {
        check(format!("stage {i}"), g.node(id).shape, want)?;
    }
    let head = g.find("backbone.head.relu").expect("head exists");
    check("head".into(), g.node(head).shape, REFERENCE_HEAD)
}
