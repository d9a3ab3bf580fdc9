use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEC_VERSION: u32 = 1;

/// Full-width MobileNetV2 at 224x224 with three thin blocks.
pub const FULL_SPEC_JSON: &str = include_str!("../../specs/mobilenetv2_full.json");
/// Quarter-width, 32x32 variant used for training runs on a desk machine.
pub const DESK_SPEC_JSON: &str = include_str!("../../specs/desk.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub stride: usize,
}

/// One row of the backbone table: `n` inverted-residual blocks with
/// expansion `t` and `c` output channels; only the first uses stride `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub t: usize,
    pub c: usize,
    pub n: usize,
    pub s: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    /// Backbone stage whose output feeds the adapter.
    pub stage: usize,
    /// Pass the activation through a 1x1 encoder (reduction `d`); low-width
    /// stages connect directly.
    pub encode: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Encoder output plus previous thin-block output.
    #[default]
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMerge {
    /// Pooled backbone features followed by pooled adapter features.
    #[default]
    Concat,
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub version: u32,
    pub name: String,
    pub input_resolution: usize,
    pub input_channels: usize,
    pub width_scale: f64,
    pub stem: StemSpec,
    pub blocks: Vec<StageSpec>,
    pub last_channels: usize,
    /// Stages the adapter may read from, bottom to top. A stack of `B` thin
    /// blocks uses the top `B` of them.
    pub attachment_candidates: Vec<Attachment>,
    pub thin_blocks: usize,
    pub u: usize,
    pub d: usize,
    pub classes: usize,
    #[serde(default)]
    pub merge: MergeRule,
    #[serde(default)]
    pub classifier_merge: ClassifierMerge,
    /// Check built shapes against the built-in MobileNetV2 reference tables.
    #[serde(default)]
    pub check_reference_tables: bool,
}

/// Nearest multiple of 8, at least 8.
pub fn round_channels(c: f64) -> usize {
    (((c / 8.0).round() as usize) * 8).max(8)
}

impl ModelSpec {
    pub fn full() -> Self {
        Self::from_json(FULL_SPEC_JSON).expect("bundled full spec is valid")
    }

    pub fn desk() -> Self {
        Self::from_json(DESK_SPEC_JSON).expect("bundled desk spec is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads and validates a spec file. Files that request it are also built
    /// once and checked against the reference shape tables.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec = Self::from_json(&text)?;
        if spec.check_reference_tables {
            super::verify_reference_shapes(&spec)?;
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.version != SPEC_VERSION {
            return fail(format!("version {} unsupported (expected {SPEC_VERSION})", self.version));
        }
        if self.input_resolution == 0 || self.input_channels == 0 {
            return fail("input resolution and channels must be positive".into());
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return fail(format!("width_scale must be positive, got {}", self.width_scale));
        }
        if self.blocks.is_empty() {
            return fail("backbone table is empty".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.t < 1 || b.n < 1 || !(b.s == 1 || b.s == 2) || b.c == 0 {
                return fail(format!("stage {i}: need t >= 1, n >= 1, s in {{1, 2}}, c > 0"));
            }
        }
        if ![1, 2].contains(&self.stem.stride) {
            return fail("stem stride must be 1 or 2".into());
        }
        if self.u <= 1 {
            return fail(format!("thin-block expansion u must exceed 1, got {}", self.u));
        }
        if self.d <= 1 {
            return fail(format!("encoder reduction d must exceed 1, got {}", self.d));
        }
        if self.thin_blocks < 1 {
            return fail("need at least one thin block".into());
        }
        if self.thin_blocks > self.attachment_candidates.len() {
            return fail(format!(
                "{} thin blocks but only {} attachment candidates",
                self.thin_blocks,
                self.attachment_candidates.len()
            ));
        }
        for w in self.attachment_candidates.windows(2) {
            if w[0].stage >= w[1].stage {
                return fail("attachment candidates must be strictly increasing stages".into());
            }
        }
        if let Some(a) = self.attachment_candidates.iter().find(|a| a.stage >= self.blocks.len()) {
            return fail(format!("attachment stage {} out of range", a.stage));
        }
        for a in self.attachments() {
            if a.encode && self.stage_channels(a.stage) % self.d != 0 {
                return fail(format!(
                    "stage {} has {} channels, not divisible by d = {}",
                    a.stage,
                    self.stage_channels(a.stage),
                    self.d
                ));
            }
        }
        if self.classes < 2 {
            return fail("need at least two classes".into());
        }
        Ok(())
    }

    /// The attachment points actually used: the top `thin_blocks` candidates.
    pub fn attachments(&self) -> &[Attachment] {
        &self.attachment_candidates[self.attachment_candidates.len() - self.thin_blocks..]
    }

    pub fn scaled(&self, c: usize) -> usize {
        round_channels(c as f64 * self.width_scale)
    }

    pub fn stem_channels(&self) -> usize {
        self.scaled(self.stem.channels)
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.scaled(self.blocks[stage].c)
    }

    pub fn head_channels(&self) -> usize {
        self.scaled(self.last_channels)
    }

    /// Channels of the pooled adapter feature (the raw width of the topmost
    /// attachment).
    pub fn adapter_channels(&self) -> usize {
        self.stage_channels(self.attachments().last().unwrap().stage)
    }

    pub fn with_thin_blocks(&self, b: usize) -> Result<Self> {
        let spec = ModelSpec { thin_blocks: b, ..self.clone() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_expansion(&self, u: usize) -> Result<Self> {
        let spec = ModelSpec { u, ..self.clone() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_classes(&self, classes: usize) -> Result<Self> {
        let spec = ModelSpec { classes, ..self.clone() };
        spec.validate()?;
        Ok(spec)
    }
}
