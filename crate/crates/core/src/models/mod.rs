//! Architecture zoo: declarative model configurations and buildable layer
//! graphs for the I3D, Two-Stream, Fusion, and CNN-RNN families.

mod build;
#[cfg(test)]
mod tests;
mod graph;
mod serialize;

pub use build::{build_model, default_dropout, EF_MID_INIT};
pub use graph::{ForwardResult, InputSpec, LayerOp, Model, ModelNode, Param, ParamSet, PortRef};
pub use serialize::{load_model, save_model};

use serde::{Deserialize, Serialize};

use crate::data::{frame_difference, triplicate_grayscale};
use crate::error::{Error, Result};
use crate::layers::RnnCell;
use crate::tensor::Tensor;

/// The nine buildable architecture families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "I3D_ORIGINAL")]
    I3dOriginal,
    #[serde(rename = "I3D_MINI")]
    I3dMini,
    #[serde(rename = "TWO_STREAM")]
    TwoStream,
    #[serde(rename = "FUSION_COMBINATION")]
    FusionCombination,
    #[serde(rename = "FUSION_NEW_COMBINATION")]
    FusionNewCombination,
    #[serde(rename = "FUSION_DUAL_INPUT")]
    FusionDualInput,
    #[serde(rename = "FUSION_DUAL_TRUNCATED")]
    FusionDualTruncated,
    #[serde(rename = "FUSION_SINGLE_INPUT")]
    FusionSingleInput,
    #[serde(rename = "CNN_RNN_SCRATCH")]
    CnnRnnScratch,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::I3dOriginal,
        Family::I3dMini,
        Family::TwoStream,
        Family::FusionCombination,
        Family::FusionNewCombination,
        Family::FusionDualInput,
        Family::FusionDualTruncated,
        Family::FusionSingleInput,
        Family::CnnRnnScratch,
    ];

    /// Families whose stem exposes the conv2 kernel ablation.
    pub fn has_i3d_stem(self) -> bool {
        !matches!(self, Family::TwoStream | Family::CnnRnnScratch)
    }

    /// Families that take a frame-difference temporal input alongside the clip.
    pub fn has_temporal_input(self) -> bool {
        matches!(
            self,
            Family::TwoStream
                | Family::FusionCombination
                | Family::FusionNewCombination
                | Family::FusionDualInput
                | Family::FusionDualTruncated
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            Family::I3dOriginal => "I3D_ORIGINAL",
            Family::I3dMini => "I3D_MINI",
            Family::TwoStream => "TWO_STREAM",
            Family::FusionCombination => "FUSION_COMBINATION",
            Family::FusionNewCombination => "FUSION_NEW_COMBINATION",
            Family::FusionDualInput => "FUSION_DUAL_INPUT",
            Family::FusionDualTruncated => "FUSION_DUAL_TRUNCATED",
            Family::FusionSingleInput => "FUSION_SINGLE_INPUT",
            Family::CnnRnnScratch => "CNN_RNN_SCRATCH",
        }
    }
}

/// Normalization policy: batch or layer norm after every convolution; mixed
/// keeps batch norm in the CNN and layer-normalizes recurrent hidden states
/// (CNN-RNN only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Batch,
    Layer,
    Mixed,
}

/// Conv2 kernel ablation for I3D-style stems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conv2Kernel {
    #[serde(rename = "1x1x1")]
    K1x1x1,
    #[serde(rename = "3x1x1")]
    K3x1x1,
    #[serde(rename = "3x3x3")]
    K3x3x3,
    #[serde(rename = "2x3x3x3")]
    Double3x3x3,
}

impl Conv2Kernel {
    pub fn label(self) -> &'static str {
        match self {
            Conv2Kernel::K1x1x1 => "1x1x1",
            Conv2Kernel::K3x1x1 => "3x1x1",
            Conv2Kernel::K3x3x3 => "3x3x3",
            Conv2Kernel::Double3x3x3 => "2x3x3x3",
        }
    }
}

/// Regression head layouts evaluated for the I3D families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadVariant {
    /// Dropout + Flatten + Dense
    OG,
    /// GAP + Dropout + Dense (the selected default)
    A,
    /// Dropout + 1x1x1 Conv + GAP
    B,
    /// GAP + Dense + Dropout + Dense
    C,
}

/// Everything needed to build one model graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub norm: NormMode,
    pub conv2_kernel: Conv2Kernel,
    pub head: HeadVariant,
    pub rnn_cell: Option<RnnCell>,
    pub width_multiplier: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::I3dMini,
            norm: NormMode::Batch,
            conv2_kernel: Conv2Kernel::K1x1x1,
            head: HeadVariant::A,
            rnn_cell: None,
            width_multiplier: 1.0,
            frames: 28,
            height: 112,
            width: 112,
        }
    }
}

impl ModelConfig {
    pub fn new(family: Family) -> Self {
        ModelConfig {
            family,
            ..Default::default()
        }
    }

    /// Channel width after applying the width multiplier (never below 1).
    pub fn ch(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "width_multiplier must be in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        if self.norm == NormMode::Mixed && self.family != Family::CnnRnnScratch {
            return Err(Error::InvalidConfig(format!(
                "mixed normalization is only valid for CNN_RNN_SCRATCH, not {}",
                self.family.label()
            )));
        }
        if self.conv2_kernel != Conv2Kernel::K1x1x1 && !self.family.has_i3d_stem() {
            return Err(Error::InvalidConfig(format!(
                "conv2_kernel is only meaningful for families with an I3D stem, not {}",
                self.family.label()
            )));
        }
        if self.head != HeadVariant::A
            && !matches!(self.family, Family::I3dOriginal | Family::I3dMini)
        {
            return Err(Error::InvalidConfig(format!(
                "head variants other than A only apply to the I3D families, not {}",
                self.family.label()
            )));
        }
        if self.rnn_cell.is_some() && self.family != Family::CnnRnnScratch {
            return Err(Error::InvalidConfig(format!(
                "rnn_cell only applies to CNN_RNN_SCRATCH, not {}",
                self.family.label()
            )));
        }
        if self.frames < 2 {
            return Err(Error::InvalidConfig(format!(
                "clips need at least 2 frames, got {}",
                self.frames
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidConfig(format!(
                "spatial extents must be at least 8, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Effective recurrent cell for CNN-RNN builds.
    pub fn cell(&self) -> RnnCell {
        self.rnn_cell.unwrap_or(RnnCell::Gru)
    }
}

/// Turn one grayscale clip (T,H,W,1) into the input tensors the family's
/// model declares: the raw clip, plus frame differences for temporal-stream
/// families, or triplicated channels for the CNN-RNN.
pub fn model_inputs_for_clip(family: Family, frames: &Tensor) -> Result<Vec<Tensor>> {
    if family.has_temporal_input() {
        Ok(vec![frames.clone(), frame_difference(frames)?])
    } else if family == Family::CnnRnnScratch {
        Ok(vec![triplicate_grayscale(frames)?])
    } else {
        Ok(vec![frames.clone()])
    }
}
