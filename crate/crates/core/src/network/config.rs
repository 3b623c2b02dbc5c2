use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// One backbone stage: `blocks` conv3×3 blocks, the first with stride 2
/// when `downsample` is set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub blocks: usize,
    pub downsample: bool,
}

impl StageSpec {
    pub fn new(out_channels: usize, blocks: usize, downsample: bool) -> Self {
        StageSpec {
            out_channels,
            blocks,
            downsample,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// No nonlinearity: every feature map becomes an affine function of the input.
    Identity,
}

/// Architecture of the training graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub disc_hidden: usize,
    pub residual: bool,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            input_height: 16,
            input_width: 16,
            stages: vec![
                StageSpec::new(16, 1, false),
                StageSpec::new(32, 1, true),
                StageSpec::new(64, 1, true),
            ],
            num_classes: 4,
            disc_hidden: 128,
            residual: false,
            activation: Activation::Relu,
        }
    }
}

/// Spatial extent after a 3×3, padding-1 convolution with the given stride.
pub(crate) fn conv3_out(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

impl NetConfig {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(config_err!("need at least 2 stages, got {}", self.stages.len()));
        }
        if self.in_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(config_err!(
                "input {}x{}x{} has an empty extent",
                self.in_channels,
                self.input_height,
                self.input_width
            ));
        }
        if self.num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.disc_hidden == 0 {
            return Err(config_err!("discriminator hidden width must be positive"));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.blocks == 0 {
                return Err(config_err!("stage {} needs positive channels and blocks: {:?}", k, s));
            }
        }
        Ok(())
    }

    /// `(channels, height, width)` shared by every aligned feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for s in &self.stages {
            let stride = if s.downsample { 2 } else { 1 };
            h = conv3_out(h, stride);
            w = conv3_out(w, stride);
        }
        (self.stages.last().map_or(0, |s| s.out_channels), h, w)
    }

    /// Stride-2 convolutions between the input and the backbone output.
    pub fn backbone_downsamples(&self) -> usize {
        self.stages.iter().filter(|s| s.downsample).count()
    }
}
