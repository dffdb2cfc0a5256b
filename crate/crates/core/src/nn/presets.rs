use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::spec::{Layer, NetworkSpec, Skip};
use crate::error::{Error, Result};

/// Reference architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// Dense stem, four identity-skip dense blocks of width 128, dense head.
    #[serde(rename = "resmlp-s")]
    ResMlpS,
    /// Conv stem, three conv blocks (the second one strided with a 1x1
    /// projection skip), global average pooling, dense head.
    #[serde(rename = "resnet-8")]
    ResNet8,
}

pub const RESMLP_WIDTH: usize = 128;
pub const RESMLP_BLOCKS: usize = 4;
pub const RESNET8_WIDTHS: [usize; 2] = [16, 32];

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::ResMlpS, Preset::ResNet8];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ResMlpS => "resmlp-s",
            Preset::ResNet8 => "resnet-8",
        }
    }

    /// Network for per-sample inputs of `input_shape` (`[C, H, W]`) and
    /// `classes` outputs.
    pub fn build(self, input_shape: &[usize], classes: usize) -> Result<NetworkSpec> {
        match self {
            Preset::ResMlpS => resmlp(input_shape, classes, RESMLP_WIDTH, RESMLP_BLOCKS),
            Preset::ResNet8 => resnet8(input_shape, classes),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected resmlp-s or resnet-8)")))
    }
}

pub fn resmlp(input_shape: &[usize], classes: usize, width: usize, blocks: usize) -> Result<NetworkSpec> {
    let features: usize = input_shape.iter().product();
    let mut layers = vec![
        Layer::flatten("flatten"),
        Layer::dense("stem", features, width),
        Layer::relu("stem_relu"),
    ];
    for b in 1..=blocks {
        layers.push(Layer::residual(
            format!("block{b}"),
            vec![
                Layer::dense("fc1", width, width),
                Layer::relu("relu"),
                Layer::dense("fc2", width, width),
            ],
            Skip::Identity,
        ));
        layers.push(Layer::relu(format!("block{b}_relu")));
    }
    layers.push(Layer::dense("head", width, classes));
    NetworkSpec::new(input_shape, layers)
}

fn conv_block(name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
    let branch = vec![
        Layer::conv("conv1", cin, cout, 3, stride, 1),
        Layer::batchnorm("bn1", cout),
        Layer::relu("relu"),
        Layer::conv("conv2", cout, cout, 3, 1, 1),
        Layer::batchnorm("bn2", cout),
    ];
    let skip = if cin == cout && stride == 1 {
        Skip::Identity
    } else {
        Skip::Projection(Box::new(Layer::conv("proj", cin, cout, 1, stride, 0)))
    };
    Layer::residual(name, branch, skip)
}

pub fn resnet8(input_shape: &[usize], classes: usize) -> Result<NetworkSpec> {
    let &[channels, _, _] = input_shape else {
        return Err(Error::Config(format!(
            "resnet-8 needs [C, H, W] inputs, got {input_shape:?}"
        )));
    };
    let [w1, w2] = RESNET8_WIDTHS;
    let layers = vec![
        Layer::conv("stem", channels, w1, 3, 1, 1),
        Layer::batchnorm("stem_bn", w1),
        Layer::relu("stem_relu"),
        conv_block("block1", w1, w1, 1),
        Layer::relu("block1_relu"),
        conv_block("block2", w1, w2, 2),
        Layer::relu("block2_relu"),
        conv_block("block3", w2, w2, 1),
        Layer::relu("block3_relu"),
        Layer::global_avg_pool("pool"),
        Layer::dense("head", w2, classes),
    ];
    NetworkSpec::new(input_shape, layers)
}
