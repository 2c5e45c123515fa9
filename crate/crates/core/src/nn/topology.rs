use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// 3×3 kernel, stride 1, zero padding 1.
    Conv3x3,
    Relu,
    /// 2×2 window, stride 2. Max or average depending on [`PoolMode`].
    Pool2x2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Avg,
}

impl std::str::FromStr for PoolMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(PoolMode::Max),
            "avg" => Ok(PoolMode::Avg),
            other => Err(format!("unknown pool mode `{other}` (expected max|avg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// A VGG-style convolutional stack: blocks of conv+relu pairs, each block
/// closed by a pooling layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    name: String,
    layers: Vec<LayerSpec>,
}

impl Topology {
    /// `blocks[b]` conv layers of width `widths[b]` in block `b + 1`.
    pub fn from_blocks(name: &str, blocks: &[usize], widths: &[usize]) -> Self {
        assert_eq!(blocks.len(), widths.len());
        let mut layers = Vec::new();
        let mut channels = 3;
        for (b, (&count, &width)) in blocks.iter().zip(widths).enumerate() {
            for l in 1..=count {
                layers.push(LayerSpec {
                    kind: LayerKind::Conv3x3,
                    name: format!("conv{}_{l}", b + 1),
                    in_channels: channels,
                    out_channels: width,
                });
                layers.push(LayerSpec {
                    kind: LayerKind::Relu,
                    name: format!("relu{}_{l}", b + 1),
                    in_channels: width,
                    out_channels: width,
                });
                channels = width;
            }
            layers.push(LayerSpec {
                kind: LayerKind::Pool2x2,
                name: format!("pool{}", b + 1),
                in_channels: channels,
                out_channels: channels,
            });
        }
        Topology {
            name: name.to_string(),
            layers,
        }
    }

    pub fn vgg19() -> Self {
        Self::from_blocks("vgg19", &[2, 2, 4, 4, 4], &[64, 128, 256, 512, 512])
    }

    pub fn vgg16() -> Self {
        Self::from_blocks("vgg16", &[2, 2, 3, 3, 3], &[64, 128, 256, 512, 512])
    }

    /// Three single-conv blocks of widths 8, 16 and 32.
    pub fn tiny() -> Self {
        Self::from_blocks("tiny", &[1, 1, 1], &[8, 16, 32])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv3x3)
    }

    /// Name of the last conv layer in the stack.
    pub fn deepest_conv(&self) -> &str {
        &self.conv_layers().last().expect("topology has conv layers").name
    }
}
