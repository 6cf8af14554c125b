//! Reconstruction networks: D-CNN (plain de-convolution blocks) and the two
//! neighborly variants, NbNet-A and NbNet-B.
//!
//! A network is described declaratively by a [`NetworkSpec`] and instantiated
//! with [`build_network`]. Every block up-samples with a DconvOP
//! (de-convolution, batch-norm, ReLU). Plain blocks stop there; neighborly
//! blocks give the DconvOP half of the output channels and fill the other half
//! with a chain of 3x3 ConvOPs whose outputs are concatenated after it:
//!
//! * NbNet-A feeds ConvOP `p` with the output of ConvOP `p - 1` only;
//! * NbNet-B feeds ConvOP `p` with everything produced so far in the block.

mod model;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use model::{block_forward, build_network, count_parameters, reconstruct, Block, BlockActivation, BlockCache, ModelCache, ReconstructionModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Dcnn,
    NbnetA,
    NbnetB,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Dcnn, Arch::NbnetA, Arch::NbnetB];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Dcnn => "dcnn",
            Arch::NbnetA => "nbnet_a",
            Arch::NbnetB => "nbnet_b",
        }
    }

    pub fn block_kind(self) -> BlockKind {
        match self {
            Arch::Dcnn => BlockKind::Plain,
            Arch::NbnetA => BlockKind::NbA,
            Arch::NbnetB => BlockKind::NbB,
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dcnn" | "d_cnn" => Ok(Arch::Dcnn),
            "nbnet_a" | "nba" => Ok(Arch::NbnetA),
            "nbnet_b" | "nbb" => Ok(Arch::NbnetB),
            other => Err(Error::Config(format!("unknown architecture `{other}` (expected dcnn, nbnet_a or nbnet_b)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Plain,
    NbA,
    NbB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Pixel,
    Perceptual,
}

/// One de-convolution block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Channels leaving the block, `c'`.
    pub out_channels: usize,
    pub dconv_kernel: usize,
    pub dconv_stride: usize,
    pub dconv_pad: usize,
    #[serde(default)]
    pub dconv_output_pad: usize,
    /// Channels produced by each ConvOP.
    pub convop_channels: usize,
    /// Number of ConvOPs, `P`; zero for plain blocks.
    pub convop_count: usize,
    pub convop_kernel: usize,
}

impl BlockSpec {
    pub fn dconv_channels(&self) -> usize {
        match self.kind {
            BlockKind::Plain => self.out_channels,
            BlockKind::NbA | BlockKind::NbB => self.out_channels / 2,
        }
    }

    /// Input widths of the ConvOPs, in order.
    pub fn convop_input_channels(&self) -> Vec<usize> {
        let half = self.dconv_channels();
        (0..self.convop_count)
            .map(|p| match self.kind {
                BlockKind::Plain => 0,
                BlockKind::NbA if p == 0 => half,
                BlockKind::NbA => self.convop_channels,
                BlockKind::NbB => half + p * self.convop_channels,
            })
            .collect()
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input - 1) * self.dconv_stride + self.dconv_kernel + self.dconv_output_pad - 2 * self.dconv_pad
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("block {}: {msg}", index + 1)));
        if self.out_channels == 0 || self.dconv_kernel == 0 || self.dconv_stride == 0 {
            return bad("channels, kernel and stride must be positive".into());
        }
        if self.dconv_kernel + self.dconv_output_pad <= 2 * self.dconv_pad {
            return bad("padding exceeds the de-convolution kernel".into());
        }
        match self.kind {
            BlockKind::Plain if self.convop_count != 0 => bad("plain blocks have no ConvOPs".into()),
            BlockKind::Plain => Ok(()),
            BlockKind::NbA | BlockKind::NbB => {
                if self.out_channels % 2 != 0 {
                    return bad(format!("neighborly block needs an even channel count, got {}", self.out_channels));
                }
                if self.convop_channels == 0 || self.convop_kernel % 2 == 0 {
                    return bad("ConvOPs need positive channels and an odd kernel".into());
                }
                let half = self.out_channels / 2;
                if half != self.convop_count * self.convop_channels {
                    return bad(format!(
                        "c'/2 = {half} must equal P x convop_channels = {} x {}",
                        self.convop_count, self.convop_channels
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Declarative description of a reconstruction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Arch,
    /// Template dimension; templates enter as `(input_dim, 1, 1)` tensors.
    pub input_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub final_kernel: usize,
    pub out_channels: usize,
    /// Biases on conv and de-conv layers.
    pub conv_bias: bool,
    /// Learnable scale and shift in batch-norm.
    pub bn_affine: bool,
    #[serde(default)]
    pub loss_kind: LossKind,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::Config(format!("input_dim must be at least 2, got {}", self.input_dim)));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        if self.out_channels == 0 || self.final_kernel % 2 == 0 {
            return Err(Error::Config("final ConvOP needs positive channels and an odd kernel".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(i)?;
        }
        Ok(())
    }

    /// Spatial size after each block; the template enters at 1x1.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut size = 1;
        self.blocks
            .iter()
            .map(|b| {
                size = b.output_size(size);
                size
            })
            .collect()
    }

    pub fn output_size(&self) -> usize {
        *self.spatial_sizes().last().expect("validated spec has blocks")
    }

    /// `(channels, height, width)` after each block, then after the final ConvOP.
    pub fn shape_chain(&self) -> Vec<[usize; 3]> {
        let mut chain: Vec<[usize; 3]> =
            self.blocks.iter().zip(self.spatial_sizes()).map(|(b, s)| [b.out_channels, s, s]).collect();
        let s = self.output_size();
        chain.push([self.out_channels, s, s]);
        chain
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

/// Shared construction rule for the canonical and desk-scale families.
///
/// `channels[d]` is `c'` for block `d`; the first block maps 1x1 to
/// `first_size` with a stride-2, zero-padded de-convolution, and later blocks
/// double the size with `kernel`/stride 2/padding 1.
fn family(
    arch: Arch,
    input_dim: usize,
    channels: &[usize],
    first_kernel: usize,
    kernel: usize,
    convop_channels: usize,
) -> NetworkSpec {
    let kind = arch.block_kind();
    let blocks = channels
        .iter()
        .enumerate()
        .map(|(d, &c)| {
            let convop_count = match kind {
                BlockKind::Plain => 0,
                _ => c / 2 / convop_channels,
            };
            BlockSpec {
                kind,
                out_channels: c,
                dconv_kernel: if d == 0 { first_kernel } else { kernel },
                dconv_stride: 2,
                dconv_pad: if d == 0 { 0 } else { 1 },
                dconv_output_pad: 0,
                convop_channels,
                convop_count,
                convop_kernel: 3,
            }
        })
        .collect();
    NetworkSpec {
        arch,
        input_dim,
        blocks,
        final_kernel: 3,
        out_channels: 3,
        conv_bias: false,
        bn_affine: false,
        loss_kind: LossKind::Pixel,
    }
}

/// Full-size networks: 128-D templates to 3x160x160 images through six
/// blocks of 512, 256, 128, 64, 32 and 16 channels (sizes 5 ... 160).
pub fn canonical_spec(arch: Arch) -> NetworkSpec {
    family(arch, 128, &[512, 256, 128, 64, 32, 16], 5, 4, 8)
}

/// Desk-scale networks: four blocks of 64, 32, 16 and 8 channels producing
/// 3x32x32 images (sizes 4, 8, 16, 32). ConvOPs carry 4 channels so that the
/// narrowest neighborly block still holds one ConvOP.
pub fn desk_spec(arch: Arch, input_dim: usize) -> NetworkSpec {
    let mut spec = family(arch, input_dim, &[64, 32, 16, 8], 4, 4, 4);
    spec.blocks[0].dconv_stride = 1;
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_shape_chain() {
        for arch in Arch::ALL {
            let spec = canonical_spec(arch);
            spec.validate().unwrap();
            assert_eq!(spec.spatial_sizes(), vec![5, 10, 20, 40, 80, 160]);
            assert_eq!(spec.shape_chain().last(), Some(&[3, 160, 160]));
        }
    }

    #[test]
    fn canonical_channel_budgets() {
        let b = canonical_spec(Arch::NbnetB);
        let dconv: Vec<usize> = b.blocks.iter().map(BlockSpec::dconv_channels).collect();
        let p: Vec<usize> = b.blocks.iter().map(|x| x.convop_count).collect();
        assert_eq!(dconv, vec![256, 128, 64, 32, 16, 8]);
        assert_eq!(p, vec![32, 16, 8, 4, 2, 1]);
        assert_eq!(b.blocks[4].convop_input_channels()[..2], [16, 24]);
        assert_eq!(canonical_spec(Arch::NbnetA).blocks[4].convop_input_channels(), vec![16, 8]);
        let d = canonical_spec(Arch::Dcnn);
        assert_eq!((d.blocks[5].dconv_channels(), d.blocks[5].convop_count), (16, 0));
    }

    #[test]
    fn desk_family_is_consistent() {
        for arch in Arch::ALL {
            let spec = desk_spec(arch, 128);
            spec.validate().unwrap();
            assert_eq!(spec.spatial_sizes(), vec![4, 8, 16, 32]);
        }
        assert_eq!(desk_spec(Arch::NbnetB, 128).blocks.iter().map(|b| b.convop_count).collect::<Vec<_>>(), [8, 4, 2, 1]);
    }

    #[test]
    fn rejects_inconsistent_blocks() {
        let mut spec = canonical_spec(Arch::NbnetB);
        spec.blocks[2].out_channels = 127;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = canonical_spec(Arch::NbnetA);
        spec.blocks[0].convop_count = 31;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = desk_spec(Arch::NbnetA, 64);
        let text = spec.to_json();
        assert!(text.contains("\"nb_a\""));
        assert_eq!(NetworkSpec::from_json(&text).unwrap(), spec);
    }
}
