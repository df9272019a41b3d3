use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "2D")]
    Image,
    #[serde(rename = "3D")]
    Cloud,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Cloud];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Image => "2D",
            Modality::Cloud => "3D",
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Cloud => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Modality::Image),
            1 => Some(Modality::Cloud),
            _ => None,
        }
    }

    /// Parameter-name prefix of this modality's encoder.
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Image => "f.",
            Modality::Cloud => "g.",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" | "image" => Ok(Modality::Image),
            "3d" | "cloud" => Ok(Modality::Cloud),
            _ => Err(Error::invalid(format!(
                "unknown modality `{s}` (expected 2D or 3D)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Netvlad,
    Mlp,
}

/// One strided convolution of the image extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Extractor input size; larger working-size images are area-downscaled.
    pub input_width: usize,
    pub input_height: usize,
    pub conv: Vec<ConvSpec>,
    /// Hidden widths of the shared per-point MLP; its output width is `dim`.
    pub point_mlp: Vec<usize>,
    /// Cloud coordinates are divided by this before the point MLP.
    pub point_scale: f64,
    /// Local feature dimension D.
    pub dim: usize,
    /// NetVLAD cluster count.
    pub clusters: usize,
    pub image_head: HeadKind,
    pub cloud_head: HeadKind,
    pub mlp_hidden: usize,
    /// Output length of an MLP head.
    pub mlp_out: usize,
    /// Points per cloud fed to the extractor.
    pub n_pts: usize,
    /// Seed of the point resampling used at inference time.
    pub sample_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_width: 64,
            input_height: 48,
            conv: vec![
                ConvSpec {
                    out_channels: 8,
                    kernel: 4,
                    stride: 4,
                    padding: 0,
                },
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
            point_mlp: vec![32],
            point_scale: 25.0,
            dim: 16,
            clusters: 8,
            image_head: HeadKind::Netvlad,
            cloud_head: HeadKind::Netvlad,
            mlp_hidden: 64,
            mlp_out: 128,
            n_pts: 256,
            sample_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Setup used on synthbench worlds: MLP heads on both sides. NetVLAD
    /// residuals against standard-normal centers start out nearly constant
    /// on these tiny extractors, which the cross-modal terms rarely escape.
    pub fn synthbench() -> Self {
        Self {
            image_head: HeadKind::Mlp,
            cloud_head: HeadKind::Mlp,
            ..Self::default()
        }
    }

    pub fn head(&self, m: Modality) -> HeadKind {
        match m {
            Modality::Image => self.image_head,
            Modality::Cloud => self.cloud_head,
        }
    }

    /// Embedding length produced for modality `m`.
    pub fn ev_len(&self, m: Modality) -> usize {
        match self.head(m) {
            HeadKind::Netvlad => self.clusters * self.dim,
            HeadKind::Mlp => self.mlp_out,
        }
    }

    /// The shared embedding length K.
    pub fn k(&self) -> usize {
        self.ev_len(Modality::Image)
    }

    /// `(height, width)` of every conv output, starting with the input.
    pub fn conv_sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![(self.input_height, self.input_width)];
        for c in &self.conv {
            let (h, w) = *sizes.last().expect("non-empty");
            let oh = (h + 2 * c.padding).saturating_sub(c.kernel) / c.stride.max(1) + 1;
            let ow = (w + 2 * c.padding).saturating_sub(c.kernel) / c.stride.max(1) + 1;
            sizes.push((oh, ow));
        }
        sizes
    }

    /// Number of local image features M.
    pub fn image_cells(&self) -> usize {
        let (h, w) = *self.conv_sizes().last().expect("non-empty");
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.clusters == 0 || self.n_pts == 0 {
            return Err(Error::invalid("dim, clusters and n_pts must be >= 1"));
        }
        if self.conv.is_empty() {
            return Err(Error::invalid(
                "image extractor needs at least one conv layer",
            ));
        }
        for (i, c) in self.conv.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 || c.padding >= c.kernel {
                return Err(Error::invalid(format!(
                    "conv layer {i} is degenerate: {c:?}"
                )));
            }
        }
        if self.conv.last().expect("non-empty").out_channels != self.dim {
            return Err(Error::invalid(format!(
                "last conv layer must output dim = {} channels",
                self.dim
            )));
        }
        let sizes = self.conv_sizes();
        for (i, c) in self.conv.iter().enumerate() {
            let (h, w) = sizes[i];
            if h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel {
                return Err(Error::invalid(format!(
                    "conv layer {i} kernel exceeds its input"
                )));
            }
        }
        if self.point_mlp.contains(&0) || !(self.point_scale > 0.0) {
            return Err(Error::invalid(
                "point MLP widths and scale must be positive",
            ));
        }
        if self.mlp_hidden == 0 || self.mlp_out == 0 {
            return Err(Error::invalid("MLP head sizes must be positive"));
        }
        let (ki, kc) = (self.ev_len(Modality::Image), self.ev_len(Modality::Cloud));
        if ki != kc {
            return Err(Error::invalid(format!(
                "embedding lengths differ across modalities: image {ki}, cloud {kc}"
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; ties checkpoints to configs.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }
}
