//! The two mapping functions into the shared embedding space: `f` for
//! images and `g` for point clouds. Each is a small feature extractor
//! followed by an aggregation head (NetVLAD or max-pool + MLP).
//!
//! Parameters of `f` live under the `f.` prefix, those of `g` under `g.`.

mod checkpoint;
mod config;
mod extract;
mod heads;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{ConvSpec, EncoderConfig, HeadKind, Modality};
pub use extract::{cloud_features, cloud_features_at, image_features, sample_point_indices};
pub use heads::{aggregate, mlp_head, netvlad, NetVladHead};

use heads::{head_param_specs, Init};

use crate::datamodel::{Image, PointCloud, Sample};
use crate::diffcore::{forward, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// `D x M` local descriptors (column `j` is location `j`).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureMap {
    pub values: Tensor,
}

impl LocalFeatureMap {
    /// From `[M, D]` rows of descriptors.
    pub fn from_rows(rows: Tensor) -> Self {
        Self {
            values: rows.transposed(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    pub fn count(&self) -> usize {
        self.values.cols()
    }

    /// `[M, D]`, the layout the heads consume.
    pub fn rows(&self) -> Tensor {
        self.values.transposed()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.values.get(i, j)).collect()
    }
}

/// A point of the shared embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub modality: Modality,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, modality: Modality) -> Self {
        Self { values, modality }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn extractor_param_specs(cfg: &EncoderConfig, m: Modality) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    match m {
        Modality::Image => {
            let mut c_in = 3;
            for (i, c) in cfg.conv.iter().enumerate() {
                let fan = c.kernel * c.kernel * c_in;
                out.push((
                    format!("conv{i}.w"),
                    vec![fan, c.out_channels],
                    Init::FanIn(fan),
                ));
                out.push((format!("conv{i}.b"), vec![1, c.out_channels], Init::Zeros));
                c_in = c.out_channels;
            }
        }
        Modality::Cloud => {
            let mut widths = vec![3];
            widths.extend(&cfg.point_mlp);
            widths.push(cfg.dim);
            for (i, w) in widths.windows(2).enumerate() {
                out.push((format!("pt{i}.w"), vec![w[0], w[1]], Init::FanIn(w[0])));
                out.push((format!("pt{i}.b"), vec![1, w[1]], Init::Zeros));
            }
        }
    }
    out
}

/// Fresh parameters for both encoders.
///
/// Weights are uniform in `+-1/sqrt(fan_in)`, biases zero, NetVLAD cluster
/// centers standard normal.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for m in Modality::ALL {
        let mut specs = extractor_param_specs(cfg, m);
        specs.extend(head_param_specs(cfg, cfg.head(m)));
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::StandardNormal => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    let u = Uniform::new(-bound, bound).expect("valid bound");
                    (0..n).map(|_| u.sample(&mut rng)).collect()
                }
            };
            params.insert(format!("{}{name}", m.prefix()), Tensor::new(shape, data)?);
        }
    }
    Ok(params)
}

/// `f(image)` as a graph node `[1, K]`.
pub fn embed_image_graph(g: &mut Graph, img: &Image, cfg: &EncoderConfig) -> Result<Var> {
    let p = Modality::Image.prefix();
    let feats = image_features(g, p, img, cfg)?;
    aggregate(g, p, feats, cfg.image_head)
}

/// `g(cloud)` as a graph node `[1, K]`, resampling points with `rng`.
pub fn embed_cloud_graph<R: rand::Rng + ?Sized>(
    g: &mut Graph,
    pc: &PointCloud,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<Var> {
    let p = Modality::Cloud.prefix();
    let feats = cloud_features(g, p, pc, cfg, rng)?;
    aggregate(g, p, feats, cfg.cloud_head)
}

/// Inference-time cloud embedding graph; resampling uses `cfg.sample_seed`.
pub fn embed_cloud_graph_fixed(g: &mut Graph, pc: &PointCloud, cfg: &EncoderConfig) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    embed_cloud_graph(g, pc, cfg, &mut rng)
}

pub fn extract_image_features(
    img: &Image,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<LocalFeatureMap> {
    let rows = forward(params, |g| {
        image_features(g, Modality::Image.prefix(), img, cfg)
    })?;
    Ok(LocalFeatureMap::from_rows(rows))
}

pub fn extract_cloud_features(
    pc: &PointCloud,
    params: &ParamStore,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<LocalFeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = forward(params, |g| {
        cloud_features(g, Modality::Cloud.prefix(), pc, cfg, &mut rng)
    })?;
    Ok(LocalFeatureMap::from_rows(rows))
}

pub fn netvlad_aggregate(
    features: &LocalFeatureMap,
    head: &NetVladHead,
    modality: Modality,
) -> Result<EmbeddingVector> {
    if features.dim() != head.dim() {
        return Err(Error::shape(
            "netvlad",
            format!(
                "features have dim {}, head expects {}",
                features.dim(),
                head.dim()
            ),
        ));
    }
    let params = head.to_params("");
    let out = forward(&params, |g| {
        let x = g.input(features.rows());
        netvlad(g, "", x)
    })?;
    Ok(EmbeddingVector::new(out.into_data(), modality))
}

/// Max-pool + MLP head with parameters under `prefix` (`f.` or `g.`).
pub fn mlp_aggregate(
    features: &LocalFeatureMap,
    params: &ParamStore,
    prefix: &str,
    modality: Modality,
) -> Result<EmbeddingVector> {
    let out = forward(params, |g| {
        let x = g.input(features.rows());
        mlp_head(g, prefix, x)
    })?;
    Ok(EmbeddingVector::new(out.into_data(), modality))
}

pub fn embed_image(
    img: &Image,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<EmbeddingVector> {
    let out = forward(params, |g| embed_image_graph(g, img, cfg))?;
    Ok(EmbeddingVector::new(out.into_data(), Modality::Image))
}

pub fn embed_cloud(
    pc: &PointCloud,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<EmbeddingVector> {
    let out = forward(params, |g| embed_cloud_graph_fixed(g, pc, cfg))?;
    Ok(EmbeddingVector::new(out.into_data(), Modality::Cloud))
}

/// Embeds the requested medium of a sample.
pub fn embed_sample(
    sample: &Sample,
    modality: Modality,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<EmbeddingVector> {
    match modality {
        Modality::Image => embed_image(sample.image()?, params, cfg),
        Modality::Cloud => embed_cloud(sample.submap()?, params, cfg),
    }
}
