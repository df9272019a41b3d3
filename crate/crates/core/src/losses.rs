//! Training objectives: triplet losses within and across modalities, the
//! joint-embedding loss and their weighted combination.
//!
//! Every loss exists twice: a plain numeric version over [`EmbeddingVector`]s
//! and a graph version over `[1, K]` nodes used for training. Both reduce by
//! summing over the batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{smooth_l1, Graph, Var, NORM_EPS};
use crate::encoders::{EmbeddingVector, Modality};
use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistanceKind {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "smooth_l1")]
    SmoothL1,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 4] = [
        DistanceKind::L2,
        DistanceKind::Mse,
        DistanceKind::Cosine,
        DistanceKind::SmoothL1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::L2 => "l2",
            DistanceKind::Mse => "mse",
            DistanceKind::Cosine => "cosine",
            DistanceKind::SmoothL1 => "smooth_l1",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        DistanceKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown distance `{s}` (expected l2, mse, cosine or smooth_l1)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Same-modality triplet term.
    pub sm: f64,
    /// Cross-modality triplet term.
    pub cm: f64,
    /// Joint-embedding term.
    pub je: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sm: 0.1,
            cm: 1.0,
            je: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(sm: f64, cm: f64, je: f64) -> Result<Self> {
        let w = Self { sm, cm, je };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.sm, self.cm, self.je]
            .iter()
            .all(|l| l.is_finite() && *l >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "loss weights must be finite and non-negative, got {self:?}"
            )))
        }
    }

    pub fn combine(&self, sm: f64, cm: f64, je: f64) -> f64 {
        self.sm * sm + self.cm * cm + self.je * je
    }
}

/// Named loss configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossPreset {
    /// Combined training without the joint-embedding term.
    #[serde(rename = "sm+cm")]
    SmCm,
    /// Full combined loss.
    #[serde(rename = "sm+cm+je")]
    SmCmJe,
    /// Triplet teacher followed by a joint-embedding student.
    #[serde(rename = "teacher-student")]
    TeacherStudent,
}

impl LossPreset {
    pub fn name(self) -> &'static str {
        match self {
            LossPreset::SmCm => "sm+cm",
            LossPreset::SmCmJe => "sm+cm+je",
            LossPreset::TeacherStudent => "teacher-student",
        }
    }

    /// Weights of the combined loss; `None` for the two-stage preset.
    pub fn weights(self) -> Option<LossWeights> {
        match self {
            LossPreset::SmCm => Some(LossWeights {
                je: 0.0,
                ..Default::default()
            }),
            LossPreset::SmCmJe => Some(LossWeights::default()),
            LossPreset::TeacherStudent => None,
        }
    }
}

impl fmt::Display for LossPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            LossPreset::SmCm,
            LossPreset::SmCmJe,
            LossPreset::TeacherStudent,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown loss preset `{s}`")))
    }
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "margin must be positive, got {margin}"
        )))
    }
}

pub fn distance_slices(kind: DistanceKind, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "distance",
            format!("lengths {} and {}", u.len(), v.len()),
        ));
    }
    let diff = u.iter().zip(v).map(|(a, b)| a - b);
    Ok(match kind {
        DistanceKind::L2 => diff.map(|t| t * t).sum::<f64>().sqrt(),
        DistanceKind::Mse => {
            if u.is_empty() {
                0.0
            } else {
                diff.map(|t| t * t).sum::<f64>() / u.len() as f64
            }
        }
        DistanceKind::SmoothL1 => diff.map(smooth_l1).sum(),
        DistanceKind::Cosine => {
            // same guard as the graph route: normalize each side, zero
            // vectors stay zero
            let unit = |w: &[f64]| {
                let n = w.iter().map(|t| t * t).sum::<f64>().sqrt();
                let s = if n > NORM_EPS { 1.0 / n } else { 0.0 };
                w.iter().map(|t| t * s).collect::<Vec<_>>()
            };
            let (a, b) = (unit(u), unit(v));
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            (1.0 - dot).max(0.0)
        }
    })
}

pub fn distance(kind: DistanceKind, u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    distance_slices(kind, &u.values, &v.values)
}

/// One triplet; the modality of each slot is carried by its vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: EmbeddingVector,
    pub positive: EmbeddingVector,
    pub negative: EmbeddingVector,
}

impl Triplet {
    pub fn new(
        anchor: EmbeddingVector,
        positive: EmbeddingVector,
        negative: EmbeddingVector,
    ) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }

    /// `(anchor modality, positive/negative modality)` when consistent.
    pub fn modalities(&self) -> Option<(Modality, Modality)> {
        (self.positive.modality == self.negative.modality)
            .then_some((self.anchor.modality, self.positive.modality))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    pub fn new(triplets: Vec<Triplet>) -> Self {
        Self { triplets }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// `sum_i max(0, d(a, p) - d(a, n) + m)`.
pub fn triplet_loss(batch: &TripletBatch, kind: DistanceKind, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    if batch.is_empty() {
        return Err(Error::Empty("triplet batch"));
    }
    let mut total = 0.0;
    for t in &batch.triplets {
        let dp = distance(kind, &t.anchor, &t.positive)?;
        let dn = distance(kind, &t.anchor, &t.negative)?;
        total += (dp - dn + margin).max(0.0);
    }
    Ok(total)
}

/// `sum_i d(f(I_i), g(m_i))`.
pub fn joint_embedding_loss(
    pairs: &[(EmbeddingVector, EmbeddingVector)],
    kind: DistanceKind,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("joint-embedding pairs"));
    }
    pairs.iter().map(|(a, b)| distance(kind, a, b)).sum()
}

pub fn same_modality_loss(
    batch_2d: &TripletBatch,
    batch_3d: &TripletBatch,
    kind: DistanceKind,
    margin: f64,
) -> Result<f64> {
    Ok(triplet_loss(batch_2d, kind, margin)? + triplet_loss(batch_3d, kind, margin)?)
}

pub fn cross_modality_loss(
    batch_2d3d: &TripletBatch,
    batch_3d2d: &TripletBatch,
    kind: DistanceKind,
    margin: f64,
) -> Result<f64> {
    Ok(triplet_loss(batch_2d3d, kind, margin)? + triplet_loss(batch_3d2d, kind, margin)?)
}

/// All inputs of the combined loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBatches {
    pub same_2d: TripletBatch,
    pub same_3d: TripletBatch,
    pub cross_2d3d: TripletBatch,
    pub cross_3d2d: TripletBatch,
    pub pairs: Vec<(EmbeddingVector, EmbeddingVector)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sm: f64,
    pub cm: f64,
    pub je: f64,
    pub total: f64,
}

pub fn loss_breakdown(
    batches: &LossBatches,
    weights: &LossWeights,
    kind: DistanceKind,
    margin: f64,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let sm = same_modality_loss(&batches.same_2d, &batches.same_3d, kind, margin)?;
    let cm = cross_modality_loss(&batches.cross_2d3d, &batches.cross_3d2d, kind, margin)?;
    let je = joint_embedding_loss(&batches.pairs, kind)?;
    Ok(LossBreakdown {
        sm,
        cm,
        je,
        total: weights.combine(sm, cm, je),
    })
}

/// `l1 * L_SM + l2 * L_CM + l3 * L_JE`.
pub fn combined_loss(
    batches: &LossBatches,
    weights: &LossWeights,
    kind: DistanceKind,
    margin: f64,
) -> Result<f64> {
    Ok(loss_breakdown(batches, weights, kind, margin)?.total)
}

/// Distance between two `[1, K]` nodes as a scalar node.
pub fn distance_graph(g: &mut Graph, kind: DistanceKind, u: Var, v: Var) -> Result<Var> {
    Ok(match kind {
        DistanceKind::L2 => {
            let d = g.sub(u, v)?;
            g.norm(d)
        }
        DistanceKind::Mse => {
            let d = g.sub(u, v)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        }
        DistanceKind::SmoothL1 => {
            let d = g.sub(u, v)?;
            let s = g.smooth_l1(d);
            g.sum(s)
        }
        DistanceKind::Cosine => {
            let (a, b) = (g.l2_normalize_rows(u), g.l2_normalize_rows(v));
            let p = g.mul(a, b)?;
            let dot = g.sum(p);
            let neg = g.scale(dot, -1.0);
            g.add_scalar(neg, 1.0)
        }
    })
}

/// Triplets as index triples into `anchors` and `others`.
pub fn triplet_loss_graph(
    g: &mut Graph,
    anchors: &[Var],
    others: &[Var],
    triplets: &[(usize, usize, usize)],
    kind: DistanceKind,
    margin: f64,
) -> Result<Var> {
    check_margin(margin)?;
    if triplets.is_empty() {
        return Err(Error::Empty("triplet batch"));
    }
    let mut total: Option<Var> = None;
    for &(a, p, n) in triplets {
        let (va, vp, vn) = (anchors[a], others[p], others[n]);
        let dp = distance_graph(g, kind, va, vp)?;
        let dn = distance_graph(g, kind, va, vn)?;
        let diff = g.sub(dp, dn)?;
        let shifted = g.add_scalar(diff, margin);
        let h = g.hinge(shifted);
        total = Some(match total {
            Some(t) => g.add(t, h)?,
            None => h,
        });
    }
    Ok(total.expect("non-empty"))
}

pub fn joint_embedding_loss_graph(
    g: &mut Graph,
    images: &[Var],
    clouds: &[Var],
    kind: DistanceKind,
) -> Result<Var> {
    if images.is_empty() || images.len() != clouds.len() {
        return Err(Error::invalid(format!(
            "joint embedding needs equal, non-empty pair lists (got {} and {})",
            images.len(),
            clouds.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&a, &b) in images.iter().zip(clouds) {
        let d = distance_graph(g, kind, a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Graph nodes of the three loss components for one training batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub sm: Var,
    pub cm: Var,
    pub je: Var,
    pub total: Var,
}

/// Builds every component from per-sample image and cloud embeddings.
///
/// `images[i]` and `clouds[i]` come from the same sample; each triplet
/// `(a, p, n)` indexes samples, and is applied in all four modality
/// combinations.
pub fn combined_loss_graph(
    g: &mut Graph,
    images: &[Var],
    clouds: &[Var],
    triplets: &[(usize, usize, usize)],
    weights: &LossWeights,
    kind: DistanceKind,
    margin: f64,
) -> Result<LossVars> {
    weights.validate()?;
    let s2 = triplet_loss_graph(g, images, images, triplets, kind, margin)?;
    let s3 = triplet_loss_graph(g, clouds, clouds, triplets, kind, margin)?;
    let sm = g.add(s2, s3)?;
    let c23 = triplet_loss_graph(g, images, clouds, triplets, kind, margin)?;
    let c32 = triplet_loss_graph(g, clouds, images, triplets, kind, margin)?;
    let cm = g.add(c23, c32)?;
    let je = joint_embedding_loss_graph(g, images, clouds, kind)?;
    let a = g.scale(sm, weights.sm);
    let b = g.scale(cm, weights.cm);
    let c = g.scale(je, weights.je);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars { sm, cm, je, total })
}

/// Numeric counterpart of [`combined_loss_graph`]'s batch layout.
pub fn batches_from_samples(
    images: &[EmbeddingVector],
    clouds: &[EmbeddingVector],
    triplets: &[(usize, usize, usize)],
) -> LossBatches {
    let make = |a: &[EmbeddingVector], o: &[EmbeddingVector]| {
        TripletBatch::new(
            triplets
                .iter()
                .map(|&(i, p, n)| Triplet::new(a[i].clone(), o[p].clone(), o[n].clone()))
                .collect(),
        )
    };
    LossBatches {
        same_2d: make(images, images),
        same_3d: make(clouds, clouds),
        cross_2d3d: make(images, clouds),
        cross_3d2d: make(clouds, images),
        pairs: images.iter().cloned().zip(clouds.iter().cloned()).collect(),
    }
}
