use super::config::{EncoderConfig, HeadKind};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// NetVLAD aggregation of `[M, D]` local features into a unit `[1, Kc * D]`
/// descriptor.
///
/// Soft assignment `a_k(x_i) = softmax_k(w_k . x_i + b_k)`, residual sums
/// `V_k = sum_i a_k(x_i) (x_i - c_k)`, per-cluster L2 normalization, then a
/// global L2 normalization of the flattened result.
pub fn netvlad(g: &mut Graph, prefix: &str, feats: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}vlad.assign_w"))?;
    let b = g.param(&format!("{prefix}vlad.assign_b"))?;
    let centers = g.param(&format!("{prefix}vlad.centers"))?;
    let d = g.value(feats).cols();
    if g.value(w).cols() != d {
        return Err(Error::shape(
            "netvlad",
            format!("features have dim {d}, head expects {}", g.value(w).cols()),
        ));
    }
    let k = g.value(w).rows();

    let wt = g.transpose(w);
    let logits = g.matmul(feats, wt)?;
    let logits = g.add_row(logits, b)?;
    let assign = g.softmax_rows(logits);

    let at = g.transpose(assign);
    let weighted = g.matmul(at, feats)?;
    let mass = g.col_sum(assign);
    let shifted = g.scale_rows(centers, mass)?;
    let residual = g.sub(weighted, shifted)?;

    let intra = g.l2_normalize_rows(residual);
    let flat = g.reshape(intra, vec![1, k * d])?;
    Ok(g.l2_normalize_rows(flat))
}

/// Max-pool over locations, then a two-layer MLP and L2 normalization.
pub fn mlp_head(g: &mut Graph, prefix: &str, feats: Var) -> Result<Var> {
    let pooled = g.max_rows(feats);
    let w0 = g.param(&format!("{prefix}mlp.w0"))?;
    let b0 = g.param(&format!("{prefix}mlp.b0"))?;
    let w1 = g.param(&format!("{prefix}mlp.w1"))?;
    let b1 = g.param(&format!("{prefix}mlp.b1"))?;
    let h = g.matmul(pooled, w0)?;
    let h = g.add_row(h, b0)?;
    let h = g.relu(h);
    let o = g.matmul(h, w1)?;
    let o = g.add_row(o, b1)?;
    Ok(g.l2_normalize_rows(o))
}

pub fn aggregate(g: &mut Graph, prefix: &str, feats: Var, kind: HeadKind) -> Result<Var> {
    match kind {
        HeadKind::Netvlad => netvlad(g, prefix, feats),
        HeadKind::Mlp => mlp_head(g, prefix, feats),
    }
}

/// Standalone NetVLAD parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetVladHead {
    /// `[Kc, D]`
    pub assign_w: Tensor,
    /// `[1, Kc]`
    pub assign_b: Tensor,
    /// `[Kc, D]`
    pub centers: Tensor,
}

impl NetVladHead {
    pub fn new(assign_w: Tensor, assign_b: Tensor, centers: Tensor) -> Result<Self> {
        let (k, d) = (assign_w.rows(), assign_w.cols());
        if assign_b.len() != k || centers.rows() != k || centers.cols() != d {
            return Err(Error::shape(
                "netvlad head",
                format!(
                    "assign_w {:?}, assign_b {:?}, centers {:?}",
                    assign_w.shape(),
                    assign_b.shape(),
                    centers.shape()
                ),
            ));
        }
        let assign_b = assign_b.reshape(vec![1, k])?;
        Ok(Self {
            assign_w,
            assign_b,
            centers,
        })
    }

    pub fn clusters(&self) -> usize {
        self.assign_w.rows()
    }

    pub fn dim(&self) -> usize {
        self.assign_w.cols()
    }

    pub fn from_params(params: &ParamStore, prefix: &str) -> Result<Self> {
        Self::new(
            params.require(&format!("{prefix}vlad.assign_w"))?.clone(),
            params.require(&format!("{prefix}vlad.assign_b"))?.clone(),
            params.require(&format!("{prefix}vlad.centers"))?.clone(),
        )
    }

    pub fn to_params(&self, prefix: &str) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(format!("{prefix}vlad.assign_w"), self.assign_w.clone());
        p.insert(format!("{prefix}vlad.assign_b"), self.assign_b.clone());
        p.insert(format!("{prefix}vlad.centers"), self.centers.clone());
        p
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    StandardNormal,
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Name, shape and initializer of every head parameter.
pub(crate) fn head_param_specs(
    cfg: &EncoderConfig,
    kind: HeadKind,
) -> Vec<(String, Vec<usize>, Init)> {
    let (d, k, h) = (cfg.dim, cfg.clusters, cfg.mlp_hidden);
    match kind {
        HeadKind::Netvlad => vec![
            ("vlad.assign_w".into(), vec![k, d], Init::FanIn(d)),
            ("vlad.assign_b".into(), vec![1, k], Init::Zeros),
            ("vlad.centers".into(), vec![k, d], Init::StandardNormal),
        ],
        HeadKind::Mlp => vec![
            ("mlp.w0".into(), vec![d, h], Init::FanIn(d)),
            ("mlp.b0".into(), vec![1, h], Init::Zeros),
            ("mlp.w1".into(), vec![h, cfg.mlp_out], Init::FanIn(h)),
            ("mlp.b1".into(), vec![1, cfg.mlp_out], Init::Zeros),
        ],
    }
}
