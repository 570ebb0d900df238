//! Single-head attention blocks.
//!
//! Every block has the same shape: linear Q/K/V projections, row softmax of
//! `Q·Kᵀ` (optionally scaled by `1/√C`), value aggregation plus a residual,
//! then a ReLU feed-forward layer with its own residual. Tensors live under
//! `{prefix}.q`, `{prefix}.k`, `{prefix}.v`, `{prefix}.ff1`, `{prefix}.ff2`.

use super::matrix::FeatureMatrix;
use super::ops::{linear, softmax_rows};
use super::weights::{TensorSpec, WeightStore};
use crate::error::{Error, Result};

/// Tensors for a block whose queries come from `q_dim`-wide tokens and
/// keys/values from `kv_dim`-wide tokens. The residual path requires
/// `q_dim == width`.
pub fn attention_specs(prefix: &str, q_dim: usize, kv_dim: usize, width: usize) -> Vec<TensorSpec> {
    assert_eq!(q_dim, width, "residual path needs query width == block width");
    let mut v = Vec::new();
    v.extend(TensorSpec::linear(&format!("{prefix}.q"), q_dim, width));
    v.extend(TensorSpec::linear(&format!("{prefix}.k"), kv_dim, width));
    v.extend(TensorSpec::linear(&format!("{prefix}.v"), kv_dim, width));
    v.extend(TensorSpec::linear(&format!("{prefix}.ff1"), width, width));
    v.extend(TensorSpec::linear(&format!("{prefix}.ff2"), width, width));
    v
}

/// Token inputs of one attention block. `q_add`/`k_add` are added after the
/// projection (the incompleteness term), `residual` is added to the
/// aggregated values.
pub(crate) struct AttentionInputs<'a> {
    pub q_in: &'a FeatureMatrix,
    pub k_in: &'a FeatureMatrix,
    pub v_in: &'a FeatureMatrix,
    pub residual: &'a FeatureMatrix,
    pub q_add: Option<&'a FeatureMatrix>,
    pub k_add: Option<&'a FeatureMatrix>,
}

/// Returns the block output and the `N_q × N_kv` attention map.
pub(crate) fn attend(
    inputs: AttentionInputs<'_>,
    prefix: &str,
    w: &WeightStore,
    scaled: bool,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let mut q = linear(inputs.q_in, &format!("{prefix}.q"), w)?;
    if let Some(a) = inputs.q_add {
        q = q.add(a)?;
    }
    let mut k = linear(inputs.k_in, &format!("{prefix}.k"), w)?;
    if let Some(a) = inputs.k_add {
        k = k.add(a)?;
    }
    let v = linear(inputs.v_in, &format!("{prefix}.v"), w)?;
    let mut scores = q.matmul_t(&k)?;
    if scaled {
        scores = scores.scale(1.0 / (q.cols() as f64).sqrt());
    }
    let attn = softmax_rows(&scores);
    let h = attn.matmul(&v)?.add(inputs.residual)?;
    let ff = linear(
        &linear(&h, &format!("{prefix}.ff1"), w)?.relu(),
        &format!("{prefix}.ff2"),
        w,
    )?;
    Ok((h.add(&ff)?, attn))
}

pub fn self_attention(x: &FeatureMatrix, prefix: &str, w: &WeightStore, scaled: bool) -> Result<FeatureMatrix> {
    let inputs = AttentionInputs {
        q_in: x,
        k_in: x,
        v_in: x,
        residual: x,
        q_add: None,
        k_add: None,
    };
    Ok(attend(inputs, prefix, w, scaled)?.0)
}

/// Queries from `q_src`, keys and values from `kv_src`; the residual adds
/// `q_src`. Also returns the attention map.
pub fn cross_attention(
    q_src: &FeatureMatrix,
    kv_src: &FeatureMatrix,
    prefix: &str,
    w: &WeightStore,
    scaled: bool,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let inputs = AttentionInputs {
        q_in: q_src,
        k_in: kv_src,
        v_in: kv_src,
        residual: q_src,
        q_add: None,
        k_add: None,
    };
    attend(inputs, prefix, w, scaled)
}

/// Incompleteness-aware self-attention: weights are
/// `softmax_j((f_i W_Q + h_i)(f_j W_K + h_j)ᵀ)` over `f_j W_V`.
pub fn ia_self_attention(
    f: &FeatureMatrix,
    h: &FeatureMatrix,
    prefix: &str,
    w: &WeightStore,
    scaled: bool,
) -> Result<FeatureMatrix> {
    if f.shape() != h.shape() {
        return Err(Error::invalid(format!(
            "feature shape {:?} and incompleteness shape {:?} differ",
            f.shape(),
            h.shape()
        )));
    }
    let inputs = AttentionInputs {
        q_in: f,
        k_in: f,
        v_in: f,
        residual: f,
        q_add: Some(h),
        k_add: Some(h),
    };
    Ok(attend(inputs, prefix, w, scaled)?.0)
}
