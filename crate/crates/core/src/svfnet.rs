//! Global stage: point and depth-view encoders, the two-stage view fusion,
//! and the coarse decoder.
//!
//! Tensor layout (all under `svf.`):
//!
//! | prefix | role |
//! |---|---|
//! | `pt.sa1.{0,1}`, `pt.sa2.0`, `pt.sa3.0` | set-abstraction MLPs |
//! | `cnn.{0..4}` | per-view convolution encoder |
//! | `s1.cond`, `s1.attn` | within-view fusion |
//! | `s2.cond`, `s2.vp`, `s2.attn` | across-view fusion |
//! | `global` | projection-free descriptor (ablation) |
//! | `dec.expand`, `dec.attn`, `dec.out` | coarse decoder |

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{fps, knn, merge_resample, IndexSet, PointCloud, Viewpoint};
use crate::nn::attention::{attend, attention_specs, AttentionInputs};
use crate::nn::ops::{conv_encoder_specs, conv_transpose1d_specs};
use crate::nn::{
    conv2d_encoder, conv_transpose1d, linear, self_attention, FeatureMatrix, ImageStack, TensorSpec, WeightStore,
};
use crate::profile::{Profile, POINT_FEATURE_DIM, SA_K};
use crate::projection::{axis_viewpoints, project_depth, DepthMap};

const SA1_DIMS: [usize; 3] = [3, 64, 128];
const SA2_DIMS: [usize; 2] = [128 + 3, 256];
const SA3_DIMS: [usize; 2] = [2 * 256, POINT_FEATURE_DIM];

pub fn tensor_specs(p: &Profile) -> Vec<TensorSpec> {
    let c = p.channels;
    let mut v = Vec::new();
    for (prefix, dims) in [
        ("svf.pt.sa1", &SA1_DIMS[..]),
        ("svf.pt.sa2", &SA2_DIMS[..]),
        ("svf.pt.sa3", &SA3_DIMS[..]),
    ] {
        for (i, w) in dims.windows(2).enumerate() {
            v.extend(TensorSpec::linear(&format!("{prefix}.{i}"), w[0], w[1]));
        }
    }
    v.extend(conv_encoder_specs("svf.cnn", c));
    v.extend(TensorSpec::linear("svf.s1.cond", POINT_FEATURE_DIM, c));
    v.extend(attention_specs("svf.s1.attn", c, c, c));
    v.extend(TensorSpec::linear("svf.s2.cond", POINT_FEATURE_DIM, c));
    v.extend(TensorSpec::linear("svf.s2.vp", 3, c));
    v.extend(attention_specs("svf.s2.attn", c, c, c));
    v.extend(TensorSpec::linear("svf.global", POINT_FEATURE_DIM, c));
    v.extend(conv_transpose1d_specs("svf.dec.expand", c, p.coarse_dim, p.n0));
    v.extend(attention_specs(
        "svf.dec.attn",
        p.coarse_dim,
        p.coarse_dim,
        p.coarse_dim,
    ));
    v.extend(TensorSpec::linear("svf.dec.out", p.coarse_dim, 3));
    v
}

/// Linear layers `{prefix}.0 .. {prefix}.{n-1}`, each followed by ReLU.
fn shared_mlp(x: &FeatureMatrix, prefix: &str, layers: usize, w: &WeightStore) -> Result<FeatureMatrix> {
    let mut h = linear(x, &format!("{prefix}.0"), w)?.relu();
    for i in 1..layers {
        h = linear(&h, &format!("{prefix}.{i}"), w)?.relu();
    }
    Ok(h)
}

/// Column max over consecutive blocks of `k` rows.
pub(crate) fn group_max(x: &FeatureMatrix, k: usize) -> FeatureMatrix {
    let c = x.cols();
    let groups = x.rows() / k;
    let mut out = vec![f64::NEG_INFINITY; groups * c];
    out.par_chunks_mut(c).enumerate().for_each(|(g, row)| {
        for r in g * k..(g + 1) * k {
            for (o, &v) in row.iter_mut().zip(x.row(r)) {
                if v > *o {
                    *o = v;
                }
            }
        }
    });
    FeatureMatrix::from_raw(groups, c, out)
}

/// Input order sorted lexicographically by coordinates, so FPS (seeded at
/// index 0) and everything after it do not depend on the storage order.
fn canonical_order(cloud: &PointCloud) -> PointCloud {
    let pts = cloud.points();
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        pts[a]
            .iter()
            .zip(&pts[b])
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    cloud.select(&IndexSet::from_vec(idx))
}

/// One set-abstraction stage: FPS centers, kNN groups from `reference`,
/// shared MLP over `[relative xyz ‖ features]`, max over each group.
fn set_abstraction(
    reference: &PointCloud,
    features: Option<&FeatureMatrix>,
    n_centers: usize,
    prefix: &str,
    layers: usize,
    w: &WeightStore,
) -> Result<(PointCloud, FeatureMatrix)> {
    let centers = reference.select(&fps(reference, n_centers)?);
    let k = SA_K.min(reference.len());
    let groups = knn(&centers, reference, k)?;
    let fdim = features.map_or(0, |f| f.cols());
    let width = 3 + fdim;
    let mut data = Vec::with_capacity(n_centers * k * width);
    for (c, g) in centers.points().iter().zip(&groups) {
        for &j in g.iter() {
            let p = reference.points()[j];
            data.extend((0..3).map(|a| p[a] - c[a]));
            if let Some(f) = features {
                data.extend_from_slice(f.row(j));
            }
        }
    }
    let grouped = FeatureMatrix::from_raw(n_centers * k, width, data);
    let h = shared_mlp(&grouped, prefix, layers, w)?;
    Ok((centers, group_max(&h, k)))
}

/// Point-branch global feature `F_P` (256 values).
pub fn encode_points(p_in: &PointCloud, profile: &Profile, w: &WeightStore) -> Result<Vec<f64>> {
    let [n1, n2] = profile.sa_points;
    if p_in.len() < n1 {
        return Err(Error::invalid(format!(
            "point encoder needs at least {n1} points, got {}",
            p_in.len()
        )));
    }
    let pts = canonical_order(p_in);
    let (c1, f1) = set_abstraction(&pts, None, n1, "svf.pt.sa1", SA1_DIMS.len() - 1, w)?;
    let (_, f2) = set_abstraction(&c1, Some(&f1), n2, "svf.pt.sa2", SA2_DIMS.len() - 1, w)?;
    let g = f2.max_pool();
    let x = f2.hcat(&FeatureMatrix::broadcast(&g, f2.rows()))?;
    Ok(shared_mlp(&x, "svf.pt.sa3", SA3_DIMS.len() - 1, w)?.max_pool())
}

/// Per-view `P × C` patch tokens.
pub fn encode_views(maps: &[DepthMap], w: &WeightStore) -> Result<Vec<FeatureMatrix>> {
    let first = maps.first().ok_or_else(|| Error::invalid("no depth maps to encode"))?;
    let (h, wd) = (first.height, first.width);
    if let Some(m) = maps.iter().find(|m| (m.height, m.width) != (h, wd)) {
        return Err(Error::invalid(format!(
            "mixed depth map resolutions {h}x{wd} and {}x{}",
            m.height, m.width
        )));
    }
    let stack = ImageStack {
        height: h,
        width: wd,
        images: maps
            .iter()
            .map(|m| m.depth.iter().map(|&d| d as f64).collect())
            .collect(),
    };
    conv2d_encoder(&stack, "svf.cnn", w)
}

fn condition(f_p: &[f64], prefix: &str, w: &WeightStore) -> Result<Vec<f64>> {
    let m = FeatureMatrix::new(1, f_p.len(), f_p.to_vec())?;
    Ok(linear(&m, prefix, w)?.into_data())
}

/// Within-view fusion: tokens conditioned on `F_P`, self-attention, max over
/// the patches. One row per view.
pub fn fuse_stage1(view_tokens: &[FeatureMatrix], f_p: &[f64], w: &WeightStore) -> Result<FeatureMatrix> {
    if view_tokens.is_empty() {
        return Err(Error::invalid("no view tokens to fuse"));
    }
    let cond = condition(f_p, "svf.s1.cond", w)?;
    let rows = view_tokens
        .par_iter()
        .map(|t| Ok(self_attention(&t.add_row(&cond)?, "svf.s1.attn", w, true)?.max_pool()))
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_rows(&rows)
}

/// Across-view fusion: viewpoint embeddings enter queries and keys, values
/// are the `F_P`-conditioned view rows; max over views gives `F_g`.
pub fn fuse_stage2(f_vg: &FeatureMatrix, f_p: &[f64], vps: &[Viewpoint], w: &WeightStore) -> Result<Vec<f64>> {
    if vps.len() != f_vg.rows() {
        return Err(Error::invalid(format!(
            "{} viewpoints for {} views",
            vps.len(),
            f_vg.rows()
        )));
    }
    let x = f_vg.add_row(&condition(f_p, "svf.s2.cond", w)?)?;
    let pos = FeatureMatrix::new(vps.len(), 3, vps.iter().flat_map(|v| v.position).collect())?;
    let qk = x.add(&linear(&pos, "svf.s2.vp", w)?)?;
    let inputs = AttentionInputs {
        q_in: &qk,
        k_in: &qk,
        v_in: &x,
        residual: &x,
        q_add: None,
        k_add: None,
    };
    Ok(attend(inputs, "svf.s2.attn", w, true)?.0.max_pool())
}

/// Coarse cloud of `n_c` points from the global descriptor.
pub fn decode_coarse(f_g: &[f64], n_c: usize, w: &WeightStore) -> Result<PointCloud> {
    if n_c == 0 {
        return Err(Error::invalid("coarse point count must be at least 1"));
    }
    let tokens = conv_transpose1d(f_g, n_c, "svf.dec.expand", w)?;
    let h = self_attention(&tokens, "svf.dec.attn", w, true)?;
    let xyz = linear(&h, "svf.dec.out", w)?;
    let pts = xyz.row_iter().map(|r| [r[0], r[1], r[2]]).collect();
    PointCloud::new(pts)
}

/// Everything the global stage produces.
#[derive(Debug, Clone)]
pub struct SvfOutput {
    pub viewpoints: Vec<Viewpoint>,
    /// Empty when the projection branch is disabled.
    pub depth_maps: Vec<DepthMap>,
    pub f_p: Vec<f64>,
    pub f_g: Vec<f64>,
    pub p_c: PointCloud,
    pub p_0: PointCloud,
}

/// Projection, both encoders, fusion, coarse decoding, then merge with the
/// input and FPS back to `n0` points. With `use_projection == false` the
/// descriptor comes from `F_P` alone.
pub fn svfnet_forward(
    p_in: &PointCloud,
    profile: &Profile,
    w: &WeightStore,
    use_projection: bool,
) -> Result<SvfOutput> {
    let f_p = encode_points(p_in, profile, w)?;
    let (viewpoints, depth_maps, f_g) = if use_projection {
        let params = profile.projection_params()?;
        let vps = axis_viewpoints(profile.n_views, profile.camera_distance)?;
        let maps = vps
            .par_iter()
            .map(|vp| project_depth(p_in, vp, &params))
            .collect::<Result<Vec<_>>>()?;
        let tokens = encode_views(&maps, w)?;
        let f_vg = fuse_stage1(&tokens, &f_p, w)?;
        let f_g = fuse_stage2(&f_vg, &f_p, &vps, w)?;
        (vps, maps, f_g)
    } else {
        (Vec::new(), Vec::new(), condition(&f_p, "svf.global", w)?)
    };
    let p_c = decode_coarse(&f_g, profile.n0, w)?;
    let p_0 = merge_resample(&p_c, p_in, profile.n0)?;
    Ok(SvfOutput {
        viewpoints,
        depth_maps,
        f_p,
        f_g,
        p_c,
        p_0,
    })
}
