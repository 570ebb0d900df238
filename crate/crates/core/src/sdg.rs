//! Local stage: the dual-path refinement step and the two-step stack.
//!
//! Each step embeds the previous points with the global descriptor, runs
//! incompleteness-aware self-attention (structure analysis) and
//! cross-attention onto edge features of the partial input (similarity
//! alignment) side by side, blends the two with a per-point gate, and
//! regresses `r` offsets per point.
//!
//! Tensors: `sdg.edge1`, `sdg.edge2` and `sdg.offset.{0,1}` are shared by
//! both steps. Everything whose width depends on the step (`embed`, `ia`,
//! `dec_q.*`, `cross`, `dec_h.*`, `gate.*`, `expand`) lives under
//! `sdg{l}.` for step `l` in `1..=2`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{fps, knn, knn_rows, nearest_distance_field, PointCloud};
use crate::nn::attention::attention_specs;
use crate::nn::ops::mlp_specs;
use crate::nn::{
    cross_attention, ia_self_attention, linear, mlp, self_attention, sigmoid, sinusoidal_rows, FeatureMatrix,
    TensorSpec, WeightStore,
};
use crate::profile::{Profile, EDGE_K, GATE_HIDDEN, OFFSET_DIM, OFFSET_HEAD};
use crate::svfnet::group_max;

const EDGE1_DIMS: [usize; 2] = [3, 64];
const EDGE2_DIMS: [usize; 2] = [64, 256];
/// Width of the partial-input features `F_in`.
pub const PARTIAL_FEATURE_DIM: usize = EDGE2_DIMS[1];

pub fn shared_specs() -> Vec<TensorSpec> {
    let mut v = Vec::new();
    v.extend(TensorSpec::linear("sdg.edge1", 2 * EDGE1_DIMS[0], EDGE1_DIMS[1]));
    v.extend(TensorSpec::linear("sdg.edge2", 2 * EDGE2_DIMS[0], EDGE2_DIMS[1]));
    v.extend(mlp_specs("sdg.offset", &[OFFSET_DIM, OFFSET_HEAD[0], OFFSET_HEAD[1]]));
    v
}

/// Tensors of step `step` (1 or 2).
pub fn step_specs(p: &Profile, step: usize) -> Vec<TensorSpec> {
    let s = p.sdg_dims[step - 1];
    let r = p.rates[step - 1];
    let pre = format!("sdg{step}");
    let mut v = Vec::new();
    v.extend(TensorSpec::linear(&format!("{pre}.embed"), 3 + p.channels, s));
    v.extend(attention_specs(&format!("{pre}.ia"), s, s, s));
    for j in 0..p.decoder_depth {
        v.extend(attention_specs(&format!("{pre}.dec_q.{j}"), s, s, s));
    }
    v.extend(attention_specs(&format!("{pre}.cross"), s, PARTIAL_FEATURE_DIM, s));
    for j in 0..p.decoder_depth {
        v.extend(attention_specs(&format!("{pre}.dec_h.{j}"), s, s, s));
    }
    let prev = if step > 1 { OFFSET_DIM } else { 0 };
    v.extend(mlp_specs(&format!("{pre}.gate"), &[2 * s + prev, GATE_HIDDEN, 1]));
    v.extend(TensorSpec::linear(&format!("{pre}.expand"), s, r * OFFSET_DIM));
    v
}

pub fn tensor_specs(p: &Profile) -> Vec<TensorSpec> {
    let mut v = shared_specs();
    v.extend(step_specs(p, 1));
    v.extend(step_specs(p, 2));
    v
}

/// Per-point distance to the partial input and its sinusoidal embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompletenessField {
    pub d: Vec<f64>,
    pub h: FeatureMatrix,
    pub gamma: f64,
}

pub fn incompleteness_embed(
    p: &PointCloud,
    p_in: &PointCloud,
    gamma: f64,
    channels: usize,
) -> Result<IncompletenessField> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    let d = nearest_distance_field(p, p_in)?;
    let t: Vec<f64> = d.iter().map(|&x| x / gamma).collect();
    let h = sinusoidal_rows(&t, channels)?;
    Ok(IncompletenessField { d, h, gamma })
}

/// `[xyz ‖ f_g]` per point.
fn point_tokens(p: &PointCloud, f_g: &[f64]) -> FeatureMatrix {
    let mut data = Vec::with_capacity(p.len() * (3 + f_g.len()));
    for q in p.points() {
        data.extend_from_slice(q);
        data.extend_from_slice(f_g);
    }
    FeatureMatrix::from_raw(p.len(), 3 + f_g.len(), data)
}

fn decoder(x: FeatureMatrix, prefix: &str, depth: usize, w: &WeightStore) -> Result<FeatureMatrix> {
    (0..depth).try_fold(x, |h, j| self_attention(&h, &format!("{prefix}.{j}"), w, true))
}

/// Returns `(F_Q, F_Q′)`. The incompleteness-aware block is unscaled so
/// that it reduces exactly to plain self-attention at `h = 0`.
pub fn structure_analysis(
    p_prev: &PointCloud,
    f_g: &[f64],
    h: &FeatureMatrix,
    prefix: &str,
    depth: usize,
    w: &WeightStore,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    if h.rows() != p_prev.len() {
        return Err(Error::invalid(format!(
            "incompleteness field has {} rows for {} points",
            h.rows(),
            p_prev.len()
        )));
    }
    let f_c = linear(&point_tokens(p_prev, f_g), &format!("{prefix}.embed"), w)?;
    let f_q = ia_self_attention(&f_c, h, &format!("{prefix}.ia"), w, false)?;
    let f_q_prime = decoder(f_q.clone(), &format!("{prefix}.dec_q"), depth, w)?;
    Ok((f_q, f_q_prime))
}

/// One edge convolution: `max_j relu(linear([f_i ‖ f_j − f_i]))`.
fn edge_conv(f: &FeatureMatrix, neighbors: &[Vec<usize>], prefix: &str, w: &WeightStore) -> Result<FeatureMatrix> {
    let c = f.cols();
    let k = neighbors.first().map_or(0, Vec::len);
    let mut data = vec![0.0; f.rows() * k * 2 * c];
    data.par_chunks_mut(k * 2 * c).enumerate().for_each(|(i, block)| {
        let fi = f.row(i);
        for (row, &j) in block.chunks_mut(2 * c).zip(&neighbors[i]) {
            let fj = f.row(j);
            row[..c].copy_from_slice(fi);
            for a in 0..c {
                row[c + a] = fj[a] - fi[a];
            }
        }
    });
    let x = FeatureMatrix::from_raw(f.rows() * k, 2 * c, data);
    Ok(group_max(&linear(&x, prefix, w)?.relu(), k))
}

/// Local features of the partial input: coordinate-graph edge convolution,
/// FPS to `edge_points`, feature-graph edge convolution.
pub fn encode_partial(p_in: &PointCloud, profile: &Profile, w: &WeightStore) -> Result<FeatureMatrix> {
    let n = profile.edge_points;
    if p_in.len() < n || p_in.len() < EDGE_K[0] {
        return Err(Error::invalid(format!(
            "partial encoder needs at least {} points, got {}",
            n.max(EDGE_K[0]),
            p_in.len()
        )));
    }
    let graph: Vec<Vec<usize>> = knn(p_in, p_in, EDGE_K[0])?.into_iter().map(|s| s.into_vec()).collect();
    let xyz = FeatureMatrix::new(p_in.len(), 3, p_in.points().iter().flatten().copied().collect())?;
    let f1 = edge_conv(&xyz, &graph, "sdg.edge1", w)?;
    let f1 = f1.select_rows(fps(p_in, n)?.as_slice());
    let graph = knn_rows(f1.data(), f1.data(), f1.cols(), EDGE_K[1])?;
    edge_conv(&f1, &graph, "sdg.edge2", w)
}

/// Returns `(F_H′, attention map)`.
pub fn similarity_alignment(
    f_q: &FeatureMatrix,
    f_in: &FeatureMatrix,
    prefix: &str,
    depth: usize,
    w: &WeightStore,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let (f_h, attn) = cross_attention(f_q, f_in, &format!("{prefix}.cross"), w, true)?;
    Ok((decoder(f_h, &format!("{prefix}.dec_h"), depth, w)?, attn))
}

/// How the two paths are combined.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PathMode {
    /// Learned per-point gate.
    #[default]
    Gated,
    /// Every point uses this α.
    Fixed(f64),
    /// Structure analysis only (`F_l′ = F_Q′`).
    StructureOnly,
    /// Similarity alignment only (`F_l′ = F_H′`).
    AlignmentOnly,
}

/// Sigmoid kept inside the open interval even where it rounds to 0 or 1.
fn gate_value(logit: f64) -> f64 {
    sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `α·a + (1 − α)·b` per row.
pub fn blend(a: &FeatureMatrix, b: &FeatureMatrix, alpha: &[f64]) -> Result<FeatureMatrix> {
    if a.shape() != b.shape() || alpha.len() != a.rows() {
        return Err(Error::invalid(format!(
            "cannot blend {:?} and {:?} with {} weights",
            a.shape(),
            b.shape(),
            alpha.len()
        )));
    }
    let c = a.cols();
    let mut data = Vec::with_capacity(a.data().len());
    for (i, &t) in alpha.iter().enumerate() {
        let (ra, rb) = (&a.data()[i * c..(i + 1) * c], &b.data()[i * c..(i + 1) * c]);
        data.extend(ra.iter().zip(rb).map(|(x, y)| t * x + (1.0 - t) * y));
    }
    Ok(FeatureMatrix::from_raw(a.rows(), c, data))
}

/// Gate logits from `[F_Q′ + F_H′ ‖ F_{l−1} ‖ max(F_Q)]`; `f_prev` is
/// left out of the concatenation when absent.
pub fn gate_logits(
    f_q_prime: &FeatureMatrix,
    f_h_prime: &FeatureMatrix,
    f_q: &FeatureMatrix,
    f_prev: Option<&FeatureMatrix>,
    prefix: &str,
    w: &WeightStore,
) -> Result<Vec<f64>> {
    let n = f_q_prime.rows();
    if f_h_prime.rows() != n || f_q.rows() != n || f_prev.is_some_and(|f| f.rows() != n) {
        return Err(Error::invalid(format!(
            "path inputs disagree on the point count ({n}, {}, {}, {:?})",
            f_h_prime.rows(),
            f_q.rows(),
            f_prev.map(|f| f.rows())
        )));
    }
    let mut x = f_q_prime.add(f_h_prime)?;
    if let Some(f) = f_prev {
        x = x.hcat(f)?;
    }
    x = x.hcat(&FeatureMatrix::broadcast(&f_q.max_pool(), n))?;
    let dims = [x.cols(), GATE_HIDDEN, 1];
    Ok(mlp(&x, &format!("{prefix}.gate"), &dims, w)?.into_data())
}

/// Returns `(F_l′, α)`.
pub fn path_select(
    f_q_prime: &FeatureMatrix,
    f_h_prime: &FeatureMatrix,
    f_q: &FeatureMatrix,
    f_prev: Option<&FeatureMatrix>,
    prefix: &str,
    w: &WeightStore,
) -> Result<(FeatureMatrix, Vec<f64>)> {
    let alpha: Vec<f64> = gate_logits(f_q_prime, f_h_prime, f_q, f_prev, prefix, w)?
        .into_iter()
        .map(gate_value)
        .collect();
    Ok((blend(f_q_prime, f_h_prime, &alpha)?, alpha))
}

/// Returns `(P_l, F_l, O_l)`: `F_l` is the `rN × 128` offset feature,
/// `P_l` repeats every previous point `r` times and adds its offsets.
pub fn offset_regress(
    f_l_prime: &FeatureMatrix,
    r: usize,
    p_prev: &PointCloud,
    prefix: &str,
    w: &WeightStore,
) -> Result<(PointCloud, FeatureMatrix, FeatureMatrix)> {
    if r == 0 {
        return Err(Error::invalid("upsampling rate must be at least 1"));
    }
    if f_l_prime.rows() != p_prev.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} points",
            f_l_prime.rows(),
            p_prev.len()
        )));
    }
    let n = p_prev.len();
    let f_l = linear(f_l_prime, &format!("{prefix}.expand"), w)?.reshape(r * n, OFFSET_DIM)?;
    let o = mlp(&f_l, "sdg.offset", &[OFFSET_DIM, OFFSET_HEAD[0], OFFSET_HEAD[1]], w)?;
    let pts = o
        .row_iter()
        .enumerate()
        .map(|(i, d)| {
            let q = p_prev.points()[i / r];
            [q[0] + d[0], q[1] + d[1], q[2] + d[2]]
        })
        .collect();
    Ok((PointCloud::new(pts)?, f_l, o))
}

/// Switches for the structural ablations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SdgOptions {
    pub path: PathMode,
    /// Force the incompleteness embedding to zero.
    pub zero_incompleteness: bool,
}

/// Per-step configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdgStep {
    /// 1 or 2; selects the `sdg{l}` tensors.
    pub index: usize,
    pub width: usize,
    pub rate: usize,
    pub depth: usize,
    pub gamma: f64,
}

impl SdgStep {
    pub fn from_profile(p: &Profile, index: usize) -> Result<SdgStep> {
        if !(1..=2).contains(&index) {
            return Err(Error::invalid(format!("refinement step {index} does not exist")));
        }
        Ok(SdgStep {
            index,
            width: p.sdg_dims[index - 1],
            rate: p.rates[index - 1],
            depth: p.decoder_depth,
            gamma: p.gamma,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SdgOutput {
    pub points: PointCloud,
    pub features: FeatureMatrix,
    pub field: IncompletenessField,
    /// Absent when a single path is used.
    pub alpha: Option<Vec<f64>>,
    /// Absent when the alignment path is disabled.
    pub attention: Option<FeatureMatrix>,
}

/// One refinement step. `f_in` is the output of [`encode_partial`]; it is
/// only read when the alignment path is active.
#[allow(clippy::too_many_arguments)]
pub fn sdg_forward(
    p_prev: &PointCloud,
    f_prev: Option<&FeatureMatrix>,
    p_in: &PointCloud,
    f_in: Option<&FeatureMatrix>,
    f_g: &[f64],
    step: &SdgStep,
    opts: &SdgOptions,
    w: &WeightStore,
) -> Result<SdgOutput> {
    if let Some(f) = f_prev {
        if f.rows() != p_prev.len() {
            return Err(Error::invalid(format!(
                "previous features have {} rows for {} points",
                f.rows(),
                p_prev.len()
            )));
        }
    }
    let pre = format!("sdg{}", step.index);
    let mut field = incompleteness_embed(p_prev, p_in, step.gamma, step.width)?;
    if opts.zero_incompleteness {
        field.h = FeatureMatrix::zeros(field.h.rows(), field.h.cols());
    }
    let (f_q, f_q_prime) = structure_analysis(p_prev, f_g, &field.h, &pre, step.depth, w)?;
    let need_alignment = opts.path != PathMode::StructureOnly;
    let aligned = if need_alignment {
        let f_in = f_in.ok_or_else(|| Error::invalid("alignment path needs the partial features"))?;
        Some(similarity_alignment(&f_q, f_in, &pre, step.depth, w)?)
    } else {
        None
    };
    let (f_l_prime, alpha, attention) = match (opts.path, aligned) {
        (PathMode::StructureOnly, _) => (f_q_prime, None, None),
        (PathMode::AlignmentOnly, Some((f_h, attn))) => (f_h, None, Some(attn)),
        (PathMode::Fixed(a), Some((f_h, attn))) => {
            let alpha = vec![a; f_q.rows()];
            (blend(&f_q_prime, &f_h, &alpha)?, Some(alpha), Some(attn))
        }
        (PathMode::Gated, Some((f_h, attn))) => {
            let (f, alpha) = path_select(&f_q_prime, &f_h, &f_q, f_prev, &pre, w)?;
            (f, Some(alpha), Some(attn))
        }
        _ => unreachable!("alignment computed for every mode that reads it"),
    };
    let (points, features, _) = offset_regress(&f_l_prime, step.rate, p_prev, &pre, w)?;
    Ok(SdgOutput {
        points,
        features,
        field,
        alpha,
        attention,
    })
}

/// Both refinement steps from `P_0`.
pub fn refine_stack(
    p0: &PointCloud,
    p_in: &PointCloud,
    f_g: &[f64],
    profile: &Profile,
    opts: &SdgOptions,
    w: &WeightStore,
) -> Result<[SdgOutput; 2]> {
    let f_in = match opts.path {
        PathMode::StructureOnly => None,
        _ => Some(encode_partial(p_in, profile, w)?),
    };
    let s1 = SdgStep::from_profile(profile, 1)?;
    let first = sdg_forward(p0, None, p_in, f_in.as_ref(), f_g, &s1, opts, w)?;
    let s2 = SdgStep::from_profile(profile, 2)?;
    let second = sdg_forward(
        &first.points,
        Some(&first.features),
        p_in,
        f_in.as_ref(),
        f_g,
        &s2,
        opts,
        w,
    )?;
    Ok([first, second])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Rng, Tensor};

    fn tiny() -> (Profile, WeightStore) {
        let p = Profile::builtin("tiny-test").unwrap();
        let w = WeightStore::initialize(&tensor_specs(&p), &p.name, 3).unwrap();
        (p, w)
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = Rng::new(seed);
        PointCloud::new((0..n).map(|_| [0; 3].map(|_: i32| rng.uniform_in(-0.5, 0.5))).collect()).unwrap()
    }

    fn random_matrix(r: usize, c: usize, seed: u64) -> FeatureMatrix {
        let mut rng = Rng::new(seed);
        FeatureMatrix::new(r, c, (0..r * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn embed_zero_on_input_points() {
        let p = random_cloud(20, 1);
        let f = incompleteness_embed(&p, &p, 0.2, 6).unwrap();
        assert!(f.d.iter().all(|&d| d == 0.0));
        for row in f.h.row_iter() {
            assert_eq!(row, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn embed_scales_by_gamma() {
        let p_in = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let p = PointCloud::new(vec![[0.2, 0.0, 0.0]]).unwrap();
        let f = incompleteness_embed(&p, &p_in, 0.2, 4).unwrap();
        let expect = crate::nn::sinusoidal_embed(0.2 / 0.2, 4).unwrap();
        assert_eq!(f.h.row(0), expect.as_slice());
        assert!(incompleteness_embed(&p, &p_in, 0.0, 4).is_err());
    }

    #[test]
    fn partial_features_shape() {
        let (p, w) = tiny();
        let f = encode_partial(&random_cloud(256, 2), &p, &w).unwrap();
        assert_eq!(f.shape(), [64, 256]);
        assert!(encode_partial(&random_cloud(40, 2), &p, &w).is_err());
    }

    #[test]
    fn gate_zero_logit_blends_evenly() {
        let (p, mut w) = tiny();
        let s = p.sdg_dims[0];
        for name in ["sdg1.gate.1.weight", "sdg1.gate.1.bias"] {
            let shape = w.get(name).unwrap().shape().to_vec();
            w.replace(name, Tensor::zeros(shape)).unwrap();
        }
        let (a, b, q) = (random_matrix(5, s, 1), random_matrix(5, s, 2), random_matrix(5, s, 3));
        let (out, alpha) = path_select(&a, &b, &q, None, "sdg1", &w).unwrap();
        assert!(alpha.iter().all(|&x| x == 0.5));
        let half = a.add(&b).unwrap().scale(0.5);
        assert_eq!(out, half);
        assert!(path_select(&a, &b, &q, Some(&random_matrix(4, 128, 4)), "sdg2", &w).is_err());
    }

    #[test]
    fn gate_stays_open() {
        assert!(gate_value(1e6) < 1.0 && gate_value(-1e6) > 0.0);
        assert!((gate_value(20.0) - 1.0).abs() < 1e-8);
        assert!(gate_value(-20.0) < 1e-8);
    }

    #[test]
    fn zero_offsets_keep_points() {
        let (p, mut w) = tiny();
        for name in ["sdg.offset.1.weight", "sdg.offset.1.bias"] {
            let shape = w.get(name).unwrap().shape().to_vec();
            w.replace(name, Tensor::zeros(shape)).unwrap();
        }
        let prev = random_cloud(7, 5);
        let f = random_matrix(7, p.sdg_dims[0], 6);
        let (pts, fl, _) = offset_regress(&f, p.rates[0], &prev, "sdg1", &w).unwrap();
        assert_eq!(fl.shape(), [14, 128]);
        for (i, q) in pts.points().iter().enumerate() {
            assert_eq!(*q, prev.points()[i / 2]);
        }
    }

    #[test]
    fn stack_counts_and_modes() {
        let (p, w) = tiny();
        let p_in = random_cloud(256, 7);
        let p0 = random_cloud(64, 8);
        let f_g = vec![0.1; p.channels];
        for path in [
            PathMode::Gated,
            PathMode::Fixed(0.5),
            PathMode::StructureOnly,
            PathMode::AlignmentOnly,
        ] {
            for zero in [false, true] {
                let opts = SdgOptions {
                    path,
                    zero_incompleteness: zero,
                };
                let [a, b] = refine_stack(&p0, &p_in, &f_g, &p, &opts, &w).unwrap();
                assert_eq!((a.points.len(), b.points.len()), (128, 256));
                assert_eq!(a.alpha.is_some(), matches!(path, PathMode::Gated | PathMode::Fixed(_)));
                if let Some(alpha) = &b.alpha {
                    assert!(alpha.iter().all(|&x| x > 0.0 && x < 1.0));
                }
                if let Some(m) = &a.attention {
                    assert_eq!(m.shape(), [64, 64]);
                }
            }
        }
    }
}
