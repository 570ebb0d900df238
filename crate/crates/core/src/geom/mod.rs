//! Point clouds and the exact geometric kernels the rest of the pipeline
//! builds on: neighbor search, farthest point sampling, the viewpoint crop
//! benchmark protocol, and normalization.
//!
//! Every kernel breaks ties by the lower index, so results are reproducible
//! bit for bit and comparable against a plain brute-force scan.

pub mod io;
pub mod kdtree;

use rayon::prelude::*;

use crate::error::{Error, Result};
use kdtree::{insert_candidate, KdTree};

/// Squared Euclidean distance. All kernels compare on this value so they
/// agree exactly with the brute-force references.
#[inline]
pub fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Ordered list of 3-d points with finite coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points })
    }

    pub(crate) fn from_trusted(points: Vec<[f64; 3]>) -> Self {
        debug_assert!(points.iter().flatten().all(|c| c.is_finite()));
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn into_points(self) -> Vec<[f64; 3]> {
        self.points
    }

    pub fn select(&self, idx: &IndexSet) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Appends `other` after `self`.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = Vec::with_capacity(self.len() + other.len());
        points.extend_from_slice(&self.points);
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }

    pub fn map(&self, f: impl Fn(&[f64; 3]) -> [f64; 3]) -> Result<PointCloud> {
        PointCloud::new(self.points.iter().map(f).collect())
    }

    fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(Error::invalid(format!("{what} point cloud is empty")))
        } else {
            Ok(())
        }
    }
}

/// Camera position and target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewpoint {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
}

impl Viewpoint {
    pub fn new(position: [f64; 3], look_at: [f64; 3]) -> Result<Self> {
        if position == look_at {
            return Err(Error::invalid("viewpoint position coincides with look_at"));
        }
        if position.iter().chain(look_at.iter()).any(|c| !c.is_finite()) {
            return Err(Error::invalid("viewpoint has a non-finite coordinate"));
        }
        Ok(Viewpoint { position, look_at })
    }

    /// Camera at `position` looking at the origin.
    pub fn toward_origin(position: [f64; 3]) -> Result<Self> {
        Viewpoint::new(position, [0.0; 3])
    }
}

/// Distinct indices into a point cloud.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn from_vec(v: Vec<usize>) -> Self {
        IndexSet(v)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl std::ops::Index<usize> for IndexSet {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Brute force beats the tree below this reference size.
const TREE_MIN_POINTS: usize = 64;

/// The `k` nearest reference points of every query point, ascending by
/// `(distance, index)`.
pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<Vec<IndexSet>> {
    query.require_non_empty("query")?;
    reference.require_non_empty("reference")?;
    if k == 0 || k > reference.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", reference.len())));
    }
    let refs = reference.points();
    let out = if refs.len() < TREE_MIN_POINTS {
        query
            .points()
            .par_iter()
            .map(|q| {
                let mut found = Vec::with_capacity(k + 1);
                for (i, p) in refs.iter().enumerate() {
                    insert_candidate(&mut found, k, (sq_dist(q, p), i));
                }
                IndexSet(found.into_iter().map(|e| e.1).collect())
            })
            .collect()
    } else {
        let tree = KdTree::build(refs);
        query
            .points()
            .par_iter()
            .map(|q| IndexSet(tree.knn(q, k).into_iter().map(|e| e.1).collect()))
            .collect()
    };
    Ok(out)
}

/// kNN over rows of a flat `n × dim` feature buffer, brute force.
pub(crate) fn knn_rows(query: &[f64], reference: &[f64], dim: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let nr = reference.len() / dim;
    if k == 0 || k > nr {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={nr}")));
    }
    Ok(query
        .par_chunks(dim)
        .map(|q| {
            let mut found = Vec::with_capacity(k + 1);
            for (i, r) in reference.chunks(dim).enumerate() {
                let d: f64 = q.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
                insert_candidate(&mut found, k, (d, i));
            }
            found.into_iter().map(|e| e.1).collect()
        })
        .collect())
}

/// Greedy farthest point sampling seeded at index 0.
pub fn fps(cloud: &PointCloud, m: usize) -> Result<IndexSet> {
    cloud.require_non_empty("input")?;
    if m == 0 || m > cloud.len() {
        return Err(Error::invalid(format!(
            "fps sample size {m} must lie in 1..={}",
            cloud.len()
        )));
    }
    let pts = cloud.points();
    let mut min_d = vec![f64::INFINITY; pts.len()];
    let mut picked = Vec::with_capacity(m);
    let mut cur = 0usize;
    picked.push(cur);
    // Selected points drop out of the arg-max via the -inf sentinel.
    min_d[cur] = f64::NEG_INFINITY;
    while picked.len() < m {
        let c = pts[cur];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, (p, d)) in pts.iter().zip(min_d.iter_mut()).enumerate() {
            let nd = sq_dist(p, &c);
            if nd < *d {
                *d = nd;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        cur = best.1;
        min_d[cur] = f64::NEG_INFINITY;
        picked.push(cur);
    }
    Ok(IndexSet(picked))
}

/// Removes the `n_missing` points farthest from the camera, then FPS
/// downsamples the rest to `n_keep`. Returns `(partial, missing)`; `missing`
/// keeps the original point order.
pub fn viewpoint_crop(
    gt: &PointCloud,
    vp: &Viewpoint,
    n_missing: usize,
    n_keep: usize,
) -> Result<(PointCloud, PointCloud)> {
    gt.require_non_empty("ground truth")?;
    if n_missing == 0 || n_missing >= gt.len() {
        return Err(Error::invalid(format!(
            "n_missing = {n_missing} must lie in 1..{}",
            gt.len()
        )));
    }
    if n_keep == 0 || n_keep > gt.len() - n_missing {
        return Err(Error::invalid(format!(
            "n_keep = {n_keep} must lie in 1..={}",
            gt.len() - n_missing
        )));
    }
    let d: Vec<f64> = gt.points().iter().map(|p| sq_dist(p, &vp.position)).collect();
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let split = gt.len() - n_missing;
    let mut kept = order[..split].to_vec();
    let mut removed = order[split..].to_vec();
    kept.sort_unstable();
    removed.sort_unstable();
    let remaining = gt.select(&IndexSet(kept));
    let partial = remaining.select(&fps(&remaining, n_keep)?);
    Ok((partial, gt.select(&IndexSet(removed))))
}

/// The eight corners of `{-1, +1}^3` looking at the origin, in
/// lexicographic order.
pub fn fixed_test_viewpoints() -> [Viewpoint; 8] {
    let s = |bit: usize| if bit == 0 { -1.0 } else { 1.0 };
    std::array::from_fn(|i| Viewpoint {
        position: [s((i >> 2) & 1), s((i >> 1) & 1), s(i & 1)],
        look_at: [0.0; 3],
    })
}

/// Concatenates `coarse` then `partial` and FPS-resamples to `n0` points.
pub fn merge_resample(coarse: &PointCloud, partial: &PointCloud, n0: usize) -> Result<PointCloud> {
    let merged = coarse.concat(partial);
    if merged.len() < n0 || n0 == 0 {
        return Err(Error::invalid(format!(
            "cannot resample {} merged points to {n0}",
            merged.len()
        )));
    }
    Ok(merged.select(&fps(&merged, n0)?))
}

/// Distance from every query point to its nearest anchor point.
pub fn nearest_distance_field(query: &PointCloud, anchor: &PointCloud) -> Result<Vec<f64>> {
    anchor.require_non_empty("anchor")?;
    Ok(nearest_neighbors(query.points(), anchor.points())
        .into_iter()
        .map(|(d2, _)| d2.sqrt())
        .collect())
}

/// `(squared distance, index)` of the nearest `reference` point for every
/// query point. `reference` must be non-empty.
pub(crate) fn nearest_neighbors(query: &[[f64; 3]], reference: &[[f64; 3]]) -> Vec<(f64, usize)> {
    debug_assert!(!reference.is_empty());
    if reference.len() < TREE_MIN_POINTS {
        return query
            .par_iter()
            .map(|q| {
                let mut best = (f64::INFINITY, 0);
                for (i, p) in reference.iter().enumerate() {
                    let d = sq_dist(q, p);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                best
            })
            .collect();
    }
    let tree = KdTree::build(reference);
    query
        .par_iter()
        .map(|q| tree.nearest(q).expect("non-empty reference"))
        .collect()
}

/// Translation and uniform scale mapping a normalized cloud back to the
/// original frame: `original = normalized / scale + center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn invert(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.map(|p| std::array::from_fn(|a| p[a] / self.scale + self.center[a]))
    }
}

/// Centers the bounding box at the origin and scales uniformly so that the
/// largest half-extent equals `half_extent`.
pub fn normalize(cloud: &PointCloud, half_extent: f64) -> Result<(PointCloud, NormalizeTransform)> {
    cloud.require_non_empty("input")?;
    if !(half_extent > 0.0 && half_extent.is_finite()) {
        return Err(Error::invalid(format!("half_extent {half_extent} must be positive")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.points() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center: [f64; 3] = std::array::from_fn(|a| (lo[a] + hi[a]) / 2.0);
    let max_half = (0..3).map(|a| (hi[a] - lo[a]) / 2.0).fold(0.0, f64::max);
    if max_half <= 0.0 {
        return Err(Error::Degenerate("all points are identical".into()));
    }
    let scale = half_extent / max_half;
    let out = cloud.map(|p| std::array::from_fn(|a| (p[a] - center[a]) * scale))?;
    Ok((out, NormalizeTransform { center, scale }))
}
