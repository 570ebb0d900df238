//! Literal, unoptimized versions of the kernels and metrics. They share no
//! code with the fast paths beyond the point type, and exist so tests and
//! `selfcheck` can compare against something obviously correct.

use crate::geom::{PointCloud, Viewpoint};
use crate::metrics::ChamferVariant;

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Nearest `(squared distance, index)` by a full scan, first index wins.
pub fn nearest(p: &[f64; 3], cloud: &[[f64; 3]]) -> (f64, usize) {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, q) in cloud.iter().enumerate() {
        let d = d2(p, q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best
}

/// Full sort of all reference points by `(distance, index)`, truncated.
pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Vec<Vec<usize>> {
    query
        .points()
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> = reference.points().iter().map(|p| d2(q, p)).zip(0..).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|e| e.1).collect()
        })
        .collect()
}

/// FPS recomputing every min-distance from scratch each round.
pub fn fps(cloud: &PointCloud, m: usize) -> Vec<usize> {
    let pts = cloud.points();
    let mut picked = vec![0usize];
    while picked.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in pts.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&j| d2(p, &pts[j])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picked.push(best.1);
    }
    picked
}

/// Kept indices (before FPS) and removed indices, both ascending.
pub fn crop_split(gt: &PointCloud, vp: &Viewpoint, n_missing: usize) -> (Vec<usize>, Vec<usize>) {
    let pts = gt.points();
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| {
        d2(&pts[b], &vp.position)
            .total_cmp(&d2(&pts[a], &vp.position))
            .then(b.cmp(&a))
    });
    let mut removed: Vec<usize> = order[..n_missing].to_vec();
    let mut kept: Vec<usize> = order[n_missing..].to_vec();
    removed.sort_unstable();
    kept.sort_unstable();
    (kept, removed)
}

/// `(partial, missing)` built from [`crop_split`] and [`fps`].
pub fn viewpoint_crop(
    gt: &PointCloud,
    vp: &Viewpoint,
    n_missing: usize,
    n_keep: usize,
) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let (kept, removed) = crop_split(gt, vp, n_missing);
    let rest = PointCloud::new(kept.iter().map(|&i| gt.points()[i]).collect()).expect("finite");
    let partial = fps(&rest, n_keep).into_iter().map(|i| rest.points()[i]).collect();
    (partial, removed.iter().map(|&i| gt.points()[i]).collect())
}

pub fn nearest_distance_field(query: &PointCloud, anchor: &PointCloud) -> Vec<f64> {
    query
        .points()
        .iter()
        .map(|q| nearest(q, anchor.points()).0.sqrt())
        .collect()
}

pub fn chamfer(x: &PointCloud, y: &PointCloud, variant: ChamferVariant) -> f64 {
    let dir = |a: &PointCloud, b: &PointCloud| {
        let mut s = 0.0;
        for p in a.points() {
            let d = nearest(p, b.points()).0;
            s += match variant {
                ChamferVariant::L2Squared => d,
                _ => d.sqrt(),
            };
        }
        s / a.len() as f64
    };
    let total = dir(x, y) + dir(y, x);
    match variant {
        ChamferVariant::L1Half => total / 2.0,
        _ => total,
    }
}

/// Central finite differences of [`chamfer`] with respect to `x`.
pub fn chamfer_grad_fd(x: &PointCloud, y: &PointCloud, variant: ChamferVariant, h: f64) -> Vec<[f64; 3]> {
    let mut pts = x.points().to_vec();
    let mut g = vec![[0.0; 3]; pts.len()];
    for i in 0..pts.len() {
        for a in 0..3 {
            let orig = pts[i][a];
            pts[i][a] = orig + h;
            let up = chamfer(&PointCloud::new(pts.clone()).expect("finite"), y, variant);
            pts[i][a] = orig - h;
            let down = chamfer(&PointCloud::new(pts.clone()).expect("finite"), y, variant);
            pts[i][a] = orig;
            g[i][a] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// Density-aware Chamfer distance by its defining double loop.
pub fn dcd(x: &PointCloud, y: &PointCloud, alpha: f64) -> f64 {
    let side = |a: &PointCloud, b: &PointCloud| {
        let mut s = 0.0;
        for p in a.points() {
            let (d, j) = nearest(p, b.points());
            let n = a.points().iter().filter(|q| nearest(q, b.points()).1 == j).count();
            s += 1.0 - (-alpha * d).exp() / n as f64;
        }
        s / a.len() as f64
    };
    (side(x, y) + side(y, x)) / 2.0
}

pub fn f1_score(x: &PointCloud, y: &PointCloud, tau: f64) -> f64 {
    let frac = |a: &PointCloud, b: &PointCloud| {
        a.points()
            .iter()
            .filter(|p| nearest(p, b.points()).0.sqrt() <= tau)
            .count() as f64
            / a.len() as f64
    };
    let (p, r) = (frac(x, y), frac(y, x));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Exhaustive gallery scan with the reference squared-norm Chamfer.
pub fn mmd(pred: &PointCloud, gallery: &[PointCloud]) -> (f64, usize) {
    let scores: Vec<f64> = gallery
        .iter()
        .map(|g| chamfer(pred, g, ChamferVariant::L2Squared))
        .collect();
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    (best, scores.iter().position(|&s| s == best).expect("non-empty gallery"))
}
