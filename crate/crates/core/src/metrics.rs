//! Evaluation metrics, the training loss, analytic Chamfer gradients and a
//! small gradient-descent demo.
//!
//! All reductions run sequentially in index order after the parallel
//! nearest-neighbor queries, so results do not depend on the thread count.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geom::{fps, nearest_neighbors, PointCloud};
use crate::synth::{fibonacci_sphere, uniform_cube};

/// Default F-score threshold.
pub const DEFAULT_TAU: f64 = 0.01;
/// Default density-aware Chamfer sharpness.
pub const DEFAULT_DCD_ALPHA: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChamferVariant {
    /// Mean Euclidean distances, both directions summed.
    L1Sum,
    /// Half of `L1Sum`.
    L1Half,
    /// Mean squared distances, both directions summed.
    L2Squared,
}

impl ChamferVariant {
    pub const ALL: [ChamferVariant; 3] = [ChamferVariant::L1Sum, ChamferVariant::L1Half, ChamferVariant::L2Squared];

    pub fn name(self) -> &'static str {
        match self {
            ChamferVariant::L1Sum => "l1-sum",
            ChamferVariant::L1Half => "l1-half",
            ChamferVariant::L2Squared => "l2-squared",
        }
    }

    /// Per-pair term as a function of the squared distance.
    fn term(self, d2: f64) -> f64 {
        match self {
            ChamferVariant::L1Sum => d2.sqrt(),
            ChamferVariant::L1Half => 0.5 * d2.sqrt(),
            ChamferVariant::L2Squared => d2,
        }
    }

    /// Gradient of the per-pair term with respect to `a`, for `diff = a − b`.
    fn term_grad(self, diff: [f64; 3]) -> [f64; 3] {
        let d = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
        let s = match self {
            ChamferVariant::L2Squared => 2.0,
            _ if d == 0.0 => 0.0,
            ChamferVariant::L1Sum => 1.0 / d,
            ChamferVariant::L1Half => 0.5 / d,
        };
        diff.map(|v| s * v)
    }
}

impl fmt::Display for ChamferVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChamferVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ChamferVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown Chamfer variant `{s}` (l1-sum, l1-half, l2-squared)")))
    }
}

fn require(x: &PointCloud, what: &str) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid(format!("{what} cloud is empty")));
    }
    Ok(())
}

/// The two directional means `(X→Y, Y→X)`.
pub fn chamfer_terms(x: &PointCloud, y: &PointCloud, variant: ChamferVariant) -> Result<(f64, f64)> {
    require(x, "first")?;
    require(y, "second")?;
    let mean = |a: &PointCloud, b: &PointCloud| {
        let nn = nearest_neighbors(a.points(), b.points());
        nn.iter().map(|&(d2, _)| variant.term(d2)).sum::<f64>() / a.len() as f64
    };
    Ok((mean(x, y), mean(y, x)))
}

pub fn chamfer(x: &PointCloud, y: &PointCloud, variant: ChamferVariant) -> Result<f64> {
    let (a, b) = chamfer_terms(x, y, variant)?;
    Ok(a + b)
}

/// Gradient of `chamfer(x, y, variant)` with respect to every point of `x`.
/// Nearest-neighbor ties take the lowest index; the norm variants use the
/// zero subgradient at zero distance.
pub fn chamfer_grad(x: &PointCloud, y: &PointCloud, variant: ChamferVariant) -> Result<Vec<[f64; 3]>> {
    require(x, "first")?;
    require(y, "second")?;
    let (xs, ys) = (x.points(), y.points());
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let mut g = vec![[0.0; 3]; xs.len()];
    for (i, &(_, j)) in nearest_neighbors(xs, ys).iter().enumerate() {
        let t = variant.term_grad(std::array::from_fn(|a| xs[i][a] - ys[j][a]));
        for a in 0..3 {
            g[i][a] += t[a] / nx;
        }
    }
    for (j, &(_, i)) in nearest_neighbors(ys, xs).iter().enumerate() {
        let t = variant.term_grad(std::array::from_fn(|a| xs[i][a] - ys[j][a]));
        for a in 0..3 {
            g[i][a] += t[a] / ny;
        }
    }
    Ok(g)
}

/// Coarse-plus-refined training loss; the ground truth is FPS-downsampled
/// to each prediction's size.
pub fn total_loss(p_c: &PointCloud, p_1: &PointCloud, p_2: &PointCloud, p_gt: &PointCloud) -> Result<f64> {
    let mut sum = 0.0;
    for p in [p_c, p_1, p_2] {
        require(p, "prediction")?;
        if p.len() > p_gt.len() {
            return Err(Error::invalid(format!(
                "ground truth has {} points, fewer than the {}-point prediction",
                p_gt.len(),
                p.len()
            )));
        }
        let gt = p_gt.select(&fps(p_gt, p.len())?);
        sum += chamfer(p, &gt, ChamferVariant::L1Sum)?;
    }
    Ok(sum)
}

/// Density-aware Chamfer distance in `[0, 1]`.
pub fn dcd(x: &PointCloud, y: &PointCloud, alpha: f64) -> Result<f64> {
    require(x, "first")?;
    require(y, "second")?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("DCD alpha must be positive, got {alpha}")));
    }
    let side = |a: &PointCloud, b: &PointCloud| {
        let nn = nearest_neighbors(a.points(), b.points());
        let mut count = vec![0usize; b.len()];
        for &(_, j) in &nn {
            count[j] += 1;
        }
        nn.iter()
            .map(|&(d2, j)| 1.0 - (-alpha * d2).exp() / count[j] as f64)
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(0.5 * (side(x, y) + side(y, x)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision counts `x` points within `tau` of `y`, recall the reverse.
pub fn f_score(x: &PointCloud, y: &PointCloud, tau: f64) -> Result<FScore> {
    require(x, "first")?;
    require(y, "second")?;
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("F-score threshold must be positive, got {tau}")));
    }
    let frac = |a: &PointCloud, b: &PointCloud| {
        let nn = nearest_neighbors(a.points(), b.points());
        nn.iter().filter(|&&(d2, _)| d2.sqrt() <= tau).count() as f64 / a.len() as f64
    };
    let (precision, recall) = (frac(x, y), frac(y, x));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(FScore { precision, recall, f1 })
}

pub fn f1_score(x: &PointCloud, y: &PointCloud, tau: f64) -> Result<f64> {
    Ok(f_score(x, y, tau)?.f1)
}

/// Smallest squared-norm Chamfer distance to any gallery cloud and the
/// index of the first cloud attaining it.
pub fn mmd(pred: &PointCloud, gallery: &[PointCloud]) -> Result<(f64, usize)> {
    if gallery.is_empty() {
        return Err(Error::invalid("MMD gallery is empty"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, g) in gallery.iter().enumerate() {
        let d = chamfer(pred, g, ChamferVariant::L2Squared)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best)
}

/// Dataset-level MMD: mean over predictions.
pub fn mean_mmd(preds: &[PointCloud], gallery: &[PointCloud]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    let mut sum = 0.0;
    for p in preds {
        sum += mmd(p, gallery)?.0;
    }
    Ok(sum / preds.len() as f64)
}

/// Plain gradient descent on the squared-norm Chamfer distance. The curve
/// holds the loss before every step and after the last one.
pub fn toy_fit(x0: &PointCloud, target: &PointCloud, steps: usize, lr: f64) -> Result<(PointCloud, Vec<f64>)> {
    if steps == 0 || !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("toy fit needs steps >= 1 and a positive learning rate"));
    }
    let v = ChamferVariant::L2Squared;
    let mut x = x0.clone();
    let mut curve = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        curve.push(chamfer(&x, target, v)?);
        let g = chamfer_grad(&x, target, v)?;
        let moved = x
            .points()
            .iter()
            .zip(&g)
            .map(|(p, d)| std::array::from_fn(|a| p[a] - lr * d[a]))
            .collect();
        x = PointCloud::new(moved)?;
    }
    curve.push(chamfer(&x, target, v)?);
    Ok((x, curve))
}

/// The bundled descent demo: `n` uniform points in `[-1, 1]³` fitted to a
/// unit-sphere sample of the same size.
pub fn fit_demo_inputs(n: usize, seed: u64) -> (PointCloud, PointCloud) {
    (uniform_cube(n, 1.0, seed), fibonacci_sphere(n, 1.0))
}

/// Every metric for one prediction/ground-truth pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub cd_l1_sum: f64,
    pub cd_l1: f64,
    pub cd_l2: f64,
    /// `(pred→gt, gt→pred)` means of the squared-norm variant.
    pub cd_l2_terms: (f64, f64),
    pub dcd: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tau: f64,
    pub dcd_alpha: f64,
}

pub const METRIC_NAMES: [&str; 7] = ["cd_l1_sum", "cd_l1", "cd_l2", "dcd", "f1", "precision", "recall"];

impl MetricReport {
    pub fn compute(pred: &PointCloud, gt: &PointCloud, tau: f64, dcd_alpha: f64) -> Result<MetricReport> {
        let (a, b) = chamfer_terms(pred, gt, ChamferVariant::L1Sum)?;
        let l2 = chamfer_terms(pred, gt, ChamferVariant::L2Squared)?;
        let fs = f_score(pred, gt, tau)?;
        Ok(MetricReport {
            cd_l1_sum: a + b,
            cd_l1: 0.5 * (a + b),
            cd_l2: l2.0 + l2.1,
            cd_l2_terms: l2,
            dcd: dcd(pred, gt, dcd_alpha)?,
            f1: fs.f1,
            precision: fs.precision,
            recall: fs.recall,
            tau,
            dcd_alpha,
        })
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        Some(match name {
            "cd_l1_sum" => self.cd_l1_sum,
            "cd_l1" => self.cd_l1,
            "cd_l2" => self.cd_l2,
            "dcd" => self.dcd,
            "f1" => self.f1,
            "precision" => self.precision,
            "recall" => self.recall,
            _ => return None,
        })
    }
}

/// Nine significant digits in scientific notation.
pub fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pc(v: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(v.to_vec()).unwrap()
    }

    #[test]
    fn hand_evaluated_pair() {
        let x = pc(&[[0.0; 3]]);
        let y = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&x, &y, ChamferVariant::L1Sum).unwrap(), 2.0);
        assert_eq!(chamfer(&x, &y, ChamferVariant::L1Half).unwrap(), 1.0);
        assert_eq!(chamfer(&x, &y, ChamferVariant::L2Squared).unwrap(), 2.0);
        assert!(chamfer(&x, &pc(&[]), ChamferVariant::L1Sum).is_err());
        let g = chamfer_grad(&x, &y, ChamferVariant::L2Squared).unwrap();
        assert_eq!(g, vec![[-4.0, 0.0, 0.0]]);
    }

    #[test]
    fn identity_cases() {
        let x = fibonacci_sphere(50, 1.0);
        for v in ChamferVariant::ALL {
            assert_eq!(chamfer(&x, &x, v).unwrap(), 0.0);
            assert!(chamfer_grad(&x, &x, v).unwrap().iter().all(|g| *g == [0.0; 3]));
        }
        assert_eq!(dcd(&x, &x, DEFAULT_DCD_ALPHA).unwrap(), 0.0);
        assert_eq!(f1_score(&x, &x, DEFAULT_TAU).unwrap(), 1.0);
        assert_eq!(mmd(&x, &[fibonacci_sphere(50, 2.0), x.clone()]).unwrap(), (0.0, 1));
    }

    #[test]
    fn distant_clouds() {
        let x = fibonacci_sphere(20, 0.1);
        let y = x.map(|p| [p[0] + 10.0, p[1], p[2]]).unwrap();
        let d = dcd(&x, &y, DEFAULT_DCD_ALPHA).unwrap();
        assert!(d <= 1.0 && d > 0.999);
        assert_eq!(f1_score(&x, &y, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_zero_on_matched_subsets() {
        let gt = fibonacci_sphere(64, 1.0);
        let sub = |n| gt.select(&fps(&gt, n).unwrap());
        assert_eq!(total_loss(&sub(8), &sub(16), &sub(64), &gt).unwrap(), 0.0);
        assert!(total_loss(&sub(8), &sub(16), &sub(64), &sub(32)).is_err());
    }

    #[test]
    fn toy_fit_fixed_point() {
        let t = fibonacci_sphere(32, 1.0);
        let (x, curve) = toy_fit(&t, &t, 5, 0.05).unwrap();
        assert_eq!(x, t);
        assert!(curve.iter().all(|&l| l == 0.0));
        assert_eq!(curve.len(), 6);
        assert!(toy_fit(&t, &t, 0, 0.05).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ChamferVariant::ALL {
            assert_eq!(v.name().parse::<ChamferVariant>().unwrap(), v);
        }
        assert!("l3".parse::<ChamferVariant>().is_err());
        assert_eq!(format_value(0.5), "5.00000000e-1");
    }
}
