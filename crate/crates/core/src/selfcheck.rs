//! Named invariant and oracle checks with fixed seeds, run by the
//! `selfcheck` command. Each check returns a short failure description.

use std::time::{Duration, Instant};

use crate::geom::io::{decode_pcb, encode_pcb};
use crate::geom::{fixed_test_viewpoints, fps, knn, nearest_distance_field, viewpoint_crop, IndexSet, PointCloud};
use crate::metrics::{self, ChamferVariant};
use crate::nn::{ia_self_attention, self_attention, sinusoidal_embed, FeatureMatrix, Rng, WeightStore};
use crate::pipeline::{complete, init_weights, Ablation};
use crate::profile::Profile;
use crate::projection::{axis_viewpoints, backproject, project_depth, DepthMap, ProjectionParams};
use crate::sdg::{self, SdgOptions, SdgStep};
use crate::synth::{object_surface, uniform_cube};
use crate::{reference, svfnet};

type CheckResult = Result<(), String>;
pub type Check = (&'static str, fn() -> CheckResult);

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub error: Option<String>,
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }
}

pub const CHECKS: &[Check] = &[
    ("geom.knn_oracle", knn_oracle),
    ("geom.fps_oracle", fps_oracle),
    ("geom.crop_oracle", crop_oracle),
    ("geom.distance_field_oracle", distance_field_oracle),
    ("geom.pcb_round_trip", pcb_round_trip),
    ("projection.round_trip", projection_round_trip),
    ("projection.dmb_round_trip", dmb_round_trip),
    ("nn.psw_round_trip", psw_round_trip),
    ("nn.ia_reduction", ia_reduction),
    ("nn.sinusoid_zero_and_gamma", sinusoid_checks),
    ("svfnet.point_permutation", point_permutation),
    ("svfnet.view_permutation", view_permutation),
    ("svfnet.finite_over_seeds", finite_over_seeds),
    ("sdg.gate", gate_checks),
    ("sdg.permutation_equivariance", sdg_equivariance),
    ("metrics.oracles", metric_oracles),
    ("metrics.gradient", gradient_check),
    ("metrics.identities", metric_identities),
    ("metrics.toy_fit_basics", toy_fit_basics),
    ("pipeline.shape_contracts", shape_contracts),
    ("pipeline.determinism", determinism),
];

/// Runs every check in order; stops nothing on failure.
pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS.iter().map(|&(name, f)| run_one(name, f)).collect()
}

fn run_one(name: &'static str, f: fn() -> CheckResult) -> CheckOutcome {
    let start = Instant::now();
    let error = match std::panic::catch_unwind(f) {
        Ok(r) => r.err(),
        Err(_) => Some("panicked".into()),
    };
    CheckOutcome {
        name,
        error,
        elapsed: start.elapsed(),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> CheckResult {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn knn_oracle() -> CheckResult {
    for seed in 0..20 {
        let r = uniform_cube(100 + 20 * seed as usize, 1.0, seed);
        let q = uniform_cube(40, 1.0, seed + 100);
        let fast: Vec<Vec<usize>> = ok(knn(&q, &r, 8))?.into_iter().map(IndexSet::into_vec).collect();
        ensure(fast == reference::knn(&q, &r, 8), || {
            format!("seed {seed}: knn differs")
        })?;
    }
    Ok(())
}

fn fps_oracle() -> CheckResult {
    for seed in 0..20 {
        let c = uniform_cube(300, 1.0, seed);
        let fast = ok(fps(&c, 40))?.into_vec();
        ensure(fast == reference::fps(&c, 40), || format!("seed {seed}: fps differs"))?;
    }
    Ok(())
}

fn crop_oracle() -> CheckResult {
    let vps = fixed_test_viewpoints();
    for seed in 0..20 {
        let gt = uniform_cube(400, 0.5, seed);
        let vp = &vps[seed as usize % 8];
        let (partial, missing) = ok(viewpoint_crop(&gt, vp, 100, 64))?;
        let (rp, rm) = reference::viewpoint_crop(&gt, vp, 100, 64);
        ensure(
            partial.points() == rp.as_slice() && missing.points() == rm.as_slice(),
            || format!("seed {seed}: crop differs"),
        )?;
    }
    Ok(())
}

fn distance_field_oracle() -> CheckResult {
    for seed in 0..20 {
        let q = uniform_cube(256, 1.0, seed);
        let a = uniform_cube(200, 1.0, seed + 50);
        let fast = ok(nearest_distance_field(&q, &a))?;
        let slow = reference::nearest_distance_field(&q, &a);
        ensure(fast.iter().zip(&slow).all(|(x, y)| close(*x, *y, 1e-12)), || {
            format!("seed {seed}: distance field differs")
        })?;
    }
    Ok(())
}

fn pcb_round_trip() -> CheckResult {
    let c = uniform_cube(100, 1.0, 1)
        .map(|p| p.map(|v| v as f32 as f64))
        .map_err(|e| e.to_string())?;
    let bytes = encode_pcb(&c);
    ensure(ok(decode_pcb(&bytes))? == c, || "PCB1 round trip changed points".into())?;
    let mut bad = bytes;
    bad[0] ^= 0xff;
    ensure(decode_pcb(&bad).is_err(), || "corrupted PCB1 magic accepted".into())
}

fn projection_round_trip() -> CheckResult {
    for res in [224, 64] {
        let params = ok(ProjectionParams::new(res, 0.7, 0, 60.0))?;
        let cloud = object_surface(2000, res as u64);
        let bound = params.pixel_footprint_bound();
        for vp in ok(axis_viewpoints(3, 0.7))? {
            let dm = ok(project_depth(&cloud, &vp, &params))?;
            let back = ok(backproject(&dm, &params, None))?;
            ensure(back.len() == dm.nonzero_count(), || {
                "one point per foreground pixel".into()
            })?;
            let d = ok(nearest_distance_field(&back, &cloud))?;
            let worst = d.iter().copied().fold(0.0, f64::max);
            ensure(worst <= bound, || {
                format!("{res}²: error {worst} exceeds bound {bound}")
            })?;
        }
    }
    Ok(())
}

fn dmb_round_trip() -> CheckResult {
    let params = ok(ProjectionParams::new(64, 0.7, 1, 60.0))?;
    let vp = ok(axis_viewpoints(1, 0.7))?[0];
    let dm = ok(project_depth(&object_surface(500, 2), &vp, &params))?;
    let bytes = dm.encode();
    ensure(ok(DepthMap::decode(&bytes))?.encode() == bytes, || {
        "DMB1 round trip changed bytes".into()
    })?;
    let mut bad = bytes;
    bad[1] ^= 0xff;
    ensure(DepthMap::decode(&bad).is_err(), || {
        "corrupted DMB1 magic accepted".into()
    })
}

fn psw_round_trip() -> CheckResult {
    let p = ok(Profile::builtin("tiny-test"))?;
    let w = ok(init_weights(&p, 7))?;
    let bytes = ok(w.encode())?;
    let back = ok(WeightStore::decode(&bytes))?;
    ensure(ok(back.encode())? == bytes, || "PSW1 round trip changed bytes".into())?;
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    ensure(WeightStore::decode(&bad).is_err(), || {
        "corrupted PSW1 magic accepted".into()
    })?;
    let mut flipped = bytes;
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x01;
    ensure(WeightStore::decode(&flipped).is_err(), || {
        "CRC did not catch a flipped bit".into()
    })
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> FeatureMatrix {
    FeatureMatrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    )
    .expect("finite")
}

fn ia_reduction() -> CheckResult {
    for seed in 0..10 {
        let c = 8 + 2 * seed as usize;
        let specs = crate::nn::attention_specs("a", c, c, c);
        let w = ok(WeightStore::initialize(&specs, "check", seed))?;
        let x = random_matrix(12, c, &mut Rng::new(seed + 1));
        let ia = ok(ia_self_attention(&x, &FeatureMatrix::zeros(12, c), "a", &w, false))?;
        let plain = ok(self_attention(&x, "a", &w, false))?;
        let diff = ia
            .data()
            .iter()
            .zip(plain.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(diff <= 1e-12, || format!("seed {seed}: max diff {diff}"))?;
    }
    Ok(())
}

fn sinusoid_checks() -> CheckResult {
    let z = ok(sinusoidal_embed(0.0, 16))?;
    ensure(z.chunks(2).all(|p| p == [0.0, 1.0]), || {
        "embedding at 0 is not [0,1,...]".into()
    })?;
    let p_in = PointCloud::new(vec![[0.0; 3]]).expect("finite");
    let p = PointCloud::new(vec![[0.0, 0.3, 0.0]]).expect("finite");
    let f = ok(sdg::incompleteness_embed(&p, &p_in, 0.2, 16))?;
    let manual: Vec<f64> = (0..8)
        .flat_map(|k| {
            let a = (0.3 / 0.2) / 10000f64.powf(2.0 * k as f64 / 16.0);
            [a.sin(), a.cos()]
        })
        .collect();
    ensure(
        f.h.row(0).iter().zip(&manual).all(|(a, b)| close(*a, *b, 1e-12)),
        || "gamma scaling differs from manual embedding".into(),
    )?;
    ensure(f.h.data().iter().all(|v| v.abs() <= 1.0), || {
        "embedding leaves [-1, 1]".into()
    })
}

fn tiny() -> Result<(Profile, WeightStore), String> {
    let p = ok(Profile::builtin("tiny-test"))?;
    let w = ok(init_weights(&p, 17))?;
    Ok((p, w))
}

fn point_permutation() -> CheckResult {
    let (p, w) = tiny()?;
    for seed in 0..3 {
        let c = object_surface(256, seed);
        let perm = Rng::new(seed + 9).permutation(256);
        let shuffled = c.select(&IndexSet::from_vec(perm));
        let a = ok(svfnet::encode_points(&c, &p, &w))?;
        let b = ok(svfnet::encode_points(&shuffled, &p, &w))?;
        ensure(a == b, || format!("seed {seed}: F_P changed under permutation"))?;
    }
    Ok(())
}

fn view_permutation() -> CheckResult {
    let (p, w) = tiny()?;
    let mut rng = Rng::new(5);
    let f_vg = random_matrix(3, p.channels, &mut rng);
    let f_p: Vec<f64> = (0..256).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let vps = ok(axis_viewpoints(3, 0.7))?;
    let g = ok(svfnet::fuse_stage2(&f_vg, &f_p, &vps, &w))?;
    let order = [2, 0, 1];
    let g2 = ok(svfnet::fuse_stage2(
        &f_vg.select_rows(&order),
        &f_p,
        &order.map(|i| vps[i]),
        &w,
    ))?;
    ensure(g.iter().zip(&g2).all(|(a, b)| close(*a, *b, 1e-9)), || {
        "F_g changed under joint view permutation".into()
    })?;
    let swapped = [vps[1], vps[0], vps[2]];
    let g3 = ok(svfnet::fuse_stage2(&f_vg, &f_p, &swapped, &w))?;
    ensure(g != g3, || "swapping viewpoints alone left F_g unchanged".into())
}

fn finite_over_seeds() -> CheckResult {
    let (p, w) = tiny()?;
    for seed in 0..100 {
        let c = uniform_cube(256, 0.45, seed);
        let out = ok(svfnet::svfnet_forward(&c, &p, &w, true))?;
        let finite = out.f_p.iter().chain(&out.f_g).all(|v| v.is_finite());
        ensure(finite && out.p_0.len() == p.n0, || {
            format!("seed {seed}: non-finite or wrong size")
        })?;
    }
    Ok(())
}

fn gate_checks() -> CheckResult {
    let (p, w) = tiny()?;
    let s = p.sdg_dims[0];
    let mut rng = Rng::new(3);
    let (a, q) = (random_matrix(20, s, &mut rng), random_matrix(20, s, &mut rng));
    let b = random_matrix(20, s, &mut rng);
    let (_, alpha) = ok(sdg::path_select(&a, &b, &q, None, "sdg1", &w))?;
    ensure(alpha.iter().all(|&x| x > 0.0 && x < 1.0), || {
        "alpha outside (0, 1)".into()
    })?;
    let (same, _) = ok(sdg::path_select(&a, &a, &q, None, "sdg1", &w))?;
    let diff = same
        .data()
        .iter()
        .zip(a.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    ensure(diff <= 1e-12, || format!("equal paths differ from input by {diff}"))
}

fn sdg_equivariance() -> CheckResult {
    let (p, w) = tiny()?;
    let p_in = object_surface(256, 4);
    let f_in = ok(sdg::encode_partial(&p_in, &p, &w))?;
    let p_prev = uniform_cube(48, 0.4, 6);
    let mut rng = Rng::new(7);
    let f_prev = random_matrix(48, 128, &mut rng);
    let f_g: Vec<f64> = (0..p.channels).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let step = ok(SdgStep::from_profile(&p, 2))?;
    let opts = SdgOptions::default();
    let a = ok(sdg::sdg_forward(
        &p_prev,
        Some(&f_prev),
        &p_in,
        Some(&f_in),
        &f_g,
        &step,
        &opts,
        &w,
    ))?;
    let perm = rng.permutation(48);
    let pp = p_prev.select(&IndexSet::from_vec(perm.clone()));
    let fp = f_prev.select_rows(&perm);
    let b = ok(sdg::sdg_forward(
        &pp,
        Some(&fp),
        &p_in,
        Some(&f_in),
        &f_g,
        &step,
        &opts,
        &w,
    ))?;
    let r = step.rate;
    ensure(a.points.len() == 48 * r, || "point count is not r·N".into())?;
    for (new_i, &old_i) in perm.iter().enumerate() {
        for k in 0..r {
            let (x, y) = (a.points.points()[old_i * r + k], b.points.points()[new_i * r + k]);
            ensure((0..3).all(|c| close(x[c], y[c], 1e-9)), || {
                format!("block {old_i} not permuted")
            })?;
        }
    }
    Ok(())
}

fn metric_oracles() -> CheckResult {
    for seed in 0..20 {
        let x = uniform_cube(128, 0.5, seed);
        let y = uniform_cube(100, 0.5, seed + 1000);
        for v in ChamferVariant::ALL {
            let fast = ok(metrics::chamfer(&x, &y, v))?;
            let slow = reference::chamfer(&x, &y, v);
            ensure(close(fast, slow, 1e-10), || {
                format!("seed {seed}: chamfer {v} {fast} vs {slow}")
            })?;
        }
        let (fast, slow) = (ok(metrics::dcd(&x, &y, 1000.0))?, reference::dcd(&x, &y, 1000.0));
        ensure(close(fast, slow, 1e-10), || {
            format!("seed {seed}: dcd {fast} vs {slow}")
        })?;
        let (fast, slow) = (ok(metrics::f1_score(&x, &y, 0.05))?, reference::f1_score(&x, &y, 0.05));
        ensure(fast == slow, || format!("seed {seed}: f1 {fast} vs {slow}"))?;
        let gallery: Vec<PointCloud> = (0..5).map(|g| uniform_cube(64, 0.5, seed * 10 + g)).collect();
        let (fast, slow) = (ok(metrics::mmd(&x, &gallery))?, reference::mmd(&x, &gallery));
        ensure(fast.1 == slow.1 && close(fast.0, slow.0, 1e-10), || {
            format!("seed {seed}: mmd differs")
        })?;
    }
    Ok(())
}

/// Largest relative error between analytic and central-difference
/// gradients, or `None` when a nearest-neighbor tie is within reach of the
/// finite-difference step.
pub fn gradient_rel_error(x: &PointCloud, y: &PointCloud, v: ChamferVariant, h: f64) -> Option<f64> {
    let near_tie = |a: &PointCloud, b: &PointCloud| {
        a.points().iter().any(|p| {
            let mut d: Vec<f64> = b.points().iter().map(|q| crate::geom::sq_dist(p, q).sqrt()).collect();
            d.sort_by(f64::total_cmp);
            d.len() > 1 && d[1] - d[0] < 10.0 * h
        })
    };
    if near_tie(x, y) || near_tie(y, x) {
        return None;
    }
    let g = metrics::chamfer_grad(x, y, v).ok()?;
    let fd = reference::chamfer_grad_fd(x, y, v, h);
    let mut worst: f64 = 0.0;
    for (a, b) in g.iter().flatten().zip(fd.iter().flatten()) {
        let scale = a.abs().max(b.abs()).max(1e-8);
        worst = worst.max((a - b).abs() / scale);
    }
    Some(worst)
}

fn gradient_check() -> CheckResult {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 {
        let x = uniform_cube(32, 0.5, 500 + seed);
        let y = uniform_cube(32, 0.5, 900 + seed);
        seed += 1;
        for v in ChamferVariant::ALL {
            if let Some(e) = gradient_rel_error(&x, &y, v, 1e-5) {
                ensure(e <= 1e-4, || format!("seed {seed}: {v} relative error {e}"))?;
                checked += 1;
            }
        }
    }
    Ok(())
}

fn rigid(p: &[f64; 3]) -> [f64; 3] {
    let (s, c) = (0.7f64.sin(), 0.7f64.cos());
    // Rotation about z, then about x, then a translation.
    let a = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
    let b = [a[0], c * a[1] - s * a[2], s * a[1] + c * a[2]];
    [b[0] + 0.3, b[1] - 1.1, b[2] + 2.0]
}

fn metric_identities() -> CheckResult {
    let x = uniform_cube(200, 0.5, 1);
    let y = uniform_cube(150, 0.5, 2);
    for v in ChamferVariant::ALL {
        ensure(ok(metrics::chamfer(&x, &x, v))? == 0.0, || format!("{v}(X, X) != 0"))?;
        let (a, b) = (ok(metrics::chamfer(&x, &y, v))?, ok(metrics::chamfer(&y, &x, v))?);
        ensure(close(a, b, 1e-12), || format!("{v} not symmetric"))?;
    }
    ensure(ok(metrics::f1_score(&x, &x, 0.01))? == 1.0, || "f1(X, X) != 1".into())?;
    ensure(ok(metrics::dcd(&x, &x, 1000.0))? == 0.0, || "dcd(X, X) != 0".into())?;
    let (rx, ry) = (ok(x.map(rigid))?, ok(y.map(rigid))?);
    for v in ChamferVariant::ALL {
        let (a, b) = (ok(metrics::chamfer(&x, &y, v))?, ok(metrics::chamfer(&rx, &ry, v))?);
        ensure(close(a, b, 1e-9), || format!("{v} not rigid-invariant: {a} vs {b}"))?;
    }
    let (a, b) = (ok(metrics::dcd(&x, &y, 1000.0))?, ok(metrics::dcd(&rx, &ry, 1000.0))?);
    ensure(close(a, b, 1e-9), || "dcd not rigid-invariant".into())?;
    let (a, b) = (
        ok(metrics::f1_score(&x, &y, 0.05))?,
        ok(metrics::f1_score(&rx, &ry, 0.05))?,
    );
    ensure(close(a, b, 1e-9), || "f1 not rigid-invariant".into())?;
    let s = 2.5;
    let (sx, sy) = (ok(x.map(|p| p.map(|v| v * s)))?, ok(y.map(|p| p.map(|v| v * s)))?);
    let e = ok(metrics::chamfer(&x, &y, ChamferVariant::L1Sum))?;
    let l2 = ok(metrics::chamfer(&x, &y, ChamferVariant::L2Squared))?;
    ensure(
        close(ok(metrics::chamfer(&sx, &sy, ChamferVariant::L1Sum))?, s * e, 1e-9),
        || "l1-sum scale".into(),
    )?;
    ensure(
        close(
            ok(metrics::chamfer(&sx, &sy, ChamferVariant::L2Squared))?,
            s * s * l2,
            1e-9,
        ),
        || "l2-squared scale".into(),
    )?;
    let mut last = 0.0;
    for tau in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let f = ok(metrics::f1_score(&x, &y, tau))?;
        ensure(f >= last, || "f1 not monotone in tau".into())?;
        last = f;
    }
    Ok(())
}

fn toy_fit_basics() -> CheckResult {
    let (x0, target) = metrics::fit_demo_inputs(64, 1);
    let (_, curve) = ok(metrics::toy_fit(&target, &target, 10, 0.05))?;
    ensure(curve.iter().all(|&l| l == 0.0), || "fixed point moved".into())?;
    let (_, curve) = ok(metrics::toy_fit(&x0, &target, 100, 0.05))?;
    ensure(curve.iter().all(|&l| l >= 0.0), || "negative loss".into())?;
    ensure(curve[100] < curve[0], || "descent did not reduce the loss".into())
}

fn shape_contracts() -> CheckResult {
    let (p, w) = tiny()?;
    let input = object_surface(256, 8);
    for letter in ['F', 'A', 'G', 'H', 'I', 'J'] {
        let c = ok(complete(&input, &p, &w, &ok(Ablation::variant(letter))?))?;
        let sizes = [
            c.global.p_c.len(),
            c.global.p_0.len(),
            c.steps[0].points.len(),
            c.output().len(),
        ];
        let [n0, n1, n2] = p.stage_sizes();
        ensure(sizes == [n0, n0, n1, n2], || {
            format!("variant {letter}: sizes {sizes:?}")
        })?;
    }
    Ok(())
}

fn determinism() -> CheckResult {
    let (p, w) = tiny()?;
    let input = object_surface(256, 9);
    let a = ok(complete(&input, &p, &w, &Ablation::default()))?;
    let b = ok(complete(&input, &p, &w, &Ablation::default()))?;
    ensure(encode_pcb(a.output()) == encode_pcb(b.output()), || {
        "two runs differ".into()
    })?;
    let w2 = ok(init_weights(&p, 17))?;
    ensure(ok(w.encode())? == ok(w2.encode())?, || {
        "weight init not reproducible".into()
    })
}
