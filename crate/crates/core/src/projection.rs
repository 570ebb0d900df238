//! Depth-map rendering of point clouds and back-projection.
//!
//! Camera model: pinhole, square image, principal axis from the viewpoint
//! position toward its target. Up is +Y unless the view axis is parallel to
//! Y, in which case up is +Z. Image rows grow downward. Depth is the camera
//! space z (distance along the principal axis); background pixels hold 0.
//!
//! Each visible point splats a `(2r+1)²` pixel block; overlapping splats
//! keep the smallest depth.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Viewpoint};
use crate::nn::Rng;

pub const DMB_MAGIC: &[u8; 4] = b"DMB1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionParams {
    pub resolution: usize,
    pub camera_distance: f64,
    pub densify_radius: usize,
    pub fov_degrees: f64,
}

impl ProjectionParams {
    pub fn new(resolution: usize, camera_distance: f64, densify_radius: usize, fov_degrees: f64) -> Result<Self> {
        let p = ProjectionParams {
            resolution,
            camera_distance,
            densify_radius,
            fov_degrees,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::invalid(format!("resolution {} is below 16", self.resolution)));
        }
        if self.densify_radius > 4 {
            return Err(Error::invalid(format!(
                "densify radius {} exceeds 4",
                self.densify_radius
            )));
        }
        if !(self.camera_distance > 0.0 && self.camera_distance.is_finite()) {
            return Err(Error::invalid("camera distance must be positive"));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(Error::invalid("field of view must lie in (0, 180) degrees"));
        }
        Ok(())
    }

    fn focal(&self) -> f64 {
        (self.resolution as f64 / 2.0) / (self.fov_degrees.to_radians() / 2.0).tan()
    }

    /// Worst-case distance between a back-projected pixel center and the
    /// point that produced it, for points no deeper than twice the camera
    /// distance: one full pixel diagonal at the camera distance.
    pub fn pixel_footprint_bound(&self) -> f64 {
        self.camera_distance * (self.fov_degrees.to_radians() / 2.0).tan() * 2.0 / self.resolution as f64
            * std::f64::consts::SQRT_2
    }
}

/// Cameras on the positive axes at `distance`, looking at the origin.
pub fn orthogonal_viewpoints(distance: f64) -> Result<[Viewpoint; 3]> {
    Ok([
        Viewpoint::toward_origin([distance, 0.0, 0.0])?,
        Viewpoint::toward_origin([0.0, distance, 0.0])?,
        Viewpoint::toward_origin([0.0, 0.0, distance])?,
    ])
}

/// The first `n` of: +X, +Y, +Z, -X, -Y, -Z cameras.
pub fn axis_viewpoints(n: usize, distance: f64) -> Result<Vec<Viewpoint>> {
    if n == 0 || n > 6 {
        return Err(Error::invalid(format!("view count {n} must lie in 1..=6")));
    }
    (0..n)
        .map(|i| {
            let mut p = [0.0; 3];
            p[i % 3] = if i < 3 { distance } else { -distance };
            Viewpoint::toward_origin(p)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Camera {
    origin: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    forward: [f64; 3],
    focal: f64,
    center: f64,
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = dot(&a, &a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    fn new(vp: &Viewpoint, params: &ProjectionParams) -> Self {
        let forward = normalized(sub(&vp.look_at, &vp.position));
        let hint = if forward[0] == 0.0 && forward[2] == 0.0 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let right = normalized(cross(&forward, &hint));
        let up = cross(&right, &forward);
        Camera {
            origin: vp.position,
            right,
            up,
            forward,
            focal: params.focal(),
            center: params.resolution as f64 / 2.0,
        }
    }

    /// `(column, row, depth)` in continuous pixel coordinates.
    fn project(&self, p: &[f64; 3]) -> Option<(f64, f64, f64)> {
        let rel = sub(p, &self.origin);
        let z = dot(&rel, &self.forward);
        if z <= 0.0 {
            return None;
        }
        let u = self.center + self.focal * dot(&rel, &self.right) / z;
        let v = self.center - self.focal * dot(&rel, &self.up) / z;
        Some((u, v, z))
    }

    fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        let xc = (u - self.center) * z / self.focal;
        let yc = (self.center - v) * z / self.focal;
        std::array::from_fn(|a| self.origin[a] + xc * self.right[a] + yc * self.up[a] + z * self.forward[a])
    }
}

/// `height × width` grid of depths (row-major, 0 = background) with the
/// viewpoint that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub viewpoint: Viewpoint,
}

impl DepthMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.width + col]
    }

    pub fn nonzero_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn max_depth(&self) -> f32 {
        self.depth.iter().copied().fold(0.0, f32::max)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.depth.len() * 4);
        out.extend_from_slice(DMB_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for c in self.viewpoint.position.iter().chain(&self.viewpoint.look_at) {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        for d in &self.depth {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != DMB_MAGIC {
            return Err(Error::format(0, "missing DMB1 magic"));
        }
        if bytes.len() < 36 {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (height, width) = (u32_at(4), u32_at(8));
        let pos: [f64; 3] = std::array::from_fn(|i| f32_at(12 + 4 * i) as f64);
        let look: [f64; 3] = std::array::from_fn(|i| f32_at(24 + 4 * i) as f64);
        let viewpoint = Viewpoint::new(pos, look).map_err(|e| Error::format(12, e.to_string()))?;
        let need = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(36))
            .ok_or_else(|| Error::format(4, "image dimensions overflow"))?;
        if bytes.len() != need {
            return Err(Error::format(
                bytes.len().min(need) as u64,
                format!("expected {need} bytes, found {}", bytes.len()),
            ));
        }
        let mut depth = Vec::with_capacity(height * width);
        for (i, c) in bytes[36..].chunks_exact(4).enumerate() {
            let d = f32::from_le_bytes(c.try_into().unwrap());
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::format(
                    (36 + 4 * i) as u64,
                    "depth must be finite and non-negative",
                ));
            }
            depth.push(d);
        }
        Ok(DepthMap {
            height,
            width,
            depth,
            viewpoint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        DepthMap::decode(&fs::read(path)?)
    }

    /// 16-bit binary PGM, depths scaled linearly so the maximum maps to
    /// 65535 and background stays 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height).unwrap();
        let max = self.max_depth();
        for &d in &self.depth {
            let v = if max > 0.0 {
                ((d / max) * 65535.0).round() as u16
            } else {
                0
            };
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }
}

/// Renders `cloud` from `vp` into a z-buffered, splatted depth map. Points
/// behind the camera or outside the image are dropped.
pub fn project_depth(cloud: &PointCloud, vp: &Viewpoint, params: &ProjectionParams) -> Result<DepthMap> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::invalid("cannot project an empty point cloud"));
    }
    let res = params.resolution;
    let cam = Camera::new(vp, params);
    let r = params.densify_radius as isize;
    let mut depth = vec![0.0f32; res * res];
    let mut any = false;
    for p in cloud.points() {
        let Some((u, v, z)) = cam.project(p) else { continue };
        if !(u >= 0.0 && u < res as f64 && v >= 0.0 && v < res as f64) {
            continue;
        }
        any = true;
        let (col, row) = (u.floor() as isize, v.floor() as isize);
        let z = z as f32;
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (row + dy, col + dx);
                if y < 0 || x < 0 || y >= res as isize || x >= res as isize {
                    continue;
                }
                let cell = &mut depth[y as usize * res + x as usize];
                if *cell == 0.0 || z < *cell {
                    *cell = z;
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyProjection);
    }
    Ok(DepthMap {
        height: res,
        width: res,
        depth,
        viewpoint: *vp,
    })
}

/// Optional per-point isotropic Gaussian perturbation for back-projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    pub sigma: f64,
    pub seed: u64,
}

/// One point per non-zero pixel, in row-major pixel order, unprojected
/// through the pixel center.
pub fn backproject(dm: &DepthMap, params: &ProjectionParams, noise: Option<Noise>) -> Result<PointCloud> {
    params.validate()?;
    if dm.height != params.resolution || dm.width != params.resolution {
        return Err(Error::invalid(format!(
            "depth map is {}x{}, params expect {}x{}",
            dm.height, dm.width, params.resolution, params.resolution
        )));
    }
    if dm.nonzero_count() == 0 {
        return Err(Error::invalid("depth map has no foreground pixels"));
    }
    let cam = Camera::new(&dm.viewpoint, params);
    let mut rng = noise.map(|n| Rng::new(n.seed));
    let sigma = noise.map_or(0.0, |n| n.sigma);
    let mut pts = Vec::with_capacity(dm.nonzero_count());
    for row in 0..dm.height {
        for col in 0..dm.width {
            let d = dm.get(row, col);
            if d <= 0.0 {
                continue;
            }
            let mut p = cam.unproject(col as f64 + 0.5, row as f64 + 0.5, d as f64);
            if let Some(rng) = rng.as_mut() {
                for c in p.iter_mut() {
                    *c += sigma * rng.gaussian();
                }
            }
            pts.push(p);
        }
    }
    PointCloud::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(res: usize, r: usize) -> ProjectionParams {
        ProjectionParams::new(res, 0.7, r, 60.0).unwrap()
    }

    fn vp_z() -> Viewpoint {
        Viewpoint::toward_origin([0.0, 0.0, 0.7]).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(ProjectionParams::new(8, 0.7, 1, 60.0).is_err());
        assert!(ProjectionParams::new(64, 0.7, 5, 60.0).is_err());
        assert!(ProjectionParams::new(64, 0.0, 1, 60.0).is_err());
        assert!(ProjectionParams::new(64, 0.7, 1, 180.0).is_err());
    }

    #[test]
    fn orthogonal_views() {
        let v = orthogonal_viewpoints(1.5).unwrap();
        assert_eq!(v[0].position, [1.5, 0.0, 0.0]);
        assert_eq!(v[1].position, [0.0, 1.5, 0.0]);
        assert_eq!(v[2].position, [0.0, 0.0, 1.5]);
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(&v[i].position, &v[j].position);
                assert_eq!(d == 0.0, i != j);
            }
        }
        assert_eq!(axis_viewpoints(6, 1.0).unwrap()[4].position, [0.0, -1.0, 0.0]);
        assert!(axis_viewpoints(7, 1.0).is_err());
    }

    #[test]
    fn on_axis_point_hits_center() {
        let cloud = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let dm = project_depth(&cloud, &vp_z(), &params(224, 0)).unwrap();
        assert_eq!(dm.nonzero_count(), 1);
        assert_eq!(dm.get(112, 112), 0.7f32);
        let dm1 = project_depth(&cloud, &vp_z(), &params(224, 1)).unwrap();
        assert_eq!(dm1.nonzero_count(), 9);
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(dm1.get(111 + dy, 111 + dx), 0.7f32);
            }
        }
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let cloud = PointCloud::new(vec![[0.0; 3], [0.0, 0.0, 0.2]]).unwrap();
        let dm = project_depth(&cloud, &vp_z(), &params(224, 0)).unwrap();
        assert_eq!(dm.get(112, 112), 0.5f32);
        let rev = PointCloud::new(vec![[0.0, 0.0, 0.2], [0.0; 3]]).unwrap();
        assert_eq!(project_depth(&rev, &vp_z(), &params(224, 0)).unwrap(), dm);
    }

    #[test]
    fn image_orientation() {
        // +X lands right of center, +Y above it.
        let p = params(64, 0);
        let right = project_depth(&PointCloud::new(vec![[0.1, 0.0, 0.0]]).unwrap(), &vp_z(), &p).unwrap();
        let idx = right.depth.iter().position(|&d| d > 0.0).unwrap();
        assert!(idx % 64 > 32 && idx / 64 == 32);
        let up = project_depth(&PointCloud::new(vec![[0.0, 0.1, 0.0]]).unwrap(), &vp_z(), &p).unwrap();
        let idx = up.depth.iter().position(|&d| d > 0.0).unwrap();
        assert!(idx / 64 < 32 && idx % 64 == 32);
    }

    #[test]
    fn y_axis_camera_uses_z_up() {
        let vp = Viewpoint::toward_origin([0.0, 0.7, 0.0]).unwrap();
        let cam = Camera::new(&vp, &params(64, 0));
        assert_eq!(cam.up, [0.0, 0.0, 1.0]);
        let below = Viewpoint::toward_origin([0.0, -0.7, 0.0]).unwrap();
        let cam = Camera::new(&below, &params(64, 0));
        assert!(cam.right.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn out_of_frustum_is_error() {
        let behind = PointCloud::new(vec![[0.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            project_depth(&behind, &vp_z(), &params(64, 0)),
            Err(Error::EmptyProjection)
        ));
        let wide = PointCloud::new(vec![[5.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            project_depth(&wide, &vp_z(), &params(64, 0)),
            Err(Error::EmptyProjection)
        ));
    }

    #[test]
    fn axial_translation_shifts_depth() {
        let p = ProjectionParams::new(64, 1.0, 0, 60.0).unwrap();
        let vp = Viewpoint::toward_origin([0.0, 0.0, 1.0]).unwrap();
        let cloud = PointCloud::new(vec![[0.0, 0.0, -0.25]]).unwrap();
        let moved = PointCloud::new(vec![[0.0, 0.0, -0.125]]).unwrap();
        let a = project_depth(&cloud, &vp, &p).unwrap();
        let b = project_depth(&moved, &vp, &p).unwrap();
        assert_eq!(a.get(32, 32) - b.get(32, 32), 0.125);
    }

    #[test]
    fn backproject_center_pixel() {
        let p = params(224, 0);
        let mut depth = vec![0.0f32; 224 * 224];
        depth[112 * 224 + 112] = 0.7;
        let dm = DepthMap {
            height: 224,
            width: 224,
            depth,
            viewpoint: vp_z(),
        };
        let pts = backproject(&dm, &p, None).unwrap();
        assert_eq!(pts.len(), 1);
        let d = pts.points()[0].iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!(d <= p.pixel_footprint_bound(), "{d}");
        assert_eq!(backproject(&dm, &p, None).unwrap(), pts);
        let noisy = Some(Noise { sigma: 0.01, seed: 3 });
        assert_eq!(
            backproject(&dm, &p, noisy).unwrap(),
            backproject(&dm, &p, noisy).unwrap()
        );
        assert_ne!(backproject(&dm, &p, noisy).unwrap(), pts);
    }

    #[test]
    fn backproject_rejects_empty() {
        let dm = DepthMap {
            height: 16,
            width: 16,
            depth: vec![0.0; 256],
            viewpoint: vp_z(),
        };
        assert!(backproject(&dm, &params(16, 0), None).is_err());
    }

    #[test]
    fn dmb_round_trip_and_corruption() {
        let cloud = PointCloud::new(vec![[0.0; 3], [0.1, -0.1, 0.05]]).unwrap();
        let dm = project_depth(&cloud, &vp_z(), &params(32, 1)).unwrap();
        let bytes = dm.encode();
        assert_eq!(bytes.len(), 36 + 32 * 32 * 4);
        let back = DepthMap::decode(&bytes).unwrap();
        assert_eq!(back.depth, dm.depth);
        assert_eq!(back.encode(), bytes);
        let mut bad = bytes.clone();
        bad[3] = b'0';
        assert!(matches!(DepthMap::decode(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(DepthMap::decode(&bytes[..100]).is_err());
    }

    #[test]
    fn pgm_header_and_scaling() {
        let cloud = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let dm = project_depth(&cloud, &vp_z(), &params(16, 0)).unwrap();
        let pgm = dm.to_pgm();
        let header = b"P5\n16 16\n65535\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 16 * 16 * 2);
        let at = header.len() + 2 * (8 * 16 + 8);
        assert_eq!(&pgm[at..at + 2], &[0xff, 0xff]);
    }
}
