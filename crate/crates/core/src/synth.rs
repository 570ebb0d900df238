//! Deterministic synthetic clouds for demos, tests and the self-check.

use crate::geom::PointCloud;
use crate::nn::Rng;

/// `n` points uniform in `[-half, half]³`.
pub fn uniform_cube(n: usize, half: f64, seed: u64) -> PointCloud {
    let mut rng = Rng::new(seed);
    let pts = (0..n)
        .map(|_| [0; 3].map(|_: u8| rng.uniform_in(-half, half)))
        .collect();
    PointCloud::from_trusted(pts)
}

/// `n` points spread over the sphere of radius `r` on a Fibonacci lattice.
pub fn fibonacci_sphere(n: usize, r: f64) -> PointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let pts = (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            [r * rho * th.cos(), r * y, r * rho * th.sin()]
        })
        .collect();
    PointCloud::from_trusted(pts)
}

/// Random surface samples of a capsule-and-ring shape inside the unit
/// cube's `[-0.5, 0.5]³`: a stand-in for a complete object scan.
pub fn object_surface(n: usize, seed: u64) -> PointCloud {
    let mut rng = Rng::new(seed);
    let tau = std::f64::consts::TAU;
    let pts = (0..n)
        .map(|i| {
            let (u, v) = (rng.uniform(), rng.uniform());
            if i % 3 == 2 {
                // Ring around the capsule's waist.
                let (a, b) = (tau * u, tau * v);
                let r = 0.32 + 0.06 * b.cos();
                [r * a.cos(), 0.06 * b.sin() - 0.05, r * a.sin()]
            } else {
                // Capsule: cylinder of radius 0.18 along y with hemispherical caps.
                let a = tau * u;
                let t = v * 1.0 - 0.5;
                if t.abs() <= 0.25 {
                    [0.18 * a.cos(), t * 1.2, 0.18 * a.sin()]
                } else {
                    let phi = (t.abs() - 0.25) / 0.25 * std::f64::consts::FRAC_PI_2;
                    let s = t.signum();
                    [
                        0.18 * phi.cos() * a.cos(),
                        s * (0.3 + 0.18 * phi.sin()),
                        0.18 * phi.cos() * a.sin(),
                    ]
                }
            }
        })
        .collect();
    PointCloud::from_trusted(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_bounded_and_deterministic() {
        assert_eq!(uniform_cube(10, 0.5, 1), uniform_cube(10, 0.5, 1));
        assert!(uniform_cube(100, 0.5, 2)
            .points()
            .iter()
            .flatten()
            .all(|v| v.abs() <= 0.5));
        for p in fibonacci_sphere(50, 2.0).points() {
            assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 2.0).abs() < 1e-12);
        }
        let s = object_surface(3000, 3);
        assert_eq!(s, object_surface(3000, 3));
        assert!(s.points().iter().flatten().all(|v| v.abs() <= 0.5));
    }
}
