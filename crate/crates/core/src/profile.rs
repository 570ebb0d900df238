//! Model and protocol configuration.
//!
//! Three built-in profiles exist: `pcn` and `snet55` follow the published
//! layer sizes, `tiny-test` shrinks everything so the whole pipeline runs
//! in milliseconds. A profile can be adjusted with a line-oriented
//! `key = value` file (`#` starts a comment).
//!
//! Setting `channels` also rescales the derived widths (`sdg_dims` to
//! `[3C/2, C]` and `coarse_dim` to `min(128, C)`) unless those keys are set
//! explicitly in the same file.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::projection::ProjectionParams;

/// Neighbors per set-abstraction group.
pub const SA_K: usize = 16;
/// Neighbors of the two edge-convolution layers.
pub const EDGE_K: [usize; 2] = [16, 8];
/// Per-point width of the upsampled offset feature.
pub const OFFSET_DIM: usize = 128;
/// Width of the point-branch global feature.
pub const POINT_FEATURE_DIM: usize = 256;
/// Hidden widths of the offset regression head, after `OFFSET_DIM`.
pub const OFFSET_HEAD: [usize; 2] = [64, 3];
/// Hidden width of the path-selection gate.
pub const GATE_HIDDEN: usize = 64;
/// Incompleteness scaling coefficient.
pub const DEFAULT_GAMMA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub name: String,
    pub n_input: usize,
    /// Points in the coarse cloud `P_c` and in the merged `P_0`.
    pub n0: usize,
    pub rates: [usize; 2],
    pub n_views: usize,
    pub resolution: usize,
    pub camera_distance: f64,
    pub fov_degrees: f64,
    pub densify_radius: usize,
    /// View-feature and global-descriptor width.
    pub channels: usize,
    /// Attention width of each refinement step.
    pub sdg_dims: [usize; 2],
    /// Token width of the coarse decoder.
    pub coarse_dim: usize,
    /// Self-attention blocks in each refinement decoder.
    pub decoder_depth: usize,
    pub gamma: f64,
    /// FPS sizes of the two set-abstraction stages.
    pub sa_points: [usize; 2],
    /// FPS size between the two edge-convolution layers.
    pub edge_points: usize,
    pub seed: u64,
}

pub const BUILTIN_PROFILES: [&str; 3] = ["pcn", "snet55", "tiny-test"];

impl Profile {
    pub fn builtin(name: &str) -> Result<Profile> {
        let p = match name {
            "pcn" => Profile {
                name: "pcn".into(),
                n_input: 2048,
                n0: 512,
                rates: [4, 8],
                n_views: 3,
                resolution: 224,
                camera_distance: 0.7,
                fov_degrees: 60.0,
                densify_radius: 1,
                channels: 512,
                sdg_dims: [768, 512],
                coarse_dim: 128,
                decoder_depth: 2,
                gamma: DEFAULT_GAMMA,
                sa_points: [512, 128],
                edge_points: 512,
                seed: 0,
            },
            "snet55" => Profile {
                name: "snet55".into(),
                n0: 1024,
                rates: [2, 4],
                camera_distance: 1.5,
                decoder_depth: 1,
                ..Profile::builtin("pcn")?
            },
            "tiny-test" => Profile {
                name: "tiny-test".into(),
                n_input: 256,
                n0: 64,
                rates: [2, 2],
                n_views: 3,
                resolution: 64,
                camera_distance: 0.7,
                fov_degrees: 60.0,
                densify_radius: 1,
                channels: 32,
                sdg_dims: [48, 32],
                coarse_dim: 32,
                decoder_depth: 1,
                gamma: DEFAULT_GAMMA,
                sa_points: [64, 32],
                edge_points: 64,
                seed: 0,
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown profile `{other}` (expected one of {})",
                    BUILTIN_PROFILES.join(", ")
                )))
            }
        };
        Ok(p)
    }

    pub fn projection_params(&self) -> Result<ProjectionParams> {
        ProjectionParams::new(
            self.resolution,
            self.camera_distance,
            self.densify_radius,
            self.fov_degrees,
        )
    }

    /// Point counts `[|P_0|, |P_1|, |P_2|]`.
    pub fn stage_sizes(&self) -> [usize; 3] {
        let p1 = self.n0 * self.rates[0];
        [self.n0, p1, p1 * self.rates[1]]
    }

    /// Smallest partial input the encoders accept.
    pub fn min_input_points(&self) -> usize {
        self.sa_points[0].max(self.edge_points)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("profile `{}`: {m}", self.name)));
        if self.n0 == 0 || self.rates.contains(&0) {
            return bad("n0 and rates must be positive".into());
        }
        if self.n_views == 0 || self.n_views > 6 {
            return bad(format!("n_views {} must lie in 1..=6", self.n_views));
        }
        if !self.resolution.is_multiple_of(32) {
            return bad(format!("resolution {} is not divisible by 32", self.resolution));
        }
        self.projection_params()?;
        if self.channels == 0 || self.coarse_dim == 0 {
            return bad("channels and coarse_dim must be positive".into());
        }
        if self.sdg_dims.iter().any(|&d| d < 2 || d % 2 != 0) {
            return bad(format!("sdg_dims {:?} must be even and at least 2", self.sdg_dims));
        }
        if self.decoder_depth == 0 {
            return bad("decoder_depth must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive".into());
        }
        if self.sa_points[1] == 0 || self.sa_points[1] > self.sa_points[0] {
            return bad(format!(
                "sa_points {:?} must be decreasing and positive",
                self.sa_points
            ));
        }
        if self.edge_points < EDGE_K[1] {
            return bad(format!("edge_points must be at least {}", EDGE_K[1]));
        }
        if self.n_input < self.min_input_points() {
            return bad(format!("n_input {} is below the encoder sample sizes", self.n_input));
        }
        Ok(())
    }

    /// Applies `key = value` overrides.
    pub fn apply_config(&mut self, text: &str) -> Result<()> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            entries.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        if let Some((line, v)) = entries.get("profile") {
            let keep = self.clone();
            *self = Profile::builtin(v).map_err(|e| Error::Parse {
                line: *line,
                message: e.to_string(),
            })?;
            // Seed survives a base switch unless set again below.
            self.seed = keep.seed;
        }
        if let Some((line, v)) = entries.get("channels") {
            let c: usize = parse_value(*line, "channels", v)?;
            self.channels = c;
            self.sdg_dims = [c * 3 / 2, c];
            self.coarse_dim = c.min(128);
        }
        for (key, (line, v)) in &entries {
            self.set(key, v).map_err(|m| Error::Parse {
                line: *line,
                message: m,
            })?;
        }
        self.validate()
    }

    /// Sets one key; `channels` here only sets the width itself.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        fn pair(key: &str, v: &str) -> std::result::Result<[usize; 2], String> {
            let parts: Vec<&str> = v
                .trim_matches(|c| c == '[' || c == ']' || c == '{' || c == '}')
                .split(',')
                .map(str::trim)
                .collect();
            match parts[..] {
                [a, b] => Ok([p(key, a)?, p(key, b)?]),
                _ => Err(format!("`{key}` expects two comma-separated values, found `{v}`")),
            }
        }
        match key {
            "profile" => {}
            "name" => self.name = v.to_string(),
            "n_input" => self.n_input = p(key, v)?,
            "n0" => self.n0 = p(key, v)?,
            "rates" => self.rates = pair(key, v)?,
            "n_views" => self.n_views = p(key, v)?,
            "resolution" => self.resolution = p(key, v)?,
            "camera_distance" => self.camera_distance = p(key, v)?,
            "fov" | "fov_degrees" => self.fov_degrees = p(key, v)?,
            "densify_radius" => self.densify_radius = p(key, v)?,
            "channels" => self.channels = p(key, v)?,
            "sdg_dims" => self.sdg_dims = pair(key, v)?,
            "coarse_dim" => self.coarse_dim = p(key, v)?,
            "decoder_depth" => self.decoder_depth = p(key, v)?,
            "gamma" => self.gamma = p(key, v)?,
            "sa_points" => self.sa_points = pair(key, v)?,
            "edge_points" => self.edge_points = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            other => return Err(format!("unknown configuration key `{other}`")),
        }
        Ok(())
    }

    /// Full `key = value` rendering; `apply_config` on it reproduces `self`.
    pub fn to_config(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "n_input = {}", self.n_input);
        let _ = writeln!(s, "n0 = {}", self.n0);
        let _ = writeln!(s, "rates = {}, {}", self.rates[0], self.rates[1]);
        let _ = writeln!(s, "n_views = {}", self.n_views);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "camera_distance = {}", self.camera_distance);
        let _ = writeln!(s, "fov_degrees = {}", self.fov_degrees);
        let _ = writeln!(s, "densify_radius = {}", self.densify_radius);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "sdg_dims = {}, {}", self.sdg_dims[0], self.sdg_dims[1]);
        let _ = writeln!(s, "coarse_dim = {}", self.coarse_dim);
        let _ = writeln!(s, "decoder_depth = {}", self.decoder_depth);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "sa_points = {}, {}", self.sa_points[0], self.sa_points[1]);
        let _ = writeln!(s, "edge_points = {}", self.edge_points);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value `{v}` for `{key}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_values() {
        let pcn = Profile::builtin("pcn").unwrap();
        assert_eq!(
            (pcn.n_input, pcn.n0, pcn.rates, pcn.camera_distance),
            (2048, 512, [4, 8], 0.7)
        );
        assert_eq!(pcn.sdg_dims, [768, 512]);
        assert_eq!(pcn.decoder_depth, 2);
        assert_eq!(pcn.stage_sizes(), [512, 2048, 16384]);
        let s = Profile::builtin("snet55").unwrap();
        assert_eq!((s.n_input, s.n0, s.rates, s.camera_distance), (2048, 1024, [2, 4], 1.5));
        assert_eq!(s.decoder_depth, 1);
        assert_eq!(s.stage_sizes(), [1024, 2048, 8192]);
        let t = Profile::builtin("tiny-test").unwrap();
        assert_eq!(
            (t.n_input, t.n0, t.rates, t.resolution, t.channels),
            (256, 64, [2, 2], 64, 32)
        );
        for name in BUILTIN_PROFILES {
            Profile::builtin(name).unwrap().validate().unwrap();
        }
        assert!(Profile::builtin("kitti").is_err());
    }

    #[test]
    fn config_overrides_and_derived_widths() {
        let mut p = Profile::builtin("pcn").unwrap();
        p.apply_config("# reduced\nchannels = 32  # small\nseed = 9\n").unwrap();
        assert_eq!(p.channels, 32);
        assert_eq!(p.sdg_dims, [48, 32]);
        assert_eq!(p.coarse_dim, 32);
        assert_eq!(p.seed, 9);
        assert_eq!(p.n0, 512);
        p.apply_config("channels = 64\nsdg_dims = 20, 10\n").unwrap();
        assert_eq!(p.sdg_dims, [20, 10]);
        let mut q = Profile::builtin("tiny-test").unwrap();
        q.apply_config("profile = snet55\nchannels = 16").unwrap();
        assert_eq!((q.name.as_str(), q.n0, q.channels), ("snet55", 1024, 16));
    }

    #[test]
    fn config_errors() {
        let mut p = Profile::builtin("pcn").unwrap();
        assert!(matches!(p.apply_config("bogus = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(p.apply_config("\nn0 = x"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(p.apply_config("no equals sign"), Err(Error::Parse { .. })));
        assert!(p.clone().apply_config("resolution = 100").is_err());
        assert!(p.clone().apply_config("sdg_dims = 7, 8").is_err());
    }

    #[test]
    fn config_round_trip() {
        let mut p = Profile::builtin("snet55").unwrap();
        p.seed = 77;
        p.channels = 48;
        let mut q = Profile::builtin("tiny-test").unwrap();
        q.apply_config(&p.to_config()).unwrap();
        assert_eq!(p, q);
    }
}
