//! End-to-end completion: global stage, two refinement steps, and the
//! on-disk trace of every intermediate.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::io::encode_pcb;
use crate::geom::PointCloud;
use crate::nn::{FeatureMatrix, TensorSpec, WeightStore};
use crate::profile::Profile;
use crate::sdg::{self, PathMode, SdgOptions, SdgOutput};
use crate::svfnet::{self, SvfOutput};

/// Every tensor a profile's model reads, in initialization order.
pub fn model_specs(p: &Profile) -> Vec<TensorSpec> {
    let mut v = svfnet::tensor_specs(p);
    v.extend(sdg::tensor_specs(p));
    v
}

/// Fresh seeded weights for `p`.
pub fn init_weights(p: &Profile, seed: u64) -> Result<WeightStore> {
    p.validate()?;
    WeightStore::initialize(&model_specs(p), &p.name, seed)
}

/// Structural ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Ablation {
    /// Global descriptor from the point branch alone.
    pub no_projection: bool,
    pub sdg: SdgOptions,
}

impl Ablation {
    /// Variants by table letter: `A` without projection, `G` without the
    /// incompleteness term, `H` structure path only, `I` alignment path
    /// only, `J` fixed α = 0.5. Any other letter is the full model.
    pub fn variant(letter: char) -> Result<Ablation> {
        let mut a = Ablation::default();
        match letter.to_ascii_uppercase() {
            'A' => a.no_projection = true,
            'G' => a.sdg.zero_incompleteness = true,
            'H' => a.sdg.path = PathMode::StructureOnly,
            'I' => a.sdg.path = PathMode::AlignmentOnly,
            'J' => a.sdg.path = PathMode::Fixed(0.5),
            'F' => {}
            other => return Err(Error::invalid(format!("unknown ablation variant `{other}`"))),
        }
        Ok(a)
    }
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub global: SvfOutput,
    pub steps: [SdgOutput; 2],
}

impl Completion {
    /// The final dense cloud `P_2`.
    pub fn output(&self) -> &PointCloud {
        &self.steps[1].points
    }

    pub fn trace(&self) -> CompletionTrace {
        CompletionTrace {
            p_c: self.global.p_c.clone(),
            p_0: self.global.p_0.clone(),
            p_1: self.steps[0].points.clone(),
            p_2: self.steps[1].points.clone(),
            alpha: [self.steps[0].alpha.clone(), self.steps[1].alpha.clone()],
            attention: [self.steps[0].attention.clone(), self.steps[1].attention.clone()],
        }
    }
}

/// Runs the whole model. The weights must match the profile's tensor list.
pub fn complete(p_in: &PointCloud, profile: &Profile, w: &WeightStore, ablation: &Ablation) -> Result<Completion> {
    profile.validate()?;
    w.check_specs(&model_specs(profile))?;
    if p_in.len() < profile.min_input_points() {
        return Err(Error::invalid(format!(
            "profile `{}` needs at least {} input points, got {}",
            profile.name,
            profile.min_input_points(),
            p_in.len()
        )));
    }
    let global = svfnet::svfnet_forward(p_in, profile, w, !ablation.no_projection)?;
    let steps = sdg::refine_stack(&global.p_0, p_in, &global.f_g, profile, &ablation.sdg, w)?;
    Ok(Completion { global, steps })
}

/// Coarse-to-fine intermediates as written by `complete --trace`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionTrace {
    pub p_c: PointCloud,
    pub p_0: PointCloud,
    pub p_1: PointCloud,
    pub p_2: PointCloud,
    pub alpha: [Option<Vec<f64>>; 2],
    pub attention: [Option<FeatureMatrix>; 2],
}

fn f32_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

impl CompletionTrace {
    /// Writes `p_{c,0,1,2}.pcb`, `alpha_{1,2}.f32` and `attn_{1,2}.f32`
    /// (raw little-endian f32) with `attn_{1,2}.meta` holding `rows cols`.
    /// Gates and maps absent under an ablation are not written.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, cloud) in [
            ("p_c", &self.p_c),
            ("p_0", &self.p_0),
            ("p_1", &self.p_1),
            ("p_2", &self.p_2),
        ] {
            fs::write(dir.join(format!("{name}.pcb")), encode_pcb(cloud))?;
        }
        for l in 0..2 {
            if let Some(a) = &self.alpha[l] {
                fs::write(dir.join(format!("alpha_{}.f32", l + 1)), f32_bytes(a))?;
            }
            if let Some(m) = &self.attention[l] {
                fs::write(dir.join(format!("attn_{}.f32", l + 1)), f32_bytes(m.data()))?;
                fs::write(
                    dir.join(format!("attn_{}.meta", l + 1)),
                    format!("{} {}\n", m.rows(), m.cols()),
                )?;
            }
        }
        Ok(())
    }
}

/// Reads a raw little-endian f32 file.
pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            bytes.len() as u64 - bytes.len() as u64 % 4,
            "truncated f32 value",
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Rng;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = Rng::new(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [0; 3].map(|_: u8| rng.uniform_in(-0.45, 0.45)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tiny_profile_end_to_end() {
        let p = Profile::builtin("tiny-test").unwrap();
        let w = init_weights(&p, 11).unwrap();
        let input = cloud(256, 1);
        let c = complete(&input, &p, &w, &Ablation::default()).unwrap();
        assert_eq!(
            [
                c.global.p_c.len(),
                c.global.p_0.len(),
                c.steps[0].points.len(),
                c.output().len()
            ],
            [64, 64, 128, 256]
        );
        let again = complete(&input, &p, &w, &Ablation::default()).unwrap();
        assert_eq!(c.output(), again.output());
        assert!(complete(&cloud(32, 1), &p, &w, &Ablation::default()).is_err());
    }

    #[test]
    fn weights_must_match_profile() {
        let p = Profile::builtin("tiny-test").unwrap();
        let mut other = p.clone();
        other.channels = 16;
        other.sdg_dims = [24, 16];
        other.coarse_dim = 16;
        let w = init_weights(&other, 1).unwrap();
        assert!(complete(&cloud(256, 2), &p, &w, &Ablation::default()).is_err());
    }

    #[test]
    fn every_variant_runs() {
        let p = Profile::builtin("tiny-test").unwrap();
        let w = init_weights(&p, 3).unwrap();
        let input = cloud(256, 4);
        for v in ['A', 'G', 'H', 'I', 'J'] {
            let c = complete(&input, &p, &w, &Ablation::variant(v).unwrap()).unwrap();
            assert_eq!(c.output().len(), 256, "variant {v}");
        }
        assert!(Ablation::variant('Z').is_err());
    }

    #[test]
    fn trace_layout() {
        let p = Profile::builtin("tiny-test").unwrap();
        let w = init_weights(&p, 5).unwrap();
        let c = complete(&cloud(256, 6), &p, &w, &Ablation::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.trace().write_dir(dir.path()).unwrap();
        for f in [
            "p_c.pcb",
            "p_0.pcb",
            "p_1.pcb",
            "p_2.pcb",
            "alpha_1.f32",
            "alpha_2.f32",
            "attn_1.f32",
            "attn_2.f32",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert_eq!(fs::read_to_string(dir.path().join("attn_2.meta")).unwrap(), "128 64\n");
        assert_eq!(read_f32_file(&dir.path().join("alpha_1.f32")).unwrap().len(), 64);
        assert_eq!(read_f32_file(&dir.path().join("attn_2.f32")).unwrap().len(), 128 * 64);
    }
}
