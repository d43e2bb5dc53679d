//! Phantom datasets on disk: volume pairs plus `manifest.json`.
//!
//! Sample `i` gets bin combination from a smooth weighted round-robin over
//! the nine (volume, smoothness) combinations and phantom seed
//! `derive_seed(seed, i)`. Even indices are training samples, odd indices
//! validation samples.

use crate::error::{data_err, LabError, Result};
use crate::volio;
use afl_core::phantom::{make_phantom, PhantomSpec, SmoothnessBin, VolumeBin};
use afl_core::rng::derive_seed;
use afl_core::{Dims, MaskVolume, Volume3D};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST: &str = "manifest.json";
pub const SPLIT_RULE: &str = "even index -> train, odd index -> val";

/// Relative weights of the bin combinations, indexed `[volume][smoothness]`
/// in `VolumeBin::ALL` / `SmoothnessBin::ALL` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix(pub [[f64; 3]; 3]);

impl Default for Mix {
    fn default() -> Self {
        Self([[1.0; 3]; 3])
    }
}

impl Mix {
    /// Parses nine comma-separated weights, volume-major.
    pub fn parse(s: &str) -> Result<Self> {
        let w: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LabError::Config(format!("mix `{s}`: {e}")))?;
        if w.len() != 9 {
            return Err(LabError::Config(format!("mix needs 9 weights, got {}", w.len())));
        }
        let mix = Self(std::array::from_fn(|v| std::array::from_fn(|s| w[v * 3 + s])));
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        let flat = self.0.iter().flatten();
        if flat.clone().any(|w| !w.is_finite() || *w < 0.0) || flat.sum::<f64>() <= 0.0 {
            return Err(LabError::Config("mix weights must be finite, >= 0, with a positive sum".into()));
        }
        Ok(())
    }

    /// Bin combination of each of `n` samples. Each step adds every weight
    /// to its running credit and picks the largest credit (lowest index on
    /// ties), which then pays back the total weight.
    pub fn assign(&self, n: usize) -> Vec<(VolumeBin, SmoothnessBin)> {
        let w: Vec<f64> = self.0.iter().flatten().copied().collect();
        let total: f64 = w.iter().sum();
        let mut credit = [0.0f64; 9];
        (0..n)
            .map(|_| {
                for (c, wi) in credit.iter_mut().zip(&w) {
                    *c += wi;
                }
                let mut best = 0;
                for k in 1..9 {
                    if credit[k] > credit[best] {
                        best = k;
                    }
                }
                credit[best] -= total;
                (VolumeBin::ALL[best / 3], SmoothnessBin::ALL[best % 3])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n: usize,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default)]
    pub mix: Mix,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_dims() -> [usize; 3] {
    [32, 32, 32]
}

fn default_noise() -> f64 {
    0.3
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n: 60, dims: default_dims(), mix: Mix::default(), noise_sigma: default_noise() }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(LabError::Config("dataset needs n >= 1".into()));
        }
        if self.dims.contains(&0) {
            return Err(LabError::Config("dataset dims must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(LabError::Config("noise_sigma must be finite and >= 0".into()));
        }
        self.mix.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn of_index(i: usize) -> Self {
        if i % 2 == 0 {
            Self::Train
        } else {
            Self::Val
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    /// Base names of the volume pairs, relative to the dataset directory.
    pub image: String,
    pub mask: String,
    pub volume_bin: VolumeBin,
    pub smoothness_bin: SmoothnessBin,
    pub seed: u64,
    pub realized_fg_fraction: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: DatasetSpec,
    pub split_rule: String,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| data_err(&path, e))
    }

    pub fn entry(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn sample_id(i: usize) -> String {
    format!("case_{i:04}")
}

/// Generates `spec.n` phantoms into `out` and writes the manifest.
pub fn make_dataset(out: &Path, spec: &DatasetSpec, seed: u64) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let [nz, ny, nx] = spec.dims;
    let mut samples = Vec::with_capacity(spec.n);
    for (i, (volume_bin, smoothness_bin)) in spec.mix.assign(spec.n).into_iter().enumerate() {
        let id = sample_id(i);
        let mut ps = PhantomSpec::new(Dims::new(nz, ny, nx), volume_bin, smoothness_bin, derive_seed(seed, i as u64));
        ps.noise_sigma = spec.noise_sigma;
        let phantom = make_phantom(&ps).map_err(|e| LabError::Config(format!("sample {id}: {e}")))?;
        let image = format!("{id}_image");
        let mask = format!("{id}_mask");
        volio::write_image(&phantom.image, &out.join(&image))?;
        volio::write_mask(&phantom.mask, &out.join(&mask))?;
        samples.push(SampleEntry {
            id,
            image,
            mask,
            volume_bin,
            smoothness_bin,
            seed: ps.seed,
            realized_fg_fraction: phantom.realized_fg_fraction,
            split: Split::of_index(i),
        });
    }
    let manifest = Manifest { seed, spec: spec.clone(), split_rule: SPLIT_RULE.to_string(), samples };
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| LabError::io(&path, e))?;
    Ok(manifest)
}

/// One sample loaded into memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub entry: SampleEntry,
    pub image: Volume3D,
    pub mask: MaskVolume,
}

pub fn load_samples(dir: &Path, manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .samples
        .iter()
        .map(|e| {
            let image = volio::read_image(&dir.join(&e.image))?;
            let mask = volio::read_mask(&dir.join(&e.mask))?;
            if image.dims() != mask.dims() {
                return Err(LabError::Data(format!("{}: image dims {} differ from mask dims {}", e.id, image.dims(), mask.dims())));
            }
            Ok(Sample { entry: e.clone(), image, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_mix_is_round_robin() {
        let bins = Mix::default().assign(18);
        for (i, (v, s)) in bins.iter().enumerate() {
            assert_eq!(*v, VolumeBin::ALL[(i % 9) / 3]);
            assert_eq!(*s, SmoothnessBin::ALL[i % 3]);
        }
    }

    #[test]
    fn weighted_mix_matches_proportions() {
        let mut w = [[0.0; 3]; 3];
        w[0][0] = 3.0;
        w[2][2] = 1.0;
        let bins = Mix(w).assign(40);
        let large = bins.iter().filter(|b| b.0 == VolumeBin::Large).count();
        assert_eq!(large, 30);
        assert!(bins.iter().all(|b| *b == (VolumeBin::Large, SmoothnessBin::Good) || *b == (VolumeBin::Small, SmoothnessBin::Poor)));
    }

    #[test]
    fn mix_parsing() {
        assert_eq!(Mix::parse("1,1,1,1,1,1,1,1,1").unwrap(), Mix::default());
        assert!(Mix::parse("1,2").is_err());
        assert!(Mix::parse("0,0,0,0,0,0,0,0,0").is_err());
        assert!(Mix::parse("1,1,1,1,1,1,1,1,-1").is_err());
    }
}
