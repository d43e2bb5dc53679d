//! Synthetic image/mask phantoms with controlled foreground volume and
//! boundary roughness.
//!
//! The foreground is a star-convex blob: the voxel at offset `d` from the
//! centre is inside iff `|d| <= r0 * (1 + a * eta(d / |d|))`, where `eta` is
//! a band-limited random function on the unit sphere with `|eta| <= 1` and
//! `a` is the perturbation amplitude of the smoothness bin. The base radius
//! `r0` is chosen so the blob has exactly the target voxel count.
//!
//! Generation consumes one [`Xoshiro256StarStar`] stream seeded with
//! `PhantomSpec::seed`, in this order: the angular terms of `eta` (per term:
//! direction z, direction azimuth, frequency, phase, weight), the centre
//! (z, y, x), then one Gaussian noise draw per voxel in z-major order.

use crate::error::{Error, Result};
use crate::params::count_pixels;
use crate::rng::Xoshiro256StarStar;
use crate::volume::{Dims, MaskVolume, Volume3D};
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VolumeBin {
    Large,
    Medium,
    Small,
}

impl VolumeBin {
    pub const ALL: [Self; 3] = [Self::Large, Self::Medium, Self::Small];

    /// Target foreground fraction.
    pub fn target_fraction(&self) -> f64 {
        match self {
            Self::Large => 0.05,
            Self::Medium => 0.01,
            Self::Small => 0.002,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Large => "large",
            Self::Medium => "medium",
            Self::Small => "small",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SmoothnessBin {
    Good,
    Medium,
    Poor,
}

impl SmoothnessBin {
    pub const ALL: [Self; 3] = [Self::Good, Self::Medium, Self::Poor];

    /// Radial perturbation amplitude as a fraction of the base radius.
    pub fn amplitude(&self) -> f64 {
        match self {
            Self::Good => 0.0,
            Self::Medium => 0.2,
            Self::Poor => 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Good => "good",
            Self::Medium => "medium",
            Self::Poor => "poor",
        }
    }
}

impl fmt::Display for VolumeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for SmoothnessBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhantomSpec {
    pub dims: Dims,
    pub volume_bin: VolumeBin,
    pub smoothness_bin: SmoothnessBin,
    pub noise_sigma: f64,
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(dims: Dims, volume_bin: VolumeBin, smoothness_bin: SmoothnessBin, seed: u64) -> Self {
        Self { dims, volume_bin, smoothness_bin, noise_sigma: 0.3, fg_intensity: 1.0, bg_intensity: 0.0, seed }
    }
}

/// Number of cosine terms in the angular perturbation.
pub const ANGULAR_TERMS: usize = 8;
const FREQ_RANGE: (f64, f64) = (2.0, 5.0);
const WEIGHT_RANGE: (f64, f64) = (0.5, 1.0);
/// Noise draws are clipped to this many standard deviations.
const NOISE_CLIP: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    dir: [f64; 3],
    freq: f64,
    phase: f64,
    weight: f64,
}

/// Smooth random function on the unit sphere:
/// `eta(u) = Σ w_k cos(f_k <d_k, u> + φ_k) / Σ w_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularField {
    waves: Vec<Wave>,
    norm: f64,
}

impl AngularField {
    pub fn random(rng: &mut Xoshiro256StarStar) -> Self {
        let waves: Vec<Wave> = (0..ANGULAR_TERMS)
            .map(|_| {
                let cz = rng.uniform(-1.0, 1.0);
                let az = rng.uniform(0.0, TAU);
                let s = libm::sqrt((1.0 - cz * cz).max(0.0));
                Wave {
                    // (z, y, x) components
                    dir: [cz, s * libm::sin(az), s * libm::cos(az)],
                    freq: rng.uniform(FREQ_RANGE.0, FREQ_RANGE.1),
                    phase: rng.uniform(0.0, TAU),
                    weight: rng.uniform(WEIGHT_RANGE.0, WEIGHT_RANGE.1),
                }
            })
            .collect();
        let norm = waves.iter().map(|w| w.weight).sum();
        Self { waves, norm }
    }

    /// Value at unit direction `u = (uz, uy, ux)`; always within `[-1, 1]`.
    pub fn eval(&self, u: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|w| {
                let dot = w.dir[0] * u[0] + w.dir[1] * u[1] + w.dir[2] * u[2];
                w.weight * libm::cos(w.freq * dot + w.phase)
            })
            .sum();
        s / self.norm
    }

    /// Mean of `(1 + a * eta)^3` over the sphere (Fibonacci lattice), which
    /// scales the ball volume into the blob volume.
    fn cubed_radius_mean(&self, amplitude: f64) -> f64 {
        const POINTS: usize = 4096;
        let golden_angle = PI * (3.0 - libm::sqrt(5.0));
        let mut acc = 0.0;
        for i in 0..POINTS {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / POINTS as f64;
            let r = libm::sqrt(1.0 - z * z);
            let t = golden_angle * i as f64;
            let rr = 1.0 + amplitude * self.eval([z, r * libm::sin(t), r * libm::cos(t)]);
            acc += rr * rr * rr;
        }
        acc / POINTS as f64
    }
}

/// Scaled distance `|d| / (1 + a * eta(d/|d|))`; a voxel is inside the blob
/// of base radius `r0` iff this is at most `r0`.
fn star_key(field: &AngularField, center: [f64; 3], amplitude: f64, z: usize, y: usize, x: usize) -> f64 {
    let d = [z as f64 - center[0], y as f64 - center[1], x as f64 - center[2]];
    let rho = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if rho == 0.0 {
        return 0.0;
    }
    let u = [d[0] / rho, d[1] / rho, d[2] / rho];
    rho / (1.0 + amplitude * field.eval(u))
}

/// Voxelizes the star-convex blob of base radius `r0` centred at
/// `center = (z, y, x)` in voxel coordinates. `amplitude` must lie in `[0, 1)`.
pub fn voxelize_star(
    dims: Dims,
    center: [f64; 3],
    r0: f64,
    amplitude: f64,
    field: &AngularField,
) -> Result<MaskVolume> {
    MaskVolume::from_fn(dims, |z, y, x| star_key(field, center, amplitude, z, y, x) <= r0)
}

/// A generated image/mask pair with the realized blob geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume3D,
    pub mask: MaskVolume,
    pub base_radius: f64,
    pub center: [f64; 3],
    pub realized_fg_fraction: f64,
}

/// Generates a phantom; a pure function of `spec`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let dims = spec.dims;
    if dims.is_empty() {
        return Err(Error::InvalidDims(dims));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::InvalidInput(format!("noise_sigma must be finite and >= 0, got {}", spec.noise_sigma)));
    }
    let amplitude = spec.smoothness_bin.amplitude();
    let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed);
    let field = AngularField::random(&mut rng);

    let n = dims.len();
    let target = libm::round(spec.volume_bin.target_fraction() * n as f64) as usize;
    let r_est = libm::cbrt(3.0 * target as f64 / (4.0 * PI * field.cubed_radius_mean(amplitude)));
    if r_est < 2.0 {
        return Err(Error::Unachievable(format!(
            "base radius {r_est:.3} < 2 voxels for a {} blob in {dims}",
            spec.volume_bin
        )));
    }

    // Half-width of the box that certainly contains the blob.
    let reach = r_est * 1.25 * (1.0 + amplitude) + 1.0;
    let mut center = [0.0; 3];
    for (c, extent) in center.iter_mut().zip(dims.as_array()) {
        let hi = extent as f64 - 1.0 - reach;
        if hi < reach {
            return Err(Error::Unachievable(format!(
                "a blob of reach {reach:.2} does not fit in {dims}"
            )));
        }
        *c = rng.uniform(reach, hi);
    }

    // Rank voxels in the box by scaled distance; r0 sits between the
    // target-th and the next key so exactly `target` voxels fall inside.
    let lo = |c: f64| libm::floor(c - reach).max(0.0) as usize;
    let hi = |c: f64, n: usize| (libm::ceil(c + reach) as usize).min(n - 1);
    let mut keys = Vec::new();
    for z in lo(center[0])..=hi(center[0], dims.nz) {
        for y in lo(center[1])..=hi(center[1], dims.ny) {
            for x in lo(center[2])..=hi(center[2], dims.nx) {
                keys.push(star_key(&field, center, amplitude, z, y, x));
            }
        }
    }
    keys.sort_by(f64::total_cmp);
    if target == 0 || target >= keys.len() {
        return Err(Error::Unachievable(format!("target of {target} voxels cannot be placed")));
    }
    let r0 = 0.5 * (keys[target - 1] + keys[target]);
    if r0 < 2.0 || r0 * (1.0 + amplitude) + 1.0 > reach {
        return Err(Error::Unachievable(format!("base radius {r0:.3} outside the admissible range")));
    }

    let mask = voxelize_star(dims, center, r0, amplitude, &field)?;
    let mut image = Vec::with_capacity(n);
    let clip = NOISE_CLIP * spec.noise_sigma;
    for &m in mask.data() {
        let base = if m == 1 { spec.fg_intensity } else { spec.bg_intensity };
        let noise = rng.normal(0.0, spec.noise_sigma).clamp(-clip, clip);
        image.push(base + noise);
    }
    let image = Volume3D::new(dims, image)?;
    let realized_fg_fraction = count_pixels(&mask).p_fg as f64 / n as f64;
    Ok(Phantom { image, mask, base_radius: r0, center, realized_fg_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::mean_smoothness;

    fn spec(v: VolumeBin, s: SmoothnessBin, seed: u64) -> PhantomSpec {
        PhantomSpec::new(Dims::cube(32), v, s, seed)
    }

    #[test]
    fn eta_is_bounded() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let f = AngularField::random(&mut rng);
        for i in 0..1000 {
            let t = i as f64 * 0.37;
            let z = libm::cos(i as f64 * 0.11);
            let r = libm::sqrt(1.0 - z * z);
            let e = f.eval([z, r * libm::sin(t), r * libm::cos(t)]);
            assert!((-1.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn volume_bins_hit_target() {
        for v in VolumeBin::ALL {
            for s in SmoothnessBin::ALL {
                for seed in 0..4 {
                    let p = make_phantom(&spec(v, s, seed)).unwrap();
                    let rel = (p.realized_fg_fraction - v.target_fraction()).abs() / v.target_fraction();
                    assert!(rel <= 0.3, "{v}/{s}/{seed}: {}", p.realized_fg_fraction);
                    assert!(p.base_radius >= 2.0);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let s = spec(VolumeBin::Medium, SmoothnessBin::Poor, 99);
        assert_eq!(make_phantom(&s).unwrap(), make_phantom(&s).unwrap());
        let other = make_phantom(&spec(VolumeBin::Medium, SmoothnessBin::Poor, 100)).unwrap();
        assert_ne!(make_phantom(&s).unwrap().mask, other.mask);
    }

    #[test]
    fn ball_is_smoother_than_rough_blob() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(17);
        let f = AngularField::random(&mut rng);
        let d = Dims::cube(32);
        let c = [15.5, 16.0, 15.7];
        let ball = voxelize_star(d, c, 6.0, 0.0, &f).unwrap();
        let rough = voxelize_star(d, c, 6.0, 0.5, &f).unwrap();
        assert!(mean_smoothness(&ball).unwrap() < mean_smoothness(&rough).unwrap());
    }

    #[test]
    fn unachievable_specs() {
        let tiny = PhantomSpec::new(Dims::cube(8), VolumeBin::Small, SmoothnessBin::Good, 1);
        assert!(matches!(make_phantom(&tiny), Err(Error::Unachievable(_))));
        let narrow = PhantomSpec::new(Dims::new(6, 64, 64), VolumeBin::Large, SmoothnessBin::Poor, 1);
        assert!(matches!(make_phantom(&narrow), Err(Error::Unachievable(_))));
    }

    #[test]
    fn noiseless_image_is_the_mask() {
        let mut s = spec(VolumeBin::Large, SmoothnessBin::Medium, 3);
        s.noise_sigma = 0.0;
        let p = make_phantom(&s).unwrap();
        assert_eq!(p.image, p.mask.to_volume());
    }
}
