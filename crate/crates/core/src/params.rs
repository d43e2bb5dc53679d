//! Per-sample adaptive parameters derived from a ground-truth mask.
//!
//! * `alpha_va`: background fraction of the mask, used as class weight.
//! * `gamma_va`: foreground fraction of the mask.
//! * `gamma_msa`: mean gradient magnitude of the mask over all voxels, a
//!   boundary roughness measure that grows with surface-to-volume ratio.
//! * `gamma_adaptive = gamma_va + gamma_msa`: the focusing exponent.
//!
//! Nothing here sees a prediction, so every parameter is a constant with
//! respect to the model.

use crate::error::{Error, Result};
use crate::volume::{ensure_same_dims, MaskVolume, Volume3D};
use alloc::string::ToString;
use alloc::vec::Vec;

/// Foreground / background voxel counts of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PixelCounts {
    pub p_fg: u64,
    pub p_bg: u64,
}

impl PixelCounts {
    pub fn total(&self) -> u64 {
        self.p_fg + self.p_bg
    }
}

/// Per-axis derivatives of a scalar field, unit voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub gx: Volume3D,
    pub gy: Volume3D,
    pub gz: Volume3D,
}

/// Everything the adaptive loss needs to know about one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptiveParams {
    pub counts: PixelCounts,
    pub alpha_va: f64,
    pub gamma_va: f64,
    pub gamma_msa: f64,
    pub gamma_adaptive: f64,
}

pub fn count_pixels(mask: &MaskVolume) -> PixelCounts {
    let p_fg = mask.data().iter().filter(|&&v| v == 1).count() as u64;
    PixelCounts { p_fg, p_bg: mask.len() as u64 - p_fg }
}

fn nonzero_total(counts: PixelCounts) -> Result<f64> {
    match counts.total() {
        0 => Err(Error::InvalidInput("pixel counts sum to zero".to_string())),
        t => Ok(t as f64),
    }
}

/// Background fraction `p_bg / (p_fg + p_bg)`.
pub fn alpha_va(counts: PixelCounts) -> Result<f64> {
    Ok(counts.p_bg as f64 / nonzero_total(counts)?)
}

/// Foreground fraction `p_fg / (p_fg + p_bg)`.
pub fn gamma_va(counts: PixelCounts) -> Result<f64> {
    Ok(counts.p_fg as f64 / nonzero_total(counts)?)
}

/// Finite-difference derivative along one axis, written into `out`.
///
/// `stride` is the flat-index distance between neighbours along the axis,
/// `n` the axis length, and `lines` yields the flat index of each line start.
fn diff_axis(src: &[f64], out: &mut [f64], n: usize, stride: usize, lines: impl Iterator<Item = usize>) {
    for base in lines {
        let at = |k: usize| src[base + k * stride];
        out[base] = at(1) - at(0);
        for k in 1..n - 1 {
            out[base + k * stride] = 0.5 * (at(k + 1) - at(k - 1));
        }
        out[base + (n - 1) * stride] = at(n - 1) - at(n - 2);
    }
}

/// Central differences in the interior, one-sided differences on the two
/// boundary planes of each axis. Every dimension must be at least 2.
pub fn spatial_gradients(v: &Volume3D) -> Result<GradientField> {
    let d = v.dims();
    if d.min_extent() < 2 {
        return Err(Error::InvalidDims(d));
    }
    let src = v.data();
    let (nz, ny, nx) = (d.nz, d.ny, d.nx);
    let mut gx = alloc::vec![0.0; d.len()];
    let mut gy = alloc::vec![0.0; d.len()];
    let mut gz = alloc::vec![0.0; d.len()];

    diff_axis(src, &mut gx, nx, 1, (0..nz * ny).map(|zy| zy * nx));
    diff_axis(
        src,
        &mut gy,
        ny,
        nx,
        (0..nz).flat_map(|z| (0..nx).map(move |x| z * ny * nx + x)),
    );
    diff_axis(src, &mut gz, nz, ny * nx, 0..ny * nx);

    Ok(GradientField {
        gx: Volume3D::new(d, gx)?,
        gy: Volume3D::new(d, gy)?,
        gz: Volume3D::new(d, gz)?,
    })
}

/// Per-voxel Euclidean norm `sqrt(gx² + gy² + gz²)`.
pub fn gradient_magnitude(g: &GradientField) -> Result<Volume3D> {
    let d = g.gx.dims();
    ensure_same_dims(d, g.gy.dims())?;
    ensure_same_dims(d, g.gz.dims())?;
    let data: Vec<f64> = g
        .gx
        .data()
        .iter()
        .zip(g.gy.data())
        .zip(g.gz.data())
        .map(|((&x, &y), &z)| libm::sqrt(x * x + y * y + z * z))
        .collect();
    Volume3D::new(d, data)
}

/// Mean gradient magnitude of the mask over all voxels.
pub fn mean_smoothness(mask: &MaskVolume) -> Result<f64> {
    let mag = gradient_magnitude(&spatial_gradients(&mask.to_volume())?)?;
    let sum: f64 = mag.data().iter().sum();
    Ok(sum / mag.len() as f64)
}

/// Computes the full parameter record for one mask.
///
/// An all-background mask is valid and yields `alpha_va = 1` with every
/// focusing term zero.
pub fn gamma_adaptive(mask: &MaskVolume) -> Result<AdaptiveParams> {
    let counts = count_pixels(mask);
    let alpha_va = alpha_va(counts)?;
    let gamma_va = gamma_va(counts)?;
    let gamma_msa = mean_smoothness(mask)?;
    Ok(AdaptiveParams { counts, alpha_va, gamma_va, gamma_msa, gamma_adaptive: gamma_va + gamma_msa })
}

/// Upper bound of `gamma_msa` for a binary mask: each axis derivative is at
/// most 1 in magnitude.
pub const GAMMA_MSA_MAX: f64 = 1.732_050_807_568_877_2;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    fn mask_from(d: Dims, f: impl FnMut(usize, usize, usize) -> bool) -> MaskVolume {
        MaskVolume::from_fn(d, f).unwrap()
    }

    /// Voxel-by-voxel stencil written directly from the definition.
    fn brute_gradient(v: &Volume3D, z: usize, y: usize, x: usize) -> [f64; 3] {
        let d = v.dims();
        let axis = |n: usize, i: usize, f: &dyn Fn(usize) -> f64| -> f64 {
            if i == 0 {
                f(1) - f(0)
            } else if i == n - 1 {
                f(n - 1) - f(n - 2)
            } else {
                (f(i + 1) - f(i - 1)) / 2.0
            }
        };
        [
            axis(d.nx, x, &|k| v.get(z, y, k)),
            axis(d.ny, y, &|k| v.get(z, k, x)),
            axis(d.nz, z, &|k| v.get(k, y, x)),
        ]
    }

    #[test]
    fn counts_and_fractions() {
        let d = Dims::cube(4);
        let m = mask_from(d, |z, y, x| z < 2 && y < 2 && x < 2);
        let c = count_pixels(&m);
        assert_eq!(c, PixelCounts { p_fg: 8, p_bg: 56 });
        assert_eq!(alpha_va(c).unwrap(), 0.875);
        assert_eq!(gamma_va(c).unwrap(), 0.125);

        let empty = count_pixels(&MaskVolume::zeros(d).unwrap());
        assert_eq!(empty, PixelCounts { p_fg: 0, p_bg: 64 });
        assert_eq!(alpha_va(empty).unwrap(), 1.0);
        assert_eq!(gamma_va(PixelCounts { p_fg: 64, p_bg: 0 }).unwrap(), 1.0);
        assert!(alpha_va(PixelCounts { p_fg: 0, p_bg: 0 }).is_err());
        assert!(gamma_va(PixelCounts { p_fg: 0, p_bg: 0 }).is_err());
    }

    #[test]
    fn constant_and_ramp_gradients() {
        let d = Dims::cube(4);
        let c = Volume3D::filled(d, 3.5).unwrap();
        let g = spatial_gradients(&c).unwrap();
        for f in [&g.gx, &g.gy, &g.gz] {
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
        let ramp = Volume3D::from_fn(d, |_, _, x| x as f64).unwrap();
        let g = spatial_gradients(&ramp).unwrap();
        assert!(g.gx.data().iter().all(|&v| v == 1.0));
        assert!(g.gy.data().iter().all(|&v| v == 0.0));
        assert!(g.gz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_reject_thin_volumes() {
        let v = Volume3D::zeros(Dims::new(1, 4, 4)).unwrap();
        assert_eq!(spatial_gradients(&v), Err(Error::InvalidDims(Dims::new(1, 4, 4))));
        let m = MaskVolume::zeros(Dims::new(4, 4, 1)).unwrap();
        assert!(mean_smoothness(&m).is_err());
    }

    #[test]
    fn three_four_five() {
        let d = Dims::cube(2);
        let mut gx = vec![0.0; 8];
        let mut gy = vec![0.0; 8];
        gx[3] = 3.0;
        gy[3] = 4.0;
        let g = GradientField {
            gx: Volume3D::new(d, gx).unwrap(),
            gy: Volume3D::new(d, gy).unwrap(),
            gz: Volume3D::zeros(d).unwrap(),
        };
        let m = gradient_magnitude(&g).unwrap();
        assert_eq!(m.data()[3], 5.0);
        assert_eq!(m.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn magnitude_rejects_mismatched_fields() {
        let g = GradientField {
            gx: Volume3D::zeros(Dims::cube(2)).unwrap(),
            gy: Volume3D::zeros(Dims::cube(2)).unwrap(),
            gz: Volume3D::zeros(Dims::cube(3)).unwrap(),
        };
        assert!(matches!(gradient_magnitude(&g), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn single_voxel_smoothness() {
        // Six face neighbours each see a 0.5 central difference on one axis.
        let m = mask_from(Dims::cube(5), |z, y, x| (z, y, x) == (2, 2, 2));
        assert!((mean_smoothness(&m).unwrap() - 3.0 / 125.0).abs() < 1e-15);
    }

    #[test]
    fn block_params() {
        // 2x2x2 block at 1..=2: 24 face-adjacent voxels with |g| = 1 and the
        // 8 block voxels with |g| = sqrt(3 * 0.25).
        let m = mask_from(Dims::cube(4), |z, y, x| {
            (1..=2).contains(&z) && (1..=2).contains(&y) && (1..=2).contains(&x)
        });
        let p = gamma_adaptive(&m).unwrap();
        let msa = (24.0 + 8.0 * 0.75f64.sqrt()) / 64.0;
        assert_eq!(p.gamma_va, 0.125);
        assert!((p.gamma_msa - msa).abs() < 1e-14);
        assert!((p.gamma_adaptive - (0.125 + msa)).abs() < 1e-14);
    }

    #[test]
    fn empty_and_full_masks() {
        let d = Dims::cube(4);
        let p = gamma_adaptive(&MaskVolume::zeros(d).unwrap()).unwrap();
        assert_eq!((p.alpha_va, p.gamma_va, p.gamma_msa, p.gamma_adaptive), (1.0, 0.0, 0.0, 0.0));
        let full = MaskVolume::new(d, vec![1; 64]).unwrap();
        assert_eq!(mean_smoothness(&full).unwrap(), 0.0);
    }

    #[test]
    fn gamma_msa_max_is_sqrt3() {
        assert_eq!(GAMMA_MSA_MAX, 3f64.sqrt());
    }

    fn arb_volume() -> impl Strategy<Value = Volume3D> {
        (2usize..7, 2usize..7, 2usize..7).prop_flat_map(|(z, y, x)| {
            let d = Dims::new(z, y, x);
            prop::collection::vec(-5.0f64..5.0, d.len()).prop_map(move |v| Volume3D::new(d, v).unwrap())
        })
    }

    fn arb_mask(max: usize) -> impl Strategy<Value = MaskVolume> {
        (2usize..max, 2usize..max, 2usize..max).prop_flat_map(|(z, y, x)| {
            let d = Dims::new(z, y, x);
            prop::collection::vec(0u8..2, d.len()).prop_map(move |v| MaskVolume::new(d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn stencil_matches_brute_force(v in arb_volume()) {
            let g = spatial_gradients(&v).unwrap();
            let d = v.dims();
            for z in 0..d.nz { for y in 0..d.ny { for x in 0..d.nx {
                let b = brute_gradient(&v, z, y, x);
                prop_assert_eq!(g.gx.get(z, y, x), b[0]);
                prop_assert_eq!(g.gy.get(z, y, x), b[1]);
                prop_assert_eq!(g.gz.get(z, y, x), b[2]);
            }}}
        }

        #[test]
        fn parameter_identities(m in arb_mask(9)) {
            let p = gamma_adaptive(&m).unwrap();
            prop_assert!((p.alpha_va + p.gamma_va - 1.0).abs() <= 1e-12);
            prop_assert!((p.gamma_adaptive - p.gamma_va - p.gamma_msa).abs() <= 1e-12);
            prop_assert!(p.gamma_msa >= 0.0 && p.gamma_msa <= GAMMA_MSA_MAX);
            prop_assert!((p.gamma_adaptive - p.gamma_va - mean_smoothness(&m).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn translation_invariance(
            (bz, by, bx) in (2usize..4, 2usize..4, 2usize..4),
            bits in prop::collection::vec(0u8..2, 27),
            (sz, sy, sx) in (0usize..3, 0usize..3, 0usize..3),
        ) {
            // A 3x3x3 random blob kept two voxels away from every boundary
            // plane so the one-sided stencil never touches it.
            let d = Dims::cube(10);
            let place = |oz: usize, oy: usize, ox: usize| {
                MaskVolume::from_fn(d, |z, y, x| {
                    let (dz, dy, dx) = (z.wrapping_sub(oz), y.wrapping_sub(oy), x.wrapping_sub(ox));
                    dz < 3 && dy < 3 && dx < 3 && bits[(dz * 3 + dy) * 3 + dx] == 1
                }).unwrap()
            };
            let a = gamma_adaptive(&place(bz, by, bx)).unwrap();
            let b = gamma_adaptive(&place(bz + sz, by + sy, bx + sx)).unwrap();
            prop_assert_eq!(a.gamma_va, b.gamma_va);
            prop_assert!((a.gamma_msa - b.gamma_msa).abs() <= 1e-12);
        }
    }
}
