//! Segmentation losses with analytic derivatives w.r.t. the predicted
//! foreground probability.
//!
//! All losses are nonnegative and reduce per sample: voxelwise terms are
//! averaged over the voxels, overlap losses are computed on soft
//! (probability-weighted) counts. Predictions are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` first; the derivative is zero wherever the
//! clamp is active.

use crate::error::{Error, Result};
use crate::params::{gamma_adaptive, AdaptiveParams};
use crate::volume::{ensure_same_dims, MaskVolume, Volume3D};
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

pub const PROB_EPS: f64 = 1e-7;

/// Clamps `p` into `[PROB_EPS, 1 - PROB_EPS]`; the flag reports whether the
/// clamp changed the value (NaN counts as clamped).
#[inline]
pub fn clamp_prob(p: f64) -> (f64, bool) {
    if p >= PROB_EPS && p <= 1.0 - PROB_EPS {
        (p, false)
    } else if p > 0.5 {
        (1.0 - PROB_EPS, true)
    } else {
        (PROB_EPS, true)
    }
}

/// Probability assigned to the true class.
#[inline]
pub fn p_t(p: f64, y: u8) -> f64 {
    if y == 1 {
        p
    } else {
        1.0 - p
    }
}

/// Class-weighted focal loss of a single voxel and its derivative w.r.t. `p`.
///
/// `alpha` weights foreground voxels, `1 - alpha` background voxels:
/// `loss = -alpha_t * (1 - p_t)^gamma * ln(p_t)`.
pub fn focal_voxel(p: f64, y: u8, alpha: f64, gamma: f64) -> (f64, f64) {
    let alpha_t = if y == 1 { alpha } else { 1.0 - alpha };
    modulated_ce(p, y, alpha_t, gamma)
}

/// `-weight * (1 - p_t)^gamma * ln(p_t)` with `gamma` held constant.
fn modulated_ce(p: f64, y: u8, weight: f64, gamma: f64) -> (f64, f64) {
    let (p, clamped) = clamp_prob(p);
    let pt = p_t(p, y);
    let q = 1.0 - pt;
    let ln_pt = libm::log(pt);
    let factor = if gamma == 0.0 { 1.0 } else { libm::pow(q, gamma) };
    let loss = -weight * factor * ln_pt;
    if clamped {
        return (loss, 0.0);
    }
    // d/dpt [-(1-pt)^g ln pt] = g (1-pt)^(g-1) ln pt - (1-pt)^g / pt
    let dfactor = if gamma == 0.0 { 0.0 } else { gamma * libm::pow(q, gamma - 1.0) };
    let dloss_dpt = weight * (dfactor * ln_pt - factor / pt);
    let dloss_dp = if y == 1 { dloss_dpt } else { -dloss_dpt };
    (loss, dloss_dp)
}

/// Which of the three adaptive terms are active.
///
/// With both focusing terms off the focusing exponent falls back to
/// `LossSpec::gamma_fixed`; with `use_alpha_va` off the class weight falls
/// back to `LossSpec::alpha_fixed`. All three off is the plain focal loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AblationFlags {
    pub use_alpha_va: bool,
    pub use_gamma_va: bool,
    pub use_gamma_msa: bool,
}

impl AblationFlags {
    pub const ALL: Self = Self { use_alpha_va: true, use_gamma_va: true, use_gamma_msa: true };
    pub const NONE: Self = Self { use_alpha_va: false, use_gamma_va: false, use_gamma_msa: false };

    pub const fn new(use_alpha_va: bool, use_gamma_va: bool, use_gamma_msa: bool) -> Self {
        Self { use_alpha_va, use_gamma_va, use_gamma_msa }
    }

    /// The six rows of the ablation grid, in report order.
    pub const GRID: [Self; 6] = [
        Self::new(false, false, false),
        Self::new(true, false, false),
        Self::new(true, true, false),
        Self::new(true, false, true),
        Self::new(true, true, true),
        Self::new(false, true, true),
    ];

    /// Short label such as `a+gv+gm`, or `none`.
    pub fn label(&self) -> alloc::string::String {
        let parts: Vec<&str> = [(self.use_alpha_va, "a"), (self.use_gamma_va, "gv"), (self.use_gamma_msa, "gm")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for AblationFlags {
    type Err = Error;

    /// Parses a comma or plus separated subset of `a`, `gv`, `gm`; `none` or
    /// an empty string disables everything.
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Self::NONE;
        for tok in s.split([',', '+']).map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "a" | "alpha_va" => flags.use_alpha_va = true,
                "gv" | "gamma_va" => flags.use_gamma_va = true,
                "gm" | "gamma_msa" => flags.use_gamma_msa = true,
                "none" => {}
                other => return Err(Error::InvalidInput(format!("unknown ablation flag `{other}`"))),
            }
        }
        Ok(flags)
    }
}

/// How the adaptive class weight is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AlphaMode {
    /// `alpha_va` on foreground voxels, `1 - alpha_va` on background voxels.
    #[default]
    ClassWeighted,
    /// A single `alpha_va` multiplier on every voxel.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    FocalBaseline,
    Afl,
    Dice,
    CrossEntropy,
    Iou,
    Tversky,
    DiceCe,
    DiceFocal,
}

impl LossKind {
    pub const ALL: [Self; 8] = [
        Self::FocalBaseline,
        Self::Afl,
        Self::Dice,
        Self::CrossEntropy,
        Self::Iou,
        Self::Tversky,
        Self::DiceCe,
        Self::DiceFocal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::FocalBaseline => "focal_baseline",
            Self::Afl => "afl",
            Self::Dice => "dice",
            Self::CrossEntropy => "cross_entropy",
            Self::Iou => "iou",
            Self::Tversky => "tversky",
            Self::DiceCe => "dice_ce",
            Self::DiceFocal => "dice_focal",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "focal_baseline" | "focal" | "fl" => Self::FocalBaseline,
            "afl" | "a_fl" | "adaptive_focal" => Self::Afl,
            "dice" => Self::Dice,
            "cross_entropy" | "ce" | "bce" => Self::CrossEntropy,
            "iou" | "jaccard" => Self::Iou,
            "tversky" => Self::Tversky,
            "dice_ce" => Self::DiceCe,
            "dice_focal" => Self::DiceFocal,
            _ => return Err(Error::InvalidInput(format!("unknown loss kind `{s}`"))),
        };
        Ok(kind)
    }
}

/// Loss selector plus every hyperparameter any kind can use.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossSpec {
    pub kind: LossKind,
    /// Foreground weight of the fixed focal loss.
    pub alpha_fixed: f64,
    /// Focusing exponent of the fixed focal loss.
    pub gamma_fixed: f64,
    /// False-positive weight of the Tversky index.
    pub tversky_alpha: f64,
    /// False-negative weight of the Tversky index.
    pub tversky_beta: f64,
    /// Smoothing constant of the overlap losses (numerator and denominator).
    pub smooth_eps: f64,
    pub ablation: AblationFlags,
    /// Added to the adaptive exponent whenever a focusing term is enabled.
    pub gamma_offset: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Afl,
            alpha_fixed: 0.25,
            gamma_fixed: 2.0,
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            smooth_eps: 1.0,
            ablation: AblationFlags::ALL,
            gamma_offset: 0.0,
            alpha_mode: AlphaMode::ClassWeighted,
        }
    }
}

impl LossSpec {
    pub fn of_kind(kind: LossKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn afl(ablation: AblationFlags) -> Self {
        Self { kind: LossKind::Afl, ablation, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if !(self.alpha_fixed > 0.0 && self.alpha_fixed < 1.0) {
            return bad("alpha_fixed must lie in (0, 1)");
        }
        if !(self.gamma_fixed >= 0.0) || !self.gamma_fixed.is_finite() {
            return bad("gamma_fixed must be finite and >= 0");
        }
        if !(self.tversky_alpha + self.tversky_beta > 0.0)
            || self.tversky_alpha < 0.0
            || self.tversky_beta < 0.0
        {
            return bad("tversky weights must be >= 0 with a positive sum");
        }
        if !(self.smooth_eps >= 0.0) || !self.smooth_eps.is_finite() {
            return bad("smooth_eps must be finite and >= 0");
        }
        if !self.gamma_offset.is_finite() {
            return bad("gamma_offset must be finite");
        }
        Ok(())
    }

    /// Class weight applied to a voxel with label `y`.
    pub fn effective_alpha(&self, params: &AdaptiveParams, y: u8) -> f64 {
        if self.ablation.use_alpha_va {
            match (self.alpha_mode, y) {
                (AlphaMode::Uniform, _) => params.alpha_va,
                (AlphaMode::ClassWeighted, 1) => params.alpha_va,
                (AlphaMode::ClassWeighted, _) => 1.0 - params.alpha_va,
            }
        } else if y == 1 {
            self.alpha_fixed
        } else {
            1.0 - self.alpha_fixed
        }
    }

    /// Focusing exponent for a sample; clipped at zero so a negative offset
    /// cannot produce a growing modulating factor.
    pub fn effective_gamma(&self, params: &AdaptiveParams) -> f64 {
        let f = self.ablation;
        if !f.use_gamma_va && !f.use_gamma_msa {
            return self.gamma_fixed;
        }
        let mut g = self.gamma_offset;
        if f.use_gamma_va {
            g += params.gamma_va;
        }
        if f.use_gamma_msa {
            g += params.gamma_msa;
        }
        g.max(0.0)
    }
}

/// Mean loss of one sample and `d(value)/d(pred)` per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Volume3D,
}

/// Adaptive focal loss of a single voxel and its derivative w.r.t. `p`.
pub fn afl_voxel(p: f64, y: u8, params: &AdaptiveParams, spec: &LossSpec) -> (f64, f64) {
    modulated_ce(p, y, spec.effective_alpha(params, y), spec.effective_gamma(params))
}

fn voxelwise(
    pred: &Volume3D,
    mask: &MaskVolume,
    mut f: impl FnMut(f64, u8) -> (f64, f64),
) -> Result<LossValue> {
    ensure_same_dims(pred.dims(), mask.dims())?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&p, &y)| {
            let (l, g) = f(p, y);
            sum += l;
            g / n
        })
        .collect();
    finish(sum / n, pred, grad)
}

fn finish(value: f64, pred: &Volume3D, grad: Vec<f64>) -> Result<LossValue> {
    if !value.is_finite() {
        return Err(Error::InvalidInput("loss value is not finite".to_string()));
    }
    Ok(LossValue { value, grad: Volume3D::new(pred.dims(), grad)? })
}

/// Adaptive focal loss of one sample; parameters are derived from `mask`.
pub fn afl_volume(pred: &Volume3D, mask: &MaskVolume, spec: &LossSpec) -> Result<LossValue> {
    ensure_same_dims(pred.dims(), mask.dims())?;
    let params = gamma_adaptive(mask)?;
    afl_volume_with(pred, mask, &params, spec)
}

/// As [`afl_volume`] with precomputed (for example cached) parameters.
pub fn afl_volume_with(
    pred: &Volume3D,
    mask: &MaskVolume,
    params: &AdaptiveParams,
    spec: &LossSpec,
) -> Result<LossValue> {
    let alpha_fg = spec.effective_alpha(params, 1);
    let alpha_bg = spec.effective_alpha(params, 0);
    let gamma = spec.effective_gamma(params);
    voxelwise(pred, mask, |p, y| modulated_ce(p, y, if y == 1 { alpha_fg } else { alpha_bg }, gamma))
}

/// Fixed-parameter focal loss of one sample.
pub fn focal_volume(pred: &Volume3D, mask: &MaskVolume, alpha: f64, gamma: f64) -> Result<LossValue> {
    voxelwise(pred, mask, |p, y| focal_voxel(p, y, alpha, gamma))
}

/// Mean binary cross-entropy of one sample.
pub fn cross_entropy_volume(pred: &Volume3D, mask: &MaskVolume) -> Result<LossValue> {
    voxelwise(pred, mask, |p, y| modulated_ce(p, y, 1.0, 0.0))
}

/// Soft overlap sums: `tp = Σ p·y`, `sp = Σ p`, `sy = Σ y`.
struct Overlap {
    tp: f64,
    sp: f64,
    sy: f64,
    probs: Vec<(f64, bool)>,
}

fn overlap(pred: &Volume3D, mask: &MaskVolume) -> Result<Overlap> {
    ensure_same_dims(pred.dims(), mask.dims())?;
    let probs: Vec<(f64, bool)> = pred.data().iter().map(|&p| clamp_prob(p)).collect();
    let (mut tp, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&(p, _), &y) in probs.iter().zip(mask.data()) {
        let y = f64::from(y);
        tp += p * y;
        sp += p;
        sy += y;
    }
    Ok(Overlap { tp, sp, sy, probs })
}

/// Loss `1 - num/den` where `num` and `den` are affine in the soft sums;
/// `dnum(y)` and `dden(y)` give their per-voxel derivatives.
fn ratio_loss(
    pred: &Volume3D,
    mask: &MaskVolume,
    ov: &Overlap,
    num: f64,
    den: f64,
    dnum: impl Fn(f64) -> f64,
    dden: impl Fn(f64) -> f64,
) -> Result<LossValue> {
    let grad = ov
        .probs
        .iter()
        .zip(mask.data())
        .map(|(&(_, clamped), &y)| {
            if clamped {
                return 0.0;
            }
            let y = f64::from(y);
            -(dnum(y) * den - num * dden(y)) / (den * den)
        })
        .collect();
    let value = if den == 0.0 { 0.0 } else { 1.0 - num / den };
    finish(value, pred, grad)
}

/// Soft Dice loss `1 - (2·tp + s) / (Σp + Σy + s)`.
pub fn dice_volume(pred: &Volume3D, mask: &MaskVolume, smooth: f64) -> Result<LossValue> {
    let ov = overlap(pred, mask)?;
    let num = 2.0 * ov.tp + smooth;
    let den = ov.sp + ov.sy + smooth;
    ratio_loss(pred, mask, &ov, num, den, |y| 2.0 * y, |_| 1.0)
}

/// Soft IoU loss `1 - (tp + s) / (Σp + Σy - tp + s)`.
pub fn iou_volume(pred: &Volume3D, mask: &MaskVolume, smooth: f64) -> Result<LossValue> {
    let ov = overlap(pred, mask)?;
    let num = ov.tp + smooth;
    let den = ov.sp + ov.sy - ov.tp + smooth;
    ratio_loss(pred, mask, &ov, num, den, |y| y, |y| 1.0 - y)
}

/// Soft Tversky loss `1 - (2·tp + s) / (2·tp + 2a·fp + 2b·fn + s)`.
///
/// Doubling the counts keeps the smoothing constant on the same footing as
/// the Dice loss, so `a = b = 0.5` reproduces Dice exactly.
pub fn tversky_volume(pred: &Volume3D, mask: &MaskVolume, a: f64, b: f64, smooth: f64) -> Result<LossValue> {
    let ov = overlap(pred, mask)?;
    let fp = ov.sp - ov.tp;
    let fn_ = ov.sy - ov.tp;
    let num = 2.0 * ov.tp + smooth;
    let den = 2.0 * ov.tp + 2.0 * a * fp + 2.0 * b * fn_ + smooth;
    // d tp = y, d fp = 1 - y, d fn = -y
    ratio_loss(pred, mask, &ov, num, den, |y| 2.0 * y, |y| 2.0 * y + 2.0 * a * (1.0 - y) - 2.0 * b * y)
}

fn sum_losses(a: LossValue, b: LossValue) -> Result<LossValue> {
    let dims = a.grad.dims();
    let grad = a.grad.data().iter().zip(b.grad.data()).map(|(x, y)| x + y).collect();
    Ok(LossValue { value: a.value + b.value, grad: Volume3D::new(dims, grad)? })
}

/// The comparison losses: everything except the adaptive focal loss.
pub fn comparison_loss(pred: &Volume3D, mask: &MaskVolume, spec: &LossSpec) -> Result<LossValue> {
    spec.validate()?;
    match spec.kind {
        LossKind::FocalBaseline => focal_volume(pred, mask, spec.alpha_fixed, spec.gamma_fixed),
        LossKind::CrossEntropy => cross_entropy_volume(pred, mask),
        LossKind::Dice => dice_volume(pred, mask, spec.smooth_eps),
        LossKind::Iou => iou_volume(pred, mask, spec.smooth_eps),
        LossKind::Tversky => tversky_volume(pred, mask, spec.tversky_alpha, spec.tversky_beta, spec.smooth_eps),
        LossKind::DiceCe => sum_losses(dice_volume(pred, mask, spec.smooth_eps)?, cross_entropy_volume(pred, mask)?),
        LossKind::DiceFocal => sum_losses(
            dice_volume(pred, mask, spec.smooth_eps)?,
            focal_volume(pred, mask, spec.alpha_fixed, spec.gamma_fixed)?,
        ),
        LossKind::Afl => Err(Error::InvalidInput("afl is not a comparison loss".to_string())),
    }
}

/// Any loss kind. `params` may carry cached adaptive parameters for `mask`;
/// they are computed on the fly otherwise.
pub fn evaluate(
    pred: &Volume3D,
    mask: &MaskVolume,
    spec: &LossSpec,
    params: Option<&AdaptiveParams>,
) -> Result<LossValue> {
    match spec.kind {
        LossKind::Afl => {
            spec.validate()?;
            match params {
                Some(p) => afl_volume_with(pred, mask, p, spec),
                None => afl_volume(pred, mask, spec),
            }
        }
        _ => comparison_loss(pred, mask, spec),
    }
}
