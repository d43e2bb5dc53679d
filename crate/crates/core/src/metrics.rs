//! Confusion-count segmentation metrics.
//!
//! Zero denominators evaluate to 1.0: a sample without positives to find (or
//! without negatives to reject) is scored as perfectly handled on that axis.

use crate::error::Result;
use crate::volume::{ensure_same_dims, MaskVolume, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Thresholds `pred` (label 1 iff `p >= threshold`) and tallies against `mask`.
pub fn confusion(pred: &Volume3D, mask: &MaskVolume, threshold: f64) -> Result<ConfusionCounts> {
    ensure_same_dims(pred.dims(), mask.dims())?;
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(mask.data()) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

/// The four metrics of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleMetrics {
    pub iou: f64,
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl From<&ConfusionCounts> for SampleMetrics {
    fn from(c: &ConfusionCounts) -> Self {
        Self { iou: iou(c), dsc: dsc(c), sensitivity: sensitivity(c), specificity: specificity(c) }
    }
}

impl SampleMetrics {
    /// Arithmetic mean in iteration order; `None` for an empty input.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a SampleMetrics>) -> Option<SampleMetrics> {
        let mut acc = SampleMetrics::default();
        let mut n = 0usize;
        for m in items {
            acc.iou += m.iou;
            acc.dsc += m.dsc;
            acc.sensitivity += m.sensitivity;
            acc.specificity += m.specificity;
            n += 1;
        }
        (n > 0).then(|| {
            let k = n as f64;
            SampleMetrics {
                iou: acc.iou / k,
                dsc: acc.dsc / k,
                sensitivity: acc.sensitivity / k,
                specificity: acc.specificity / k,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_inverted() {
        let d = Dims::new(2, 3, 3);
        let m = MaskVolume::new(d, (0..18).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let c = confusion(&m.to_volume(), &m, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_, c.tp, c.tn), (0, 0, 6, 12));
        let c = confusion(&m.inverted().to_volume(), &m, 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (0, 0, 12, 6));
        let s = SampleMetrics::from(&confusion(&m.to_volume(), &m, 0.5).unwrap());
        assert_eq!(s, SampleMetrics { iou: 1.0, dsc: 1.0, sensitivity: 1.0, specificity: 1.0 });
    }

    #[test]
    fn threshold_is_inclusive() {
        let d = Dims::new(1, 1, 2);
        let c = confusion(
            &Volume3D::new(d, vec![0.5, 0.4999]).unwrap(),
            &MaskVolume::new(d, vec![1, 1]).unwrap(),
            0.5,
        )
        .unwrap();
        assert_eq!((c.tp, c.fn_), (1, 1));
    }

    #[test]
    fn closed_forms() {
        let c = ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 0 };
        assert!((iou(&c) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&c), 0.5);
        assert_eq!(sensitivity(&c), 0.5);
        assert_eq!(specificity(&c), 0.0);
    }

    #[test]
    fn empty_ground_truth_scores_one() {
        let c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 };
        assert_eq!((iou(&c), dsc(&c), sensitivity(&c), specificity(&c)), (1.0, 1.0, 1.0, 1.0));
        let c = ConfusionCounts { tp: 0, fp: 3, fn_: 0, tn: 7 };
        assert_eq!((iou(&c), dsc(&c), sensitivity(&c)), (0.0, 0.0, 1.0));
    }

    #[test]
    fn mean_of_nothing() {
        assert_eq!(SampleMetrics::mean(&[]), None);
    }

    proptest! {
        #[test]
        fn dice_iou_identity(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
            let c = ConfusionCounts { tp, fp, fn_, tn };
            let (i, d) = (iou(&c), dsc(&c));
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
            for v in [i, d, sensitivity(&c), specificity(&c)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
