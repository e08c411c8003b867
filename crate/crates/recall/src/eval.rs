//! Segmentation metrics: confusion matrices, per-class IoU, grouped mIoU and
//! pixel accuracy, plus the per-step report records emitted by experiment runs.
//!
//! Convention: undefined metrics (zero denominator) are excluded from means
//! rather than counted as 0. Background contributes to the "all" group and is
//! excluded from the old/new groups.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{ClassId, ClassSet, LabelMap};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("ground truth is {gh}x{gw} but prediction is {ph:?}x{pw:?}")]
    ShapeMismatch {
        gh: usize,
        gw: usize,
        ph: usize,
        pw: usize,
    },
    #[error("label {0} outside the {1}-class universe")]
    LabelOutOfRange(u8, usize),
    #[error("cannot merge a {0}-class matrix into a {1}-class matrix")]
    SizeMismatch(usize, usize),
}

/// Row = ground truth class, column = predicted class. Counts are additive:
/// merging two matrices is the same as accumulating their pixels jointly.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: ClassId, pred: ClassId) -> u64 {
        self.counts[gt.0 as usize * self.num_classes + pred.0 as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one ground-truth/prediction pair pixel by pixel.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<(), EvalError> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(EvalError::ShapeMismatch {
                gh: gt.height(),
                gw: gt.width(),
                ph: pred.height(),
                pw: pred.width(),
            });
        }
        for (g, p) in gt.labels().iter().zip(pred.labels()) {
            let (gi, pi) = (g.0 as usize, p.0 as usize);
            if gi >= self.num_classes {
                return Err(EvalError::LabelOutOfRange(g.0, self.num_classes));
            }
            if pi >= self.num_classes {
                return Err(EvalError::LabelOutOfRange(p.0, self.num_classes));
            }
            self.counts[gi * self.num_classes + pi] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if self.num_classes != other.num_classes {
            return Err(EvalError::SizeMismatch(other.num_classes, self.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..(c + 1) * self.num_classes]
            .iter()
            .sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes)
            .map(|r| self.counts[r * self.num_classes + c])
            .sum()
    }

    /// TP / (TP + FP + FN); `None` when the class appears in neither ground
    /// truth nor prediction.
    pub fn iou(&self, c: ClassId) -> Option<f64> {
        let ci = c.0 as usize;
        let tp = self.counts[ci * self.num_classes + ci];
        let denom = self.row_sum(ci) + self.col_sum(ci) - tp;
        if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        }
    }

    /// TP / (ground-truth pixels of the class); `None` when the class has no
    /// ground-truth pixels.
    pub fn pixel_accuracy(&self, c: ClassId) -> Option<f64> {
        let ci = c.0 as usize;
        let row = self.row_sum(ci);
        if row == 0 {
            None
        } else {
            Some(self.counts[ci * self.num_classes + ci] as f64 / row as f64)
        }
    }

    /// Mean of the defined per-class IoUs within `group`; `None` when no class
    /// in the group has a defined IoU.
    pub fn miou(&self, group: &ClassSet) -> Option<f64> {
        let defined: Vec<f64> = group.iter().filter_map(|c| self.iou(c)).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Mean IoU per group, in group order.
pub fn grouped_miou(cm: &ConfusionMatrix, groups: &[ClassSet]) -> Vec<Option<f64>> {
    groups.iter().map(|g| cm.miou(g)).collect()
}

/// Byte-count snapshot of everything a method keeps at the end of a step.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct MemorySnapshot {
    /// Serialized current model (encoder + main decoder).
    pub model_bytes: u64,
    /// All helper decoders stored so far.
    pub helper_bytes: u64,
    /// Generator + classifier + class mapping (generator-backed methods only).
    pub generator_bytes: u64,
    /// Raw samples stored by the store-and-replay baseline.
    pub stored_sample_bytes: u64,
    /// Total footprint of the method itself.
    pub total_bytes: u64,
    /// Reference curve: what storing every past training image would cost.
    pub saving_images_ref_bytes: u64,
}

/// Metrics and bookkeeping recorded after one incremental step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Classes covered by the model after this step.
    pub classes: ClassSet,
    /// Per-class IoU over the full universe (null = undefined at this step).
    pub per_class_iou: Vec<Option<f64>>,
    /// Per-class pixel accuracy over the full universe.
    pub per_class_pa: Vec<Option<f64>>,
    /// mIoU over the initial step's foreground classes.
    pub miou_old: Option<f64>,
    /// mIoU over all foreground classes added after step 0 (learned so far).
    pub miou_new: Option<f64>,
    /// mIoU over every covered class, background included.
    pub miou_all: Option<f64>,
    /// Mean pixel accuracy over the classes added at this step.
    pub pa_new: Option<f64>,
    pub memory: MemorySnapshot,
    pub wall_ms: u64,
    pub confusion: ConfusionMatrix,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{rng_from, BACKGROUND};
    use rand::Rng;

    fn map(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.iter().map(|x| ClassId(*x)).collect())
    }

    #[test]
    fn accumulate_diagonal_when_prediction_matches() {
        let gt = map(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.count(ClassId(1), ClassId(1)), 2);
        assert_eq!(cm.count(ClassId(0), ClassId(0)), 1);
        assert_eq!(cm.count(ClassId(2), ClassId(2)), 1);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.iou(ClassId(1)), Some(1.0));
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let mut rng = rng_from(5);
        let a_gt = map(4, 4, &(0..16).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>());
        let a_pr = map(4, 4, &(0..16).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>());
        let b_gt = map(4, 4, &(0..16).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>());
        let b_pr = map(4, 4, &(0..16).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>());

        let mut joint = ConfusionMatrix::new(4);
        joint.accumulate(&a_gt, &a_pr).unwrap();
        joint.accumulate(&b_gt, &b_pr).unwrap();

        let mut left = ConfusionMatrix::new(4);
        left.accumulate(&a_gt, &a_pr).unwrap();
        let mut right = ConfusionMatrix::new(4);
        right.accumulate(&b_gt, &b_pr).unwrap();
        left.merge(&right).unwrap();

        assert_eq!(left, joint);
    }

    #[test]
    fn accumulate_matches_counting_oracle() {
        let mut rng = rng_from(9);
        let gt_v: Vec<u8> = (0..64).map(|_| rng.gen_range(0..6)).collect();
        let pr_v: Vec<u8> = (0..64).map(|_| rng.gen_range(0..6)).collect();
        let mut cm = ConfusionMatrix::new(6);
        cm.accumulate(&map(8, 8, &gt_v), &map(8, 8, &pr_v)).unwrap();
        // nested-loop oracle
        for g in 0..6u8 {
            for p in 0..6u8 {
                let expect = gt_v
                    .iter()
                    .zip(&pr_v)
                    .filter(|(a, b)| **a == g && **b == p)
                    .count() as u64;
                assert_eq!(cm.count(ClassId(g), ClassId(p)), expect);
            }
        }
    }

    #[test]
    fn hand_case_iou() {
        // gt=[1,1;2,0], pred=[1,2;2,0] -> IoU(1)=0.5, IoU(2)=0.5, IoU(0)=1.0
        let gt = map(2, 2, &[1, 1, 2, 0]);
        let pred = map(2, 2, &[1, 2, 2, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.iou(ClassId(1)), Some(0.5));
        assert_eq!(cm.iou(ClassId(2)), Some(0.5));
        assert_eq!(cm.iou(ClassId(0)), Some(1.0));
        let all = ClassSet::universe(2);
        assert!((cm.miou(&all).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let gt = map(1, 2, &[0, 1]);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.iou(ClassId(3)), None);
        assert_eq!(cm.pixel_accuracy(ClassId(3)), None);
        assert_eq!(cm.miou(&ClassSet::universe(3)), Some(1.0));
    }

    #[test]
    fn grouped_miou_single_group_is_plain_miou() {
        let gt = map(2, 2, &[1, 1, 2, 0]);
        let pred = map(2, 2, &[1, 2, 2, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &pred).unwrap();
        let groups = vec![ClassSet::universe(2)];
        assert_eq!(grouped_miou(&cm, &groups)[0], cm.miou(&ClassSet::universe(2)));
    }

    #[test]
    fn grouped_miou_partition_recombines_to_foreground_mean() {
        let mut rng = rng_from(21);
        let gt_v: Vec<u8> = (0..64).map(|_| rng.gen_range(0..6)).collect();
        let pr_v: Vec<u8> = (0..64).map(|_| rng.gen_range(0..6)).collect();
        let mut cm = ConfusionMatrix::new(6);
        cm.accumulate(&map(8, 8, &gt_v), &map(8, 8, &pr_v)).unwrap();
        let old = ClassSet::new([ClassId(1), ClassId(2), ClassId(3)]);
        let new = ClassSet::new([ClassId(4), ClassId(5)]);
        let both = old.union(&new);
        // all six classes present in a dense random map, so every IoU is defined
        let w_old = cm.miou(&old).unwrap() * old.len() as f64;
        let w_new = cm.miou(&new).unwrap() * new.len() as f64;
        let combined = (w_old + w_new) / both.len() as f64;
        assert!((combined - cm.miou(&both).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_group_is_undefined() {
        let cm = ConfusionMatrix::new(3);
        assert_eq!(grouped_miou(&cm, &[ClassSet::empty()])[0], None);
    }

    #[test]
    fn pixel_accuracy_direct_ratio() {
        // gt row for class 1: 2 correct, 2 elsewhere -> 0.5
        let gt = map(2, 2, &[1, 1, 1, 1]);
        let pred = map(2, 2, &[1, 1, 0, 2]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.pixel_accuracy(ClassId(1)), Some(0.5));
    }

    #[test]
    fn metrics_match_brute_force_on_random_maps() {
        let mut rng = rng_from(33);
        for _ in 0..50 {
            let gt_v: Vec<u8> = (0..64).map(|_| rng.gen_range(0..6)).collect();
            let pr_v: Vec<u8> = (0..64).map(|_| rng.gen_range(0..6)).collect();
            let mut cm = ConfusionMatrix::new(6);
            cm.accumulate(&map(8, 8, &gt_v), &map(8, 8, &pr_v)).unwrap();
            for c in 0..6u8 {
                let tp = gt_v.iter().zip(&pr_v).filter(|(a, b)| **a == c && **b == c).count();
                let in_gt = gt_v.iter().filter(|a| **a == c).count();
                let in_pr = pr_v.iter().filter(|a| **a == c).count();
                let denom = in_gt + in_pr - tp;
                let expect_iou = if denom == 0 { None } else { Some(tp as f64 / denom as f64) };
                assert_eq!(cm.iou(ClassId(c)), expect_iou);
                let expect_pa = if in_gt == 0 { None } else { Some(tp as f64 / in_gt as f64) };
                assert_eq!(cm.pixel_accuracy(ClassId(c)), expect_pa);
            }
        }
        let _ = BACKGROUND;
    }
}
