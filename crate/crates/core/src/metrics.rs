//! Segmentation loss and per-image mIoU.

use crate::tensor::{NodeId, Scalar, Tape, TensorError};

/// Label reserved for pixels that take no part in loss or metric.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction has {pred} pixels, target has {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("{len} pixels is not a whole number of {per_image}-pixel images")]
    RaggedBatch { len: usize, per_image: usize },
    #[error("label {label} outside 0..{num_classes} at pixel {index}")]
    BadLabel {
        label: u8,
        index: usize,
        num_classes: usize,
    },
    #[error("num_classes must be >= 1")]
    NoClasses,
}

/// Per-class intersection and union counts over non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
    valid: u64,
    ignore: u8,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize, ignore: u8) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            valid: 0,
            ignore,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.union.len()
    }

    pub fn add(&mut self, pred: &[u8], target: &[u8]) -> Result<(), MetricsError> {
        if pred.len() != target.len() {
            return Err(MetricsError::LengthMismatch {
                pred: pred.len(),
                target: target.len(),
            });
        }
        let nc = self.num_classes();
        for (index, (&p, &t)) in pred.iter().zip(target).enumerate() {
            if t == self.ignore {
                continue;
            }
            for label in [p, t] {
                if label as usize >= nc {
                    return Err(MetricsError::BadLabel {
                        label,
                        index,
                        num_classes: nc,
                    });
                }
            }
            self.valid += 1;
            if p == t {
                self.intersection[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[t as usize] += 1;
            }
        }
        Ok(())
    }

    /// Adds counts of another accumulator (same class count).
    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
        self.valid += other.valid;
    }

    pub fn intersection(&self) -> &[u64] {
        &self.intersection
    }

    pub fn union(&self) -> &[u64] {
        &self.union
    }

    pub fn valid_pixels(&self) -> u64 {
        self.valid
    }

    /// IoU of class `c`, `None` when its union is empty.
    pub fn iou(&self, c: usize) -> Option<f64> {
        (self.union[c] > 0).then(|| self.intersection[c] as f64 / self.union[c] as f64)
    }

    /// Mean IoU over classes with a non-empty union; 1.0 when there are none.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.num_classes())
            .filter_map(|c| self.iou(c))
            .collect();
        if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Streaming batch mIoU: per-image scores, averaged over images.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouAccumulator {
    num_classes: usize,
    ignore: u8,
    scores: Vec<f64>,
}

impl MiouAccumulator {
    pub fn new(num_classes: usize, ignore: u8) -> Self {
        Self {
            num_classes,
            ignore,
            scores: Vec::new(),
        }
    }

    /// Adds a batch of images stored back to back, `pixels` each.
    pub fn add_batch(
        &mut self,
        pred: &[u8],
        target: &[u8],
        pixels: usize,
    ) -> Result<(), MetricsError> {
        if self.num_classes == 0 {
            return Err(MetricsError::NoClasses);
        }
        if pred.len() != target.len() {
            return Err(MetricsError::LengthMismatch {
                pred: pred.len(),
                target: target.len(),
            });
        }
        if pixels == 0 || pred.len() % pixels != 0 {
            return Err(MetricsError::RaggedBatch {
                len: pred.len(),
                per_image: pixels,
            });
        }
        for (p, t) in pred.chunks(pixels).zip(target.chunks(pixels)) {
            let mut acc = ConfusionAccumulator::new(self.num_classes, self.ignore);
            acc.add(p, t)?;
            self.scores.push(acc.miou());
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.scores.extend_from_slice(&other.scores);
    }

    pub fn images(&self) -> usize {
        self.scores.len()
    }

    /// Mean of per-image scores, `None` before any image was added. Scores
    /// are summed in sorted order so the result does not depend on how
    /// batches were split or merged.
    pub fn finalize(&self) -> Option<f64> {
        if self.scores.is_empty() {
            return None;
        }
        let mut s = self.scores.clone();
        s.sort_by(f64::total_cmp);
        Some(s.iter().sum::<f64>() / s.len() as f64)
    }
}

/// Batch mIoU for `n` images of `pixels` each stored back to back.
pub fn miou(
    pred: &[u8],
    target: &[u8],
    pixels: usize,
    num_classes: usize,
    ignore: u8,
) -> Result<f64, MetricsError> {
    let mut acc = MiouAccumulator::new(num_classes, ignore);
    acc.add_batch(pred, target, pixels)?;
    acc.finalize().ok_or(MetricsError::RaggedBatch {
        len: 0,
        per_image: pixels,
    })
}

/// Mean pixelwise cross-entropy over non-ignored pixels of `(N,C,H,W)`
/// logits against `(N,H,W)` targets.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    target: &[u8],
    ignore: u8,
) -> Result<NodeId, TensorError> {
    tape.cross_entropy(logits, target, ignore)
}
