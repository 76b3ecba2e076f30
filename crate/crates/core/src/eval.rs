//! Teacher-ensemble inference and evaluation: confusion-matrix mIoU and
//! sliding-window prediction for inputs larger than the training crop.

use crate::error::{Error, Result};
use crate::nn::argmax_channel;
use crate::scalar::Scalar;
use crate::teachers::TeacherPair;
use crate::tensor::{LabelMask, Tensor};

/// Y x Y prediction counts; rows are ground truth, columns predictions.
/// IGNORE pixels never enter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Accumulate one image pair. Ground-truth values `>= num_classes` are
    /// IGNORE and skipped.
    pub fn record(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        let y = self.num_classes;
        for (&p, &g) in pred.classes.iter().zip(&gt.classes) {
            let (p, g) = (p as usize, g as usize);
            if g >= y {
                continue;
            }
            if p >= y {
                return Err(Error::Dataset(format!(
                    "prediction holds class {p}, outside the {y}-class set"
                )));
            }
            self.counts[g * y + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of scored pixels predicted correctly.
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let y = self.num_classes;
        let diag: u64 = (0..y).map(|c| self.counts[c * y + c]).sum();
        diag as f64 / total as f64
    }

    /// Per-class intersection over union; `None` for classes absent from
    /// both prediction and ground truth. The mean runs over present classes.
    pub fn iou(&self) -> (Vec<Option<f64>>, f64) {
        let y = self.num_classes;
        let mut per_class = Vec::with_capacity(y);
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..y {
            let tp = self.counts[c * y + c];
            let fp: u64 = (0..y).filter(|&g| g != c).map(|g| self.counts[g * y + c]).sum();
            let fn_: u64 = (0..y).filter(|&p| p != c).map(|p| self.counts[c * y + p]).sum();
            let denom = tp + fp + fn_;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                n += 1;
            }
        }
        let miou = if n == 0 { 0.0 } else { sum / n as f64 };
        (per_class, miou)
    }
}

/// Mean IoU over a matched prediction/ground-truth list.
pub fn miou(preds: &[LabelMask], gts: &[LabelMask], num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Dataset(format!(
            "evaluation needs matched non-empty lists, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.record(p, g)?;
    }
    Ok(cm.iou())
}

/// Argmax of the teacher-ensemble soft map.
pub fn infer<T: Scalar>(pair: &TeacherPair<T>, x: &Tensor<T>) -> Result<LabelMask> {
    Ok(argmax_channel(&pair.ensemble_soft(x)?))
}

/// Per-pixel sum of ensemble soft maps over overlapping windows; the last
/// row/column of windows is clamped to the border so every pixel is covered.
pub fn sliding_soft<T: Scalar>(
    pair: &TeacherPair<T>,
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let (wh, ww) = window;
    let (sh, sw) = stride;
    if wh > x.h || ww > x.w {
        return Err(Error::Config(format!(
            "window {wh}x{ww} exceeds the {}x{} image",
            x.h, x.w
        )));
    }
    if sh == 0 || sw == 0 || sh > wh || sw > ww {
        return Err(Error::Config(format!(
            "stride {sh}x{sw} must be positive and at most the window {wh}x{ww}"
        )));
    }
    let tops = window_starts(x.h, wh, sh);
    let lefts = window_starts(x.w, ww, sw);
    let y = pair.t1.arch.num_classes;
    let mut accum = Tensor::zeros(x.h, x.w, y);
    for &top in &tops {
        for &left in &lefts {
            let patch = x.crop(top, left, wh, ww);
            let soft = pair.ensemble_soft(&patch)?;
            for py in 0..wh {
                let dst = ((top + py) * x.w + left) * y;
                let src = py * ww * y;
                for i in 0..ww * y {
                    accum.data[dst + i] += soft.data[src + i];
                }
            }
        }
    }
    Ok(accum)
}

fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pos = 0usize;
    loop {
        if pos + window >= extent {
            starts.push(extent - window);
            break;
        }
        starts.push(pos);
        pos += stride;
    }
    starts.dedup();
    starts
}

/// Sliding-window inference: accumulate soft probabilities, then argmax
/// (ties to the lowest class index).
pub fn sliding_infer<T: Scalar>(
    pair: &TeacherPair<T>,
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<LabelMask> {
    Ok(argmax_channel(&sliding_soft(pair, x, window, stride)?))
}

/// Evaluation summary over a labelled set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub images: usize,
}

/// Run ensemble inference over labelled items and score them; a sliding
/// window is used when given, full-image inference otherwise.
pub fn evaluate<T: Scalar>(
    pair: &TeacherPair<T>,
    items: &[(Tensor<T>, LabelMask)],
    sliding: Option<((usize, usize), (usize, usize))>,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(pair.t1.arch.num_classes);
    for (img, gt) in items {
        let pred = match sliding {
            Some((window, stride)) => sliding_infer(pair, img, window, stride)?,
            None => infer(pair, img)?,
        };
        cm.record(&pred, gt)?;
    }
    let (per_class, miou) = cm.iou();
    Ok(EvalReport {
        per_class,
        miou,
        pixel_accuracy: cm.pixel_accuracy(),
        images: items.len(),
    })
}
