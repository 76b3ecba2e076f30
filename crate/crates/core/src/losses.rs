//! Training objectives: supervised cross-entropy, confidence-weighted
//! cross-entropy consistency, a mean-squared-error consistency baseline, the
//! complement-weighted pseudo-label loss, and the consistency-weight ramp.
//!
//! Loss values take probability maps; the matching `*_dlogits` functions
//! return the gradient with respect to the pre-softmax logits, which is what
//! the backward pass consumes. Any label value `>= Y` counts as IGNORE.

use serde::{Deserialize, Serialize};

use crate::scalar::{sc, Scalar};
use crate::tensor::{LabelMask, Tensor};

const LOG_FLOOR: f64 = 1e-12;

fn nll<T: Scalar>(p: T) -> T {
    -(p.max(sc(LOG_FLOOR))).ln()
}

/// Mean cross-entropy over pixels with a valid label. All-IGNORE input is
/// defined as zero; use [`supervised_loss_counted`] to observe that case.
pub fn supervised_loss<T: Scalar>(pred: &Tensor<T>, y: &LabelMask) -> T {
    supervised_loss_counted(pred, y).0
}

/// Supervised loss together with the number of contributing pixels.
pub fn supervised_loss_counted<T: Scalar>(pred: &Tensor<T>, y: &LabelMask) -> (T, usize) {
    assert_eq!((pred.h, pred.w), (y.h, y.w), "prediction/label shape mismatch");
    let yc = pred.c;
    let mut sum = T::zero();
    let mut n = 0usize;
    for (px, &lab) in pred.data.chunks_exact(yc).zip(&y.classes) {
        let lab = lab as usize;
        if lab >= yc {
            continue;
        }
        sum += nll(px[lab]);
        n += 1;
    }
    if n == 0 {
        (T::zero(), 0)
    } else {
        (sum / sc(n as f64), n)
    }
}

/// Logit gradient of [`supervised_loss`].
pub fn supervised_dlogits<T: Scalar>(probs: &Tensor<T>, y: &LabelMask) -> Tensor<T> {
    let yc = probs.c;
    let n_valid = y.classes.iter().filter(|&&l| (l as usize) < yc).count();
    let mut d = Tensor::zeros(probs.h, probs.w, yc);
    if n_valid == 0 {
        return d;
    }
    let inv: T = T::one() / sc(n_valid as f64);
    for ((dpx, px), &lab) in d
        .data
        .chunks_exact_mut(yc)
        .zip(probs.data.chunks_exact(yc))
        .zip(&y.classes)
    {
        let lab = lab as usize;
        if lab >= yc {
            continue;
        }
        for (c, dv) in dpx.iter_mut().enumerate() {
            let ind = if c == lab { T::one() } else { T::zero() };
            *dv = (px[c] - ind) * inv;
        }
    }
    d
}

/// Confidence-weighted cross-entropy against hard teacher labels, averaged
/// over all pixels. Zero-confidence pixels contribute exactly zero but stay
/// in the denominator.
pub fn conf_ce_loss<T: Scalar>(pred: &Tensor<T>, hard: &LabelMask, conf: &[T]) -> T {
    assert_eq!((pred.h, pred.w), (hard.h, hard.w), "prediction/target shape mismatch");
    assert_eq!(conf.len(), pred.h * pred.w, "confidence map size mismatch");
    let yc = pred.c;
    let mut sum = T::zero();
    for ((px, &lab), &c) in pred
        .data
        .chunks_exact(yc)
        .zip(&hard.classes)
        .zip(conf)
    {
        if c == T::zero() {
            continue;
        }
        sum += c * nll(px[lab as usize]);
    }
    sum / sc((pred.h * pred.w) as f64)
}

/// Logit gradient of [`conf_ce_loss`].
pub fn conf_ce_dlogits<T: Scalar>(probs: &Tensor<T>, hard: &LabelMask, conf: &[T]) -> Tensor<T> {
    let yc = probs.c;
    let inv: T = T::one() / sc((probs.h * probs.w) as f64);
    let mut d = Tensor::zeros(probs.h, probs.w, yc);
    for (((dpx, px), &lab), &cw) in d
        .data
        .chunks_exact_mut(yc)
        .zip(probs.data.chunks_exact(yc))
        .zip(&hard.classes)
        .zip(conf)
    {
        if cw == T::zero() {
            continue;
        }
        let lab = lab as usize;
        for (c, dv) in dpx.iter_mut().enumerate() {
            let ind = if c == lab { T::one() } else { T::zero() };
            *dv = cw * (px[c] - ind) * inv;
        }
    }
    d
}

/// Mean squared difference between two probability maps, averaged over every
/// entry (pixels times classes).
pub fn mse_consistency_loss<T: Scalar>(pred: &Tensor<T>, target_soft: &Tensor<T>) -> T {
    assert!(pred.same_shape(target_soft), "probability map shape mismatch");
    let mut sum = T::zero();
    for (&a, &b) in pred.data.iter().zip(&target_soft.data) {
        let d = a - b;
        sum += d * d;
    }
    sum / sc(pred.len() as f64)
}

/// Logit gradient of [`mse_consistency_loss`] through the softmax.
pub fn mse_consistency_dlogits<T: Scalar>(probs: &Tensor<T>, target_soft: &Tensor<T>) -> Tensor<T> {
    let yc = probs.c;
    let two_over_n: T = sc(2.0 / probs.len() as f64);
    let mut d = Tensor::zeros(probs.h, probs.w, yc);
    for ((dpx, px), tpx) in d
        .data
        .chunks_exact_mut(yc)
        .zip(probs.data.chunks_exact(yc))
        .zip(target_soft.data.chunks_exact(yc))
    {
        // dL/dp, then the softmax Jacobian: dlogit_j = p_j (g_j - sum_k g_k p_k)
        let mut dot = T::zero();
        for c in 0..yc {
            let g = two_over_n * (px[c] - tpx[c]);
            dpx[c] = g;
            dot += g * px[c];
        }
        for c in 0..yc {
            dpx[c] = px[c] * (dpx[c] - dot);
        }
    }
    d
}

/// Cross-entropy against externally supplied pseudo-labels, weighted by the
/// complement of the teacher confidence, averaged over valid pseudo-label
/// pixels.
pub fn cam_loss<T: Scalar>(pred: &Tensor<T>, pseudo: &LabelMask, conf: &[T]) -> T {
    assert_eq!((pred.h, pred.w), (pseudo.h, pseudo.w), "prediction/pseudo shape mismatch");
    let yc = pred.c;
    let mut sum = T::zero();
    let mut n = 0usize;
    for ((px, &lab), &c) in pred.data.chunks_exact(yc).zip(&pseudo.classes).zip(conf) {
        let lab = lab as usize;
        if lab >= yc {
            continue;
        }
        n += 1;
        let w = T::one() - c;
        if w == T::zero() {
            continue;
        }
        sum += w * nll(px[lab]);
    }
    if n == 0 {
        T::zero()
    } else {
        sum / sc(n as f64)
    }
}

/// Logit gradient of [`cam_loss`].
pub fn cam_dlogits<T: Scalar>(probs: &Tensor<T>, pseudo: &LabelMask, conf: &[T]) -> Tensor<T> {
    let yc = probs.c;
    let n_valid = pseudo.classes.iter().filter(|&&l| (l as usize) < yc).count();
    let mut d = Tensor::zeros(probs.h, probs.w, yc);
    if n_valid == 0 {
        return d;
    }
    let inv: T = T::one() / sc(n_valid as f64);
    for (((dpx, px), &lab), &c) in d
        .data
        .chunks_exact_mut(yc)
        .zip(probs.data.chunks_exact(yc))
        .zip(&pseudo.classes)
        .zip(conf)
    {
        let lab = lab as usize;
        if lab >= yc {
            continue;
        }
        let w = (T::one() - c) * inv;
        for (cc, dv) in dpx.iter_mut().enumerate() {
            let ind = if cc == lab { T::one() } else { T::zero() };
            *dv = w * (px[cc] - ind);
        }
    }
    d
}

/// Gaussian ramp for the consistency weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampSchedule {
    pub beta_max: f64,
    pub ramp_epochs: usize,
}

impl Default for RampSchedule {
    fn default() -> Self {
        RampSchedule {
            beta_max: 1.0,
            ramp_epochs: 5,
        }
    }
}

/// Consistency weight at a given epoch: `beta_max * exp(-5 (1 - t/T)^2)`
/// while ramping, `beta_max` from `ramp_epochs` onward.
pub fn beta_at(schedule: &RampSchedule, epoch: usize) -> f64 {
    if schedule.ramp_epochs == 0 || epoch >= schedule.ramp_epochs {
        return schedule.beta_max;
    }
    let t = epoch as f64 / schedule.ramp_epochs as f64;
    schedule.beta_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// One training step's loss breakdown.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub sup: f64,
    pub con: f64,
    pub cam: Option<f64>,
    pub beta_t: f64,
    pub total: f64,
}

impl LossReport {
    pub fn compose(sup: f64, con: f64, cam: Option<f64>, beta_t: f64) -> Self {
        LossReport {
            sup,
            con,
            cam,
            beta_t,
            total: sup + beta_t * con + cam.unwrap_or(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // independently computed constants backing the worked examples
    const LN2_HALF: f64 = 0.346_573_590_279_972_64;
    const CONF_EXAMPLE: f64 = 0.623_832_462_503_950_8;
    const EXP_NEG5: f64 = 0.006_737_946_999_085_467;

    fn probs2(p: &[(f64, f64)]) -> Tensor<f64> {
        let mut data = Vec::new();
        for &(a, b) in p {
            data.push(a);
            data.push(b);
        }
        Tensor::from_vec(1, p.len(), 2, data)
    }

    #[test]
    fn supervised_loss_of_correct_onehot_is_zero() {
        let pred = probs2(&[(1.0, 0.0), (0.0, 1.0)]);
        let y = LabelMask {
            h: 1,
            w: 2,
            classes: vec![0, 1],
        };
        assert_eq!(supervised_loss(&pred, &y), 0.0);
    }

    #[test]
    fn supervised_loss_of_uniform_is_ln_y() {
        let y_classes = 5usize;
        let pred = Tensor::from_vec(1, 3, y_classes, vec![1.0 / y_classes as f64; 3 * y_classes]);
        let y = LabelMask {
            h: 1,
            w: 3,
            classes: vec![0, 2, 4],
        };
        let got = supervised_loss(&pred, &y);
        assert!((got - (y_classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_worked_example() {
        let pred = probs2(&[(0.5, 0.5), (1.0, 0.0)]);
        let y = LabelMask {
            h: 1,
            w: 2,
            classes: vec![0, 0],
        };
        assert!((supervised_loss(&pred, &y) - LN2_HALF).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_ignores_out_of_range_labels() {
        let pred = probs2(&[(0.5, 0.5), (1.0, 0.0)]);
        let y = LabelMask {
            h: 1,
            w: 2,
            classes: vec![2, 0],
        };
        // only the second pixel counts, and it is exactly right
        let (loss, n) = supervised_loss_counted(&pred, &y);
        assert_eq!(loss, 0.0);
        assert_eq!(n, 1);
        let all_ignore = LabelMask {
            h: 1,
            w: 2,
            classes: vec![2, 2],
        };
        assert_eq!(supervised_loss_counted(&pred, &all_ignore), (0.0, 0));
    }

    #[test]
    fn conf_ce_zero_confidence_gives_zero_loss_and_gradient() {
        let pred = probs2(&[(0.3, 0.7), (0.9, 0.1)]);
        let hard = LabelMask {
            h: 1,
            w: 2,
            classes: vec![1, 0],
        };
        let conf = vec![0.0, 0.0];
        assert_eq!(conf_ce_loss(&pred, &hard, &conf), 0.0);
        let d = conf_ce_dlogits(&pred, &hard, &conf);
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conf_ce_with_full_confidence_equals_plain_ce() {
        let pred = probs2(&[(0.3, 0.7), (0.9, 0.1)]);
        let hard = LabelMask {
            h: 1,
            w: 2,
            classes: vec![1, 0],
        };
        let conf = vec![1.0, 1.0];
        let got = conf_ce_loss(&pred, &hard, &conf);
        let want = supervised_loss(&pred, &hard);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn conf_ce_worked_example() {
        let pred = probs2(&[(0.5, 0.5)]);
        let hard = LabelMask {
            h: 1,
            w: 1,
            classes: vec![0],
        };
        let got = conf_ce_loss(&pred, &hard, &[0.9]);
        assert!((got - CONF_EXAMPLE).abs() < 1e-12);
    }

    #[test]
    fn conf_ce_denominator_counts_all_pixels() {
        // appending zero-confidence pixels rescales the loss by the pixel
        // count and nothing else
        let pred = probs2(&[(0.5, 0.5), (0.2, 0.8)]);
        let hard = LabelMask {
            h: 1,
            w: 2,
            classes: vec![0, 1],
        };
        let conf = vec![0.9, 0.85];
        let base = conf_ce_loss(&pred, &hard, &conf);

        let pred2 = probs2(&[(0.5, 0.5), (0.2, 0.8), (0.6, 0.4), (0.1, 0.9)]);
        let hard2 = LabelMask {
            h: 1,
            w: 4,
            classes: vec![0, 1, 0, 0],
        };
        let conf2 = vec![0.9, 0.85, 0.0, 0.0];
        let doubled = conf_ce_loss(&pred2, &hard2, &conf2);
        assert!((doubled - base * 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let a = probs2(&[(1.0, 0.0)]);
        let b = probs2(&[(0.0, 1.0)]);
        assert_eq!(mse_consistency_loss(&a, &a), 0.0);
        assert!((mse_consistency_loss(&a, &b) - 1.0).abs() < 1e-12);
        let c = probs2(&[(0.3, 0.7)]);
        assert_eq!(
            mse_consistency_loss(&a, &c),
            mse_consistency_loss(&c, &a)
        );
    }

    #[test]
    fn mse_dlogits_matches_finite_differences() {
        let logits = Tensor::from_vec(1, 2, 3, vec![0.3, -0.2, 0.5, 1.0, 0.0, -0.7]);
        let target = probs2_3(&[(0.2, 0.3, 0.5), (0.6, 0.3, 0.1)]);
        let f = |lg: &Tensor<f64>| {
            let p = crate::nn::softmax_hwc(lg);
            mse_consistency_loss(&p, &target)
        };
        let p = crate::nn::softmax_hwc(&logits);
        let d = mse_consistency_dlogits(&p, &target);
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.data[i] += eps;
            lm.data[i] -= eps;
            let num = (f(&lp) - f(&lm)) / (2.0 * eps);
            assert!((num - d.data[i]).abs() < 1e-9, "{num} vs {}", d.data[i]);
        }
    }

    fn probs2_3(p: &[(f64, f64, f64)]) -> Tensor<f64> {
        let mut data = Vec::new();
        for &(a, b, c) in p {
            data.extend([a, b, c]);
        }
        Tensor::from_vec(1, p.len(), 3, data)
    }

    #[test]
    fn cam_gates_complement_of_confidence() {
        let pred = probs2(&[(0.5, 0.5)]);
        let pseudo = LabelMask {
            h: 1,
            w: 1,
            classes: vec![0],
        };
        assert_eq!(cam_loss(&pred, &pseudo, &[1.0]), 0.0);
        let full = cam_loss(&pred, &pseudo, &[0.0]);
        assert!((full - supervised_loss(&pred, &pseudo)).abs() < 1e-12);
    }

    #[test]
    fn conf_and_cam_weights_partition_unity() {
        // gate passed: weights c and 1-c sum to 1; gate failed: 0 and 1
        let tau = 0.6;
        for &raw in &[0.9, 0.55, 0.7] {
            let c = if raw > tau { raw } else { 0.0 };
            let cam_w = 1.0 - c;
            if raw > tau {
                assert!((c + cam_w - 1.0f64).abs() < 1e-15);
            } else {
                assert_eq!(c, 0.0);
                assert_eq!(cam_w, 1.0);
            }
        }
    }

    #[test]
    fn ramp_examples() {
        let s = RampSchedule {
            beta_max: 2.0,
            ramp_epochs: 5,
        };
        assert!((beta_at(&s, 0) - 2.0 * EXP_NEG5).abs() < 1e-12);
        assert_eq!(beta_at(&s, 5), 2.0);
        assert_eq!(beta_at(&s, 9), 2.0);
        let degenerate = RampSchedule {
            beta_max: 1.5,
            ramp_epochs: 0,
        };
        assert_eq!(beta_at(&degenerate, 0), 1.5);
        assert_eq!(beta_at(&degenerate, 100), 1.5);
    }

    #[test]
    fn ramp_is_monotone() {
        let s = RampSchedule {
            beta_max: 1.0,
            ramp_epochs: 40,
        };
        let mut prev = -1.0;
        for e in 0..80 {
            let b = beta_at(&s, e);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn ce_gradient_dominates_mse_gradient_near_convergence() {
        // scalar check on the correct-class coordinate with confidence 1:
        // |d CE/dp| = 1/p -> 1 while the squared-error derivative 2(1-p) -> 0
        for &p in &[0.9, 0.99, 0.999] {
            let ce_grad: f64 = 1.0 / p;
            let mse_grad: f64 = 2.0 * (1.0 - p);
            assert!(ce_grad > mse_grad);
        }
        assert!((1.0f64 / 0.999 - 1.0).abs() < 2e-3);
        assert!(2.0 * (1.0 - 0.999) < 3e-3);
    }

    #[test]
    fn loss_report_composition() {
        let r = LossReport::compose(0.5, 0.25, None, 2.0);
        assert_eq!(r.total, 1.0);
        let rc = LossReport::compose(0.5, 0.25, Some(0.1), 2.0);
        assert!((rc.total - 1.1).abs() < 1e-15);
    }

    #[test]
    fn supervised_dlogits_matches_finite_differences() {
        let logits = Tensor::from_vec(1, 3, 2, vec![0.4, -0.1, 2.0, 0.3, -1.0, 0.2]);
        let y = LabelMask {
            h: 1,
            w: 3,
            classes: vec![0, 2, 1],
        };
        let f = |lg: &Tensor<f64>| {
            let p = crate::nn::softmax_hwc(lg);
            supervised_loss(&p, &y)
        };
        let p = crate::nn::softmax_hwc(&logits);
        let d = supervised_dlogits(&p, &y);
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.data[i] += eps;
            lm.data[i] -= eps;
            let num = (f(&lp) - f(&lm)) / (2.0 * eps);
            assert!((num - d.data[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn conf_ce_dlogits_matches_finite_differences() {
        let logits = Tensor::from_vec(1, 2, 3, vec![0.4, -0.1, 2.0, 0.3, -1.0, 0.2]);
        let hard = LabelMask {
            h: 1,
            w: 2,
            classes: vec![2, 0],
        };
        let conf = vec![0.9, 0.0];
        let f = |lg: &Tensor<f64>| {
            let p = crate::nn::softmax_hwc(lg);
            conf_ce_loss(&p, &hard, &conf)
        };
        let p = crate::nn::softmax_hwc(&logits);
        let d = conf_ce_dlogits(&p, &hard, &conf);
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.data[i] += eps;
            lm.data[i] -= eps;
            let num = (f(&lp) - f(&lm)) / (2.0 * eps);
            assert!((num - d.data[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn cam_dlogits_matches_finite_differences() {
        let logits = Tensor::from_vec(1, 3, 2, vec![0.4, -0.1, 2.0, 0.3, -1.0, 0.2]);
        let pseudo = LabelMask {
            h: 1,
            w: 3,
            classes: vec![0, 2, 1],
        };
        let conf = vec![0.3, 0.9, 0.0];
        let f = |lg: &Tensor<f64>| {
            let p = crate::nn::softmax_hwc(lg);
            cam_loss(&p, &pseudo, &conf)
        };
        let p = crate::nn::softmax_hwc(&logits);
        let d = cam_dlogits(&p, &pseudo, &conf);
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.data[i] += eps;
            lm.data[i] -= eps;
            let num = (f(&lp) - f(&lm)) / (2.0 * eps);
            assert!((num - d.data[i]).abs() < 1e-9);
        }
    }
}
