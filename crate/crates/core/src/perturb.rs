//! The three perturbation families: adversarial feature perturbation steered
//! by the teacher ensemble, CutMix box mixing of inputs and predictions, and
//! zoom consistency, plus the weak/strong input augmentation pair.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::nn::{bilinear_resize, nearest_resize_map, nearest_resize_mask, softmax_hwc};
use crate::scalar::{sc, Scalar};
use crate::teachers::{EnsemblePrediction, TeacherPair};
use crate::tensor::{LabelMask, Tensor};

/// Smallest spatial dimension any image entering the network may have.
pub const MIN_DIM: usize = 16;

// ── adversarial feature perturbation ────────────────────────────────────────

/// Search parameters for the adversarial feature direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TVatSpec {
    /// L2 radius of the returned perturbation.
    pub epsilon: f64,
    /// Power-iteration steps refining the direction.
    pub power_iters: usize,
    /// Probe length used while iterating; small but large enough to survive
    /// single-precision subtraction.
    pub xi: f64,
}

impl Default for TVatSpec {
    fn default() -> Self {
        TVatSpec {
            epsilon: 2.0,
            power_iters: 1,
            xi: 0.01,
        }
    }
}

impl TVatSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "perturbation radius must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.power_iters == 0 {
            return Err(Error::Config("power_iters must be at least 1".into()));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!(
                "probe scale must be positive and finite, got {}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// Sum over pixels of the Kullback-Leibler divergence between two
/// probability maps.
pub fn kl_divergence_sum<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> T {
    assert!(p.same_shape(q), "probability map shape mismatch");
    let floor: T = sc(1e-12);
    let mut sum = T::zero();
    for (&pv, &qv) in p.data.iter().zip(&q.data) {
        if pv > T::zero() {
            sum += pv * (pv.max(floor).ln() - qv.max(floor).ln());
        }
    }
    sum
}

fn mean_decode_logits<T: Scalar>(decoders: &[&SegModel<T>], z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut mean = decoders[0].decode(z)?;
    for d in &decoders[1..] {
        mean.add_assign(&d.decode(z)?);
    }
    mean.scale(sc(1.0 / decoders.len() as f64));
    Ok(mean)
}

/// Power iteration for the feature direction that most increases the
/// divergence between the decoders' clean and perturbed predictions.
fn adversarial_direction<T: Scalar, R: Rng>(
    decoders: &[&SegModel<T>],
    z: &Tensor<T>,
    spec: &TVatSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let p_clean = softmax_hwc(&mean_decode_logits(decoders, z)?);

    let mut d = Tensor::zeros(z.h, z.w, z.c);
    for v in &mut d.data {
        let n: f64 = rng.sample(StandardNormal);
        *v = sc(n);
    }
    let norm = d.l2_norm();
    if norm == T::zero() {
        d.data[0] = T::one();
    }
    d.scale(sc::<T>(spec.xi) / d.l2_norm());

    let inv_k: T = sc(1.0 / decoders.len() as f64);
    for it in 0..spec.power_iters {
        let z_pert = z.add(&d);
        let p_pert = softmax_hwc(&mean_decode_logits(decoders, &z_pert)?);
        // gradient of the summed KL w.r.t. the perturbed logits
        let mut dlogits = p_pert;
        for (dv, &pc) in dlogits.data.iter_mut().zip(&p_clean.data) {
            *dv = (*dv - pc) * inv_k;
        }
        let mut g = decoders[0].decode_input_grad(&z_pert, &dlogits)?;
        for dec in &decoders[1..] {
            g.add_assign(&dec.decode_input_grad(&z_pert, &dlogits)?);
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite divergence gradient at power iteration {it}"
            )));
        }
        let gnorm = g.l2_norm();
        if gnorm > T::zero() {
            g.scale(sc::<T>(spec.xi) / gnorm);
            d = g;
        }
    }
    d.scale(sc::<T>(spec.epsilon) / d.l2_norm());
    Ok(d)
}

/// Adversarial perturbation of the student's features, steered by the
/// response of the teacher ensemble.
pub fn tvat_perturbation<T: Scalar, R: Rng>(
    student_feat: &Tensor<T>,
    pair: &TeacherPair<T>,
    spec: &TVatSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    adversarial_direction(&[&pair.t1, &pair.t2], student_feat, spec, rng)
}

/// Adversarial perturbation steered by the student's own response (the
/// single-model ablation arm).
pub fn vat_perturbation<T: Scalar, R: Rng>(
    student_feat: &Tensor<T>,
    student: &SegModel<T>,
    spec: &TVatSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    adversarial_direction(&[student], student_feat, spec, rng)
}

/// Random feature direction of norm exactly `epsilon` (the non-adversarial
/// ablation arm).
pub fn uniform_perturbation<T: Scalar, R: Rng>(
    h: usize,
    w: usize,
    c: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!(
            "perturbation radius must be positive and finite, got {epsilon}"
        )));
    }
    let mut d = Tensor::zeros(h, w, c);
    for v in &mut d.data {
        let n: f64 = rng.sample(StandardNormal);
        *v = sc(n);
    }
    if d.l2_norm() == T::zero() {
        d.data[0] = T::one();
    }
    d.scale(sc::<T>(epsilon) / d.l2_norm());
    Ok(d)
}

// ── CutMix ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutMixMode {
    After,
    Before,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutMixCfg {
    pub mode: CutMixMode,
    pub area_min: f64,
    pub area_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
}

impl Default for CutMixCfg {
    fn default() -> Self {
        CutMixCfg {
            mode: CutMixMode::After,
            area_min: 0.25,
            area_max: 0.5,
            aspect_min: 0.5,
            aspect_max: 2.0,
        }
    }
}

impl CutMixCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max <= 1.0) {
            return Err(Error::Config(format!(
                "box area bounds must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.area_min, self.area_max
            )));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return Err(Error::Config(format!(
                "aspect bounds must satisfy 0 < min <= max, got [{}, {}]",
                self.aspect_min, self.aspect_max
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box mask: one inside the box, zero outside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixMask {
    pub h: usize,
    pub w: usize,
    pub top: usize,
    pub left: usize,
    pub box_h: usize,
    pub box_w: usize,
}

impl CutMixMask {
    /// Sample a box whose area fraction lands inside the configured bounds.
    pub fn sample<R: Rng>(h: usize, w: usize, cfg: &CutMixCfg, rng: &mut R) -> Result<CutMixMask> {
        cfg.validate()?;
        let total = (h * w) as f64;
        let frac = rng.gen_range(cfg.area_min..=cfg.area_max);
        let aspect = rng.gen_range(cfg.aspect_min..=cfg.aspect_max);
        let target = frac * total;
        let mut bh = ((target * aspect).sqrt().round() as usize).clamp(1, h);
        let mut bw = ((target / aspect).sqrt().round() as usize).clamp(1, w);
        // rounding and clamping can push the area outside the bounds;
        // nudge one side at a time until it lands back inside
        for _ in 0..(h + w) {
            let a = (bh * bw) as f64 / total;
            if a < cfg.area_min {
                if bw < w {
                    bw += 1;
                } else if bh < h {
                    bh += 1;
                } else {
                    break;
                }
            } else if a > cfg.area_max {
                if bw > 1 && ((bh * (bw - 1)) as f64 / total) >= cfg.area_min {
                    bw -= 1;
                } else if bh > 1 {
                    bh -= 1;
                } else {
                    break;
                }
            } else {
                break;
            }
        }
        let top = if bh < h { rng.gen_range(0..=h - bh) } else { 0 };
        let left = if bw < w { rng.gen_range(0..=w - bw) } else { 0 };
        Ok(CutMixMask {
            h,
            w,
            top,
            left,
            box_h: bh,
            box_w: bw,
        })
    }

    #[inline]
    pub fn inside(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.box_h && x >= self.left && x < self.left + self.box_w
    }

    pub fn area_fraction(&self) -> f64 {
        (self.box_h * self.box_w) as f64 / (self.h * self.w) as f64
    }
}

/// `(1-m) * x_i + m * x_j`: take the box from `x_j`, the rest from `x_i`.
pub fn cutmix_combine<T: Scalar>(xi: &Tensor<T>, xj: &Tensor<T>, mask: &CutMixMask) -> Tensor<T> {
    assert!(xi.same_shape(xj), "cutmix image shape mismatch");
    assert_eq!((xi.h, xi.w), (mask.h, mask.w), "cutmix mask shape mismatch");
    let mut out = xi.clone();
    for y in mask.top..mask.top + mask.box_h {
        let row = (y * out.w + mask.left) * out.c;
        let len = mask.box_w * out.c;
        out.data[row..row + len].copy_from_slice(&xj.data[row..row + len]);
    }
    out
}

/// Composite two teacher predictions with the same mask used on the images:
/// hard labels and confidence travel together per pixel.
pub fn cutmix_after_prediction<T: Scalar>(
    pred_i: &EnsemblePrediction<T>,
    pred_j: &EnsemblePrediction<T>,
    mask: &CutMixMask,
) -> Result<(LabelMask, Vec<T>)> {
    let (h, w) = (pred_i.hard.h, pred_i.hard.w);
    if (pred_j.hard.h, pred_j.hard.w) != (h, w) || (mask.h, mask.w) != (h, w) {
        return Err(Error::Shape(format!(
            "cutmix prediction/mask sizes disagree: {}x{} vs {}x{} vs {}x{}",
            h, w, pred_j.hard.h, pred_j.hard.w, mask.h, mask.w
        )));
    }
    let mut hard = pred_i.hard.clone();
    let mut conf = pred_i.confidence.clone();
    for y in mask.top..mask.top + mask.box_h {
        let row = y * w + mask.left;
        hard.classes[row..row + mask.box_w].copy_from_slice(&pred_j.hard.classes[row..row + mask.box_w]);
        conf[row..row + mask.box_w].copy_from_slice(&pred_j.confidence[row..row + mask.box_w]);
    }
    Ok((hard, conf))
}

// ── zoom consistency ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZoomCfg {
    pub scales: Vec<f64>,
}

impl Default for ZoomCfg {
    fn default() -> Self {
        ZoomCfg {
            scales: vec![0.5, 0.75, 1.25],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoomSpec {
    pub scale: f64,
}

pub fn zoom_size(dim: usize, scale: f64) -> usize {
    (dim as f64 * scale).round() as usize
}

fn check_zoom_dims(h: usize, w: usize, scale: f64) -> Result<(usize, usize)> {
    let (zh, zw) = (zoom_size(h, scale), zoom_size(w, scale));
    if zh < MIN_DIM || zw < MIN_DIM {
        return Err(Error::Config(format!(
            "zoom by {scale} shrinks {h}x{w} to {zh}x{zw}, below the {MIN_DIM}-pixel minimum"
        )));
    }
    Ok((zh, zw))
}

/// Bilinear zoom of an image.
pub fn zoom_image<T: Scalar>(x: &Tensor<T>, spec: &ZoomSpec) -> Result<Tensor<T>> {
    let (zh, zw) = check_zoom_dims(x.h, x.w, spec.scale)?;
    Ok(bilinear_resize(x, zh, zw))
}

/// Resample a teacher prediction to the zoomed geometry: nearest-neighbour
/// for both the hard labels and the confidence map, so the confidence gate
/// values survive unchanged.
pub fn zoom_consistency_targets<T: Scalar>(
    pred: &EnsemblePrediction<T>,
    spec: &ZoomSpec,
) -> Result<(LabelMask, Vec<T>)> {
    let (h, w) = (pred.hard.h, pred.hard.w);
    let (zh, zw) = check_zoom_dims(h, w, spec.scale)?;
    let hard = nearest_resize_mask(&pred.hard, zh, zw);
    let conf = nearest_resize_map(&pred.confidence, h, w, zh, zw);
    Ok((hard, conf))
}

// ── weak and strong augmentation ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakAugCfg {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Side length of the square crop both network inputs share.
    pub crop: usize,
}

impl Default for WeakAugCfg {
    fn default() -> Self {
        WeakAugCfg {
            flip_prob: 0.5,
            scale_min: 1.0,
            scale_max: 1.25,
            crop: 64,
        }
    }
}

impl WeakAugCfg {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability must lie in [0,1], got {}",
                self.flip_prob
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!(
                "scale bounds must satisfy 0 < min <= max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if self.crop < MIN_DIM {
            return Err(Error::Config(format!(
                "crop must be at least {MIN_DIM}, got {}",
                self.crop
            )));
        }
        Ok(())
    }
}

/// Recorded draw of one weak augmentation, replayable bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakAugParams {
    pub flip: bool,
    pub scale: f64,
    pub crop_top: usize,
    pub crop_left: usize,
}

/// Geometric augmentation applied identically to image and mask: flip, then
/// rescale, then crop to `cfg.crop`.
pub fn weak_augment<T: Scalar, R: Rng>(
    x: &Tensor<T>,
    y: Option<&LabelMask>,
    cfg: &WeakAugCfg,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<LabelMask>, WeakAugParams)> {
    cfg.validate()?;
    let flip = rng.gen_bool(cfg.flip_prob);
    let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
    let (sh, sw) = (zoom_size(x.h, scale), zoom_size(x.w, scale));
    if sh < cfg.crop || sw < cfg.crop {
        return Err(Error::Config(format!(
            "crop {} exceeds the rescaled image {}x{}",
            cfg.crop, sh, sw
        )));
    }
    let params = WeakAugParams {
        flip,
        scale,
        crop_top: rng.gen_range(0..=sh - cfg.crop),
        crop_left: rng.gen_range(0..=sw - cfg.crop),
    };
    let (ax, ay) = weak_augment_with(x, y, cfg.crop, &params)?;
    Ok((ax, ay, params))
}

/// Replay a recorded weak augmentation.
pub fn weak_augment_with<T: Scalar>(
    x: &Tensor<T>,
    y: Option<&LabelMask>,
    crop: usize,
    params: &WeakAugParams,
) -> Result<(Tensor<T>, Option<LabelMask>)> {
    let (sh, sw) = (zoom_size(x.h, params.scale), zoom_size(x.w, params.scale));
    if params.crop_top + crop > sh || params.crop_left + crop > sw {
        return Err(Error::Config(format!(
            "crop window {}+{} x {}+{} exceeds the rescaled image {}x{}",
            params.crop_top, crop, params.crop_left, crop, sh, sw
        )));
    }
    let flipped = if params.flip { x.flip_horizontal() } else { x.clone() };
    let scaled = if (sh, sw) == (x.h, x.w) {
        flipped
    } else {
        bilinear_resize(&flipped, sh, sw)
    };
    let out_img = scaled.crop(params.crop_top, params.crop_left, crop, crop);
    let out_mask = y
        .map(|m| {
            let fm = if params.flip { m.flip_horizontal() } else { m.clone() };
            let sm = if (sh, sw) == (m.h, m.w) {
                fm
            } else {
                nearest_resize_mask(&fm, sh, sw)
            };
            sm.crop(params.crop_top, params.crop_left, crop, crop)
        });
    Ok((out_img, out_mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugCfg {
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for StrongAugCfg {
    fn default() -> Self {
        StrongAugCfg {
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.0,
        }
    }
}

fn luma<T: Scalar>(px: &[T]) -> T {
    sc::<T>(0.299) * px[0] + sc::<T>(0.587) * px[1] + sc::<T>(0.114) * px[2]
}

/// Photometric augmentation: colour jitter, random grayscale, Gaussian blur.
/// Geometry is never touched, so spatial targets stay aligned.
pub fn strong_augment<T: Scalar, R: Rng>(x: &Tensor<T>, cfg: &StrongAugCfg, rng: &mut R) -> Tensor<T> {
    let mut out = x.clone();
    let mut touched = false;

    if cfg.jitter_prob > 0.0 && rng.gen_bool(cfg.jitter_prob.min(1.0)) {
        touched = true;
        let b: T = sc(rng.gen_range(1.0 - cfg.brightness..=1.0 + cfg.brightness));
        for v in &mut out.data {
            *v *= b;
        }
        let cf: T = sc(rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast));
        let mean = out.data.iter().copied().sum::<T>() / sc(out.len() as f64);
        for v in &mut out.data {
            *v = (*v - mean) * cf + mean;
        }
        if out.c == 3 {
            let sf: T = sc(rng.gen_range(1.0 - cfg.saturation..=1.0 + cfg.saturation));
            for px in out.data.chunks_exact_mut(3) {
                let l = luma(px);
                for v in px.iter_mut() {
                    *v = l + (*v - l) * sf;
                }
            }
        }
    }
    if out.c == 3 && cfg.grayscale_prob > 0.0 && rng.gen_bool(cfg.grayscale_prob.min(1.0)) {
        touched = true;
        for px in out.data.chunks_exact_mut(3) {
            let l = luma(px);
            px.fill(l);
        }
    }
    if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob.min(1.0)) {
        touched = true;
        let sigma = rng.gen_range(cfg.blur_sigma_min..=cfg.blur_sigma_max);
        out = gaussian_blur(&out, sigma);
    }
    if touched {
        for v in &mut out.data {
            *v = (*v).max(T::zero()).min(T::one());
        }
    }
    out
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur<T: Scalar>(x: &Tensor<T>, sigma: f64) -> Tensor<T> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<T> = (-radius..=radius)
        .map(|i| sc((-(i * i) as f64 / (2.0 * sigma * sigma)).exp()))
        .collect();
    let sum: T = kernel.iter().copied().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let mut tmp = Tensor::zeros(x.h, x.w, x.c);
    for y in 0..x.h {
        for xx in 0..x.w {
            for (ki, &kv) in kernel.iter().enumerate() {
                let sxx = (xx as isize + ki as isize - radius).clamp(0, x.w as isize - 1) as usize;
                let src = (y * x.w + sxx) * x.c;
                let dst = (y * x.w + xx) * x.c;
                for ci in 0..x.c {
                    tmp.data[dst + ci] += kv * x.data[src + ci];
                }
            }
        }
    }
    let mut out = Tensor::zeros(x.h, x.w, x.c);
    for y in 0..x.h {
        for xx in 0..x.w {
            for (ki, &kv) in kernel.iter().enumerate() {
                let syy = (y as isize + ki as isize - radius).clamp(0, x.h as isize - 1) as usize;
                let src = (syy * x.w + xx) * x.c;
                let dst = (y * x.w + xx) * x.c;
                for ci in 0..x.c {
                    out.data[dst + ci] += kv * tmp.data[src + ci];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchDescriptor;
    use crate::rng::{stream, Stream};
    use crate::teachers::TeacherPair;

    fn rand_tensor(seed: u64, h: usize, w: usize, c: usize) -> Tensor<f32> {
        let mut rng = stream(seed, Stream::InputPerturb, 0);
        let data = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(h, w, c, data)
    }

    fn toy_pair(seed: u64) -> TeacherPair<f32> {
        let s1 = SegModel::init(ArchDescriptor::default(), seed).unwrap();
        let s2 = SegModel::init(ArchDescriptor::default(), seed ^ 0x5555).unwrap();
        let mut pair = TeacherPair::from_student(&s1, 0.99).unwrap();
        pair.t2 = s2;
        pair
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = softmax_hwc(&rand_tensor(1, 4, 4, 5));
        assert_eq!(kl_divergence_sum(&p, &p), 0.0);
    }

    #[test]
    fn adversarial_norm_hits_radius() {
        for seed in 0..10u64 {
            let pair = toy_pair(seed + 20);
            let z = rand_tensor(seed, 4, 4, 32);
            let spec = TVatSpec {
                epsilon: 2.5,
                power_iters: 1,
                xi: 0.01,
            };
            let mut rng = stream(seed, Stream::Tvat, 0);
            let r = tvat_perturbation(&z, &pair, &spec, &mut rng).unwrap();
            let n = r.l2_norm();
            assert!((n - 2.5).abs() < 1e-4, "norm {n}");
        }
    }

    #[test]
    fn vanishing_radius_vanishing_divergence() {
        let pair = toy_pair(3);
        let z = rand_tensor(7, 4, 4, 32);
        let spec = TVatSpec {
            epsilon: 1e-3,
            power_iters: 1,
            xi: 0.01,
        };
        let mut rng = stream(11, Stream::Tvat, 0);
        let r = tvat_perturbation(&z, &pair, &spec, &mut rng).unwrap();
        assert!(r.l2_norm() <= 1e-3 + 1e-7);
        let clean = softmax_hwc(&mean_decode_logits(&[&pair.t1, &pair.t2], &z).unwrap());
        let pert =
            softmax_hwc(&mean_decode_logits(&[&pair.t1, &pair.t2], &z.add(&r)).unwrap());
        assert!(kl_divergence_sum(&clean, &pert) < 1e-4);
    }

    #[test]
    fn adversarial_beats_random_directions() {
        // brute-force oracle: the searched direction should expose more
        // divergence than the average random direction of the same norm
        let mut wins = 0u64;
        let trials = 30u64;
        for t in 0..trials {
            let pair = toy_pair(100 + t);
            let z = rand_tensor(200 + t, 4, 4, 32);
            let spec = TVatSpec {
                epsilon: 2.0,
                power_iters: 1,
                xi: 0.01,
            };
            let mut rng = stream(t, Stream::Tvat, 1);
            let r = tvat_perturbation(&z, &pair, &spec, &mut rng).unwrap();
            let decs = [&pair.t1, &pair.t2];
            let clean = softmax_hwc(&mean_decode_logits(&decs, &z).unwrap());
            let kl_adv = {
                let p = softmax_hwc(&mean_decode_logits(&decs, &z.add(&r)).unwrap());
                kl_divergence_sum(&clean, &p)
            };
            let mut acc = 0.0f64;
            let n_dirs = 32;
            for _ in 0..n_dirs {
                let d: Tensor<f32> =
                    uniform_perturbation(z.h, z.w, z.c, spec.epsilon, &mut rng).unwrap();
                let p = softmax_hwc(&mean_decode_logits(&decs, &z.add(&d)).unwrap());
                acc += kl_divergence_sum(&clean, &p) as f64;
            }
            if kl_adv as f64 > acc / n_dirs as f64 {
                wins += 1;
            }
        }
        assert!(wins * 100 >= trials * 95, "{wins}/{trials} wins");
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let spec = TVatSpec {
            epsilon: 0.0,
            ..TVatSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cutmix_combine_edge_masks() {
        let a = rand_tensor(1, 8, 8, 3);
        let b = rand_tensor(2, 8, 8, 3);
        let none = CutMixMask {
            h: 8,
            w: 8,
            top: 0,
            left: 0,
            box_h: 0,
            box_w: 0,
        };
        assert_eq!(cutmix_combine(&a, &b, &none).data, a.data);
        let all = CutMixMask {
            h: 8,
            w: 8,
            top: 0,
            left: 0,
            box_h: 8,
            box_w: 8,
        };
        assert_eq!(cutmix_combine(&a, &b, &all).data, b.data);
        let partial = CutMixMask {
            h: 8,
            w: 8,
            top: 2,
            left: 3,
            box_h: 4,
            box_w: 2,
        };
        assert_eq!(cutmix_combine(&a, &a, &partial).data, a.data);
    }

    #[test]
    fn cutmix_sum_identity() {
        let a = rand_tensor(3, 8, 8, 3);
        let b = rand_tensor(4, 8, 8, 3);
        let m = CutMixMask {
            h: 8,
            w: 8,
            top: 1,
            left: 2,
            box_h: 5,
            box_w: 4,
        };
        let ab = cutmix_combine(&a, &b, &m);
        let ba = cutmix_combine(&b, &a, &m);
        for i in 0..a.len() {
            let lhs = ab.data[i] + ba.data[i];
            let rhs = a.data[i] + b.data[i];
            assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn cutmix_box_area_within_bounds() {
        let cfg = CutMixCfg::default();
        let mut rng = stream(5, Stream::InputPerturb, 2);
        for _ in 0..200 {
            let m = CutMixMask::sample(64, 64, &cfg, &mut rng).unwrap();
            let f = m.area_fraction();
            assert!(f >= cfg.area_min && f <= cfg.area_max, "fraction {f}");
            assert!(m.top + m.box_h <= 64 && m.left + m.box_w <= 64);
        }
    }

    #[test]
    fn cutmix_after_prediction_selects_per_pixel() {
        let soft_i = softmax_hwc(&rand_tensor(6, 8, 8, 4));
        let soft_j = softmax_hwc(&rand_tensor(7, 8, 8, 4));
        let pi = EnsemblePrediction::from_soft(soft_i, 0.3);
        let pj = EnsemblePrediction::from_soft(soft_j, 0.3);
        let m = CutMixMask {
            h: 8,
            w: 8,
            top: 2,
            left: 1,
            box_h: 3,
            box_w: 5,
        };
        let (hard, conf) = cutmix_after_prediction(&pi, &pj, &m).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let (eh, ec) = if m.inside(y, x) {
                    (pj.hard.at(y, x), pj.confidence[y * 8 + x])
                } else {
                    (pi.hard.at(y, x), pi.confidence[y * 8 + x])
                };
                assert_eq!(hard.at(y, x), eh);
                assert_eq!(conf[y * 8 + x], ec);
                let c = conf[y * 8 + x];
                assert!(c == 0.0 || c > 0.3, "gate invariant broken: {c}");
            }
        }
        let zero = CutMixMask {
            h: 8,
            w: 8,
            top: 0,
            left: 0,
            box_h: 0,
            box_w: 0,
        };
        let (hard0, conf0) = cutmix_after_prediction(&pi, &pj, &zero).unwrap();
        assert_eq!(hard0.classes, pi.hard.classes);
        assert_eq!(conf0, pi.confidence);
    }

    #[test]
    fn zoom_identity_at_unit_scale() {
        let soft = softmax_hwc(&rand_tensor(8, 16, 16, 3));
        let pred = EnsemblePrediction::from_soft(soft, 0.4);
        let (hard, conf) = zoom_consistency_targets(&pred, &ZoomSpec { scale: 1.0 }).unwrap();
        assert_eq!(hard.classes, pred.hard.classes);
        assert_eq!(conf, pred.confidence);
    }

    #[test]
    fn zoom_round_trip_on_constant_map() {
        let soft = Tensor::from_vec(16, 16, 2, {
            let mut v = Vec::new();
            for _ in 0..16 * 16 {
                v.extend([0.9f32, 0.1]);
            }
            v
        });
        let pred = EnsemblePrediction::from_soft(soft, 0.5);
        let (up, upc) = zoom_consistency_targets(&pred, &ZoomSpec { scale: 2.0 }).unwrap();
        let up_pred = EnsemblePrediction {
            soft: Tensor::zeros(32, 32, 2),
            hard: up,
            confidence: upc,
        };
        let (down, _) = zoom_consistency_targets(&up_pred, &ZoomSpec { scale: 0.5 }).unwrap();
        assert_eq!(down.classes, pred.hard.classes);
    }

    #[test]
    fn zoom_preserves_class_histogram_approximately() {
        let mut rng = stream(12, Stream::InputPerturb, 3);
        for _ in 0..100 {
            let mut mask = LabelMask::filled(32, 32, 0);
            for v in &mut mask.classes {
                *v = rng.gen_range(0..4u8);
            }
            let pred = EnsemblePrediction {
                soft: Tensor::zeros(32, 32, 4),
                hard: mask.clone(),
                confidence: vec![1.0f32; 32 * 32],
            };
            let (zoomed, _) = zoom_consistency_targets(&pred, &ZoomSpec { scale: 0.75 }).unwrap();
            let h0 = mask.class_histogram(4);
            let h1 = zoomed.class_histogram(4);
            let n0 = (32 * 32) as f64;
            let n1 = (24 * 24) as f64;
            for c in 0..4 {
                let f0 = h0[c] as f64 / n0;
                let f1 = h1[c] as f64 / n1;
                assert!((f0 - f1).abs() < 0.05, "class {c}: {f0} vs {f1}");
            }
        }
    }

    #[test]
    fn zoom_below_minimum_is_rejected() {
        let pred = EnsemblePrediction {
            soft: Tensor::zeros(16, 16, 2),
            hard: LabelMask::filled(16, 16, 0),
            confidence: vec![0.0f32; 256],
        };
        assert!(zoom_consistency_targets(&pred, &ZoomSpec { scale: 0.5 }).is_err());
    }

    #[test]
    fn weak_identity_draw_changes_nothing() {
        let x = rand_tensor(9, 24, 24, 3);
        let mut y = LabelMask::filled(24, 24, 1);
        y.set(3, 5, 2);
        let params = WeakAugParams {
            flip: false,
            scale: 1.0,
            crop_top: 0,
            crop_left: 0,
        };
        let (ax, ay) = weak_augment_with(&x, Some(&y), 24, &params).unwrap();
        assert_eq!(ax.data, x.data);
        assert_eq!(ay.unwrap(), y);
    }

    #[test]
    fn flip_twice_restores() {
        let x = rand_tensor(10, 8, 12, 3);
        assert_eq!(x.flip_horizontal().flip_horizontal().data, x.data);
        let mut m = LabelMask::filled(8, 12, 0);
        m.set(2, 3, 3);
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }

    #[test]
    fn weak_params_replay_bit_identically() {
        let cfg = WeakAugCfg {
            crop: 16,
            ..WeakAugCfg::default()
        };
        let x = rand_tensor(11, 24, 24, 3);
        let y = LabelMask::filled(24, 24, 2);
        let mut rng = stream(21, Stream::WeakAug, 0);
        let (ax, ay, params) = weak_augment(&x, Some(&y), &cfg, &mut rng).unwrap();
        let (bx, by) = weak_augment_with(&x, Some(&y), cfg.crop, &params).unwrap();
        assert_eq!(ax.data, bx.data);
        assert_eq!(ay, by);
    }

    #[test]
    fn weak_rejects_oversized_crop() {
        let cfg = WeakAugCfg {
            crop: 64,
            scale_min: 1.0,
            scale_max: 1.0,
            ..WeakAugCfg::default()
        };
        let x = rand_tensor(12, 32, 32, 3);
        let mut rng = stream(22, Stream::WeakAug, 0);
        assert!(weak_augment::<f32, _>(&x, None, &cfg, &mut rng).is_err());
    }

    #[test]
    fn strong_with_zero_probabilities_is_identity() {
        let cfg = StrongAugCfg {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..StrongAugCfg::default()
        };
        let x = rand_tensor(13, 16, 16, 3);
        let mut rng = stream(23, Stream::StrongAug, 0);
        assert_eq!(strong_augment(&x, &cfg, &mut rng).data, x.data);
    }

    #[test]
    fn strong_preserves_shape() {
        let cfg = StrongAugCfg::default();
        let x = rand_tensor(14, 20, 24, 3);
        let mut rng = stream(24, Stream::StrongAug, 0);
        for _ in 0..20 {
            let out = strong_augment(&x, &cfg, &mut rng);
            assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn grayscale_draw_equalizes_channels() {
        let cfg = StrongAugCfg {
            jitter_prob: 0.0,
            grayscale_prob: 1.0,
            blur_prob: 0.0,
            ..StrongAugCfg::default()
        };
        let x = rand_tensor(15, 8, 8, 3);
        let mut rng = stream(25, Stream::StrongAug, 0);
        let out = strong_augment(&x, &cfg, &mut rng);
        for px in out.data.chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn blur_preserves_mean_roughly() {
        let x = rand_tensor(16, 16, 16, 3);
        let out = gaussian_blur(&x, 0.8);
        let m0: f32 = x.data.iter().sum::<f32>() / x.len() as f32;
        let m1: f32 = out.data.iter().sum::<f32>() / out.len() as f32;
        assert!((m0 - m1).abs() < 0.02);
    }
}
