//! The training loop: weakly augmented teacher targets, strongly augmented
//! and feature-perturbed student passes, the combined objective, SGD with
//! polynomial decay, and alternating EMA teacher updates.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{build_checkpoint, load_checkpoint, restore_checkpoint, save_checkpoint};
use crate::config::{EmaCadence, FeaturePerturb, LossMode, RunConfig, TvatCfg};
use crate::data::{index_dataset, index_from_manifest, load_image, load_mask, DatasetIndex, SplitManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{
    beta_at, cam_dlogits, cam_loss, conf_ce_dlogits, conf_ce_loss, mse_consistency_dlogits,
    mse_consistency_loss, supervised_dlogits, supervised_loss, LossReport,
};
use crate::metrics::{EvalEntry, MetricsRecord, MetricsWriter, ProbeEntry, StepRecord};
use crate::model::{layer_grad_mean_abs, ForwardTrace, SegModel};
use crate::nn::{nearest_resize_hwc, nearest_resize_mask, softmax_hwc};
use crate::perturb::{
    cutmix_after_prediction, cutmix_combine, strong_augment, tvat_perturbation,
    uniform_perturbation, vat_perturbation, weak_augment, zoom_consistency_targets, zoom_image,
    CutMixMask, CutMixMode, ZoomSpec,
};
use crate::rng::{stream, Stream};
use crate::scalar::{sc, Scalar};
use crate::teachers::TeacherPair;
use crate::tensor::{LabelMask, Tensor};

/// Running-statistics momentum for batch-norm variants.
const BN_MOMENTUM: f64 = 0.9;

// ── learning-rate schedule ──────────────────────────────────────────────────

/// Polynomial decay: `lr0 * (1 - iter/max_iter)^poly_power`.
pub fn lr_at(cfg: &RunConfig, iter: u64, max_iter: u64) -> f64 {
    if max_iter == 0 {
        return cfg.lr0;
    }
    let t = (iter as f64 / max_iter as f64).min(1.0);
    cfg.lr0 * (1.0 - t).powf(cfg.poly_power)
}

// ── data access ─────────────────────────────────────────────────────────────

/// Whole dataset decoded into memory once; the synthetic sets this trains on
/// fit comfortably, and it keeps the inner loop free of image decoding.
pub struct DataCache<T: Scalar> {
    pub labelled: Vec<(Tensor<T>, LabelMask)>,
    pub unlabelled: Vec<Tensor<T>>,
    /// Precomputed pseudo-label masks parallel to `unlabelled`, present only
    /// when the complementary low-confidence loss is configured.
    pub pseudo: Option<Vec<LabelMask>>,
    pub num_classes: usize,
}

pub fn load_cache<T: Scalar>(index: &DatasetIndex, pseudo_dir: Option<&Path>) -> Result<DataCache<T>> {
    let mut labelled = Vec::with_capacity(index.labelled.len());
    for (ip, mp) in &index.labelled {
        labelled.push((load_image(ip)?, load_mask(mp, index.num_classes)?));
    }
    let mut unlabelled = Vec::with_capacity(index.unlabelled.len());
    for ip in &index.unlabelled {
        unlabelled.push(load_image(ip)?);
    }
    let pseudo = match pseudo_dir {
        Some(dir) => {
            let mut masks = Vec::with_capacity(index.unlabelled.len());
            for ip in &index.unlabelled {
                let stem = ip
                    .file_name()
                    .ok_or_else(|| Error::Dataset(format!("bad image path {}", ip.display())))?;
                let pp = dir.join(stem);
                if !pp.exists() {
                    return Err(Error::Dataset(format!(
                        "pseudo-label mask {} is missing",
                        pp.display()
                    )));
                }
                masks.push(load_mask(&pp, index.num_classes)?);
            }
            Some(masks)
        }
        None => None,
    };
    Ok(DataCache {
        labelled,
        unlabelled,
        pseudo,
        num_classes: index.num_classes,
    })
}

/// Shuffled id stream that reshuffles each time it wraps, so every epoch
/// visits each item before repeats.
struct CyclingSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclingSampler {
    fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        CyclingSampler { order, pos: 0, rng }
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Which cached items one step consumes; carried into error diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchIds {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
}

// ── training state ──────────────────────────────────────────────────────────

struct EpochRngs {
    weak: ChaCha8Rng,
    strong: ChaCha8Rng,
    input: ChaCha8Rng,
    tvat: ChaCha8Rng,
}

impl EpochRngs {
    fn at(seed: u64, epoch: usize) -> Self {
        EpochRngs {
            weak: stream(seed, Stream::WeakAug, epoch),
            strong: stream(seed, Stream::StrongAug, epoch),
            input: stream(seed, Stream::InputPerturb, epoch),
            tvat: stream(seed, Stream::Tvat, epoch),
        }
    }
}

/// Everything the step mutates: student, teacher pair, optimizer velocity,
/// counters, and the per-epoch RNG streams.
pub struct TrainState<T: Scalar> {
    pub cfg: RunConfig,
    pub student: SegModel<T>,
    pub pair: TeacherPair<T>,
    pub velocity: Vec<T>,
    pub epoch: usize,
    pub iter: u64,
    pub max_iter: u64,
    /// Base seed actually in force (a resumed run keeps the original).
    pub seed: u64,
    rngs: EpochRngs,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: RunConfig, iters_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let student = SegModel::init(cfg.arch.clone(), cfg.seed)?;
        let pair = TeacherPair::from_student(&student, cfg.gamma)?;
        let velocity = vec![T::zero(); student.params.len()];
        let seed = cfg.seed;
        Ok(TrainState {
            max_iter: (cfg.epochs * iters_per_epoch) as u64,
            rngs: EpochRngs::at(seed, 0),
            cfg,
            student,
            pair,
            velocity,
            epoch: 0,
            iter: 0,
            seed,
        })
    }

    /// Rebuild from a checkpoint; schedule constants come from `cfg`, state
    /// and the base seed from the file.
    pub fn resume(cfg: RunConfig, path: &Path, iters_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let file = load_checkpoint(path)?;
        if file.arch_descriptor != cfg.arch {
            return Err(Error::Checkpoint(
                "checkpoint was produced by a different architecture than configured".into(),
            ));
        }
        let r = restore_checkpoint::<T>(&file, cfg.gamma)?;
        Ok(TrainState {
            max_iter: (cfg.epochs * iters_per_epoch) as u64,
            rngs: EpochRngs::at(r.seed, r.epoch),
            cfg,
            student: r.student,
            pair: r.pair,
            velocity: r.velocity,
            epoch: r.epoch,
            iter: r.iter,
            seed: r.seed,
        })
    }

    /// One optimization step over one labelled and one unlabelled batch.
    ///
    /// Order: weak-augment both batches; teachers predict on the weak
    /// unlabelled views without gradients; strong-augment student copies and
    /// apply one input-perturbation branch; inject the feature perturbation;
    /// evaluate the combined objective; SGD on the student only; EMA per
    /// cadence.
    pub fn train_step(&mut self, cache: &DataCache<T>, ids: &BatchIds) -> Result<LossReport> {
        self.step_inner(cache, ids).map_err(|e| match e {
            // numeric failures gain the batch context needed to reproduce
            Error::Numeric(msg) => Error::Numeric(format!(
                "{msg}; at epoch {} iteration {} (labelled batch {:?}, unlabelled batch {:?})",
                self.epoch, self.iter, ids.labelled, ids.unlabelled
            )),
            other => other,
        })
    }

    fn step_inner(&mut self, cache: &DataCache<T>, ids: &BatchIds) -> Result<LossReport> {
        let cfg = self.cfg.clone();
        let l = ids.labelled.len();
        let u = ids.unlabelled.len();

        // 1. weak views
        let mut lab: Vec<(Tensor<T>, LabelMask)> = Vec::with_capacity(l);
        for &i in &ids.labelled {
            let (x, y) = cache
                .labelled
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("labelled id {i} out of range")))?;
            let (ax, ay, _) = weak_augment(x, Some(y), &cfg.weak_aug, &mut self.rngs.weak)?;
            lab.push((ax, ay.expect("mask was supplied")));
        }
        let mut unl: Vec<Tensor<T>> = Vec::with_capacity(u);
        let mut unl_ps: Vec<Option<LabelMask>> = Vec::with_capacity(u);
        for &i in &ids.unlabelled {
            let x = cache
                .unlabelled
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("unlabelled id {i} out of range")))?;
            let ps = cache.pseudo.as_ref().map(|v| &v[i]);
            let (ax, aps, _) = weak_augment(x, ps, &cfg.weak_aug, &mut self.rngs.weak)?;
            unl.push(ax);
            unl_ps.push(aps);
        }

        // choose the input-perturbation branch for this batch
        let branch = choose_branch(&cfg, u, &mut self.rngs.input);

        // box-mixing before prediction: teachers see the composited image
        if branch == Branch::CutMixBefore {
            let mut mixed = Vec::with_capacity(u);
            let mut mixed_ps = Vec::with_capacity(u);
            for i in 0..u {
                let j = (i + 1) % u;
                let m = CutMixMask::sample(unl[i].h, unl[i].w, &cfg.cutmix, &mut self.rngs.input)?;
                mixed.push(cutmix_combine(&unl[i], &unl[j], &m));
                mixed_ps.push(match (&unl_ps[i], &unl_ps[j]) {
                    (Some(a), Some(b)) => Some(composite_mask(a, b, &m)),
                    _ => None,
                });
            }
            unl = mixed;
            unl_ps = mixed_ps;
        }

        // 2. teacher targets, never part of the gradient path
        let mut preds = Vec::with_capacity(u);
        for x in &unl {
            preds.push(self.pair.ensemble_predict(x, cfg.tau)?);
        }

        // 3. strong student copies plus the branch-specific inputs/targets
        let strong: Vec<Tensor<T>> = unl
            .iter()
            .map(|x| strong_augment(x, &cfg.strong_aug, &mut self.rngs.strong))
            .collect();
        let mut stu_x: Vec<Tensor<T>> = Vec::with_capacity(u);
        let mut targets: Vec<ConsTarget<T>> = Vec::with_capacity(u);
        match branch {
            Branch::Plain | Branch::CutMixBefore => {
                for i in 0..u {
                    stu_x.push(strong[i].clone());
                    targets.push(ConsTarget {
                        hard: preds[i].hard.clone(),
                        conf: preds[i].confidence.clone(),
                        soft: preds[i].soft.clone(),
                        pseudo: unl_ps[i].clone(),
                    });
                }
            }
            Branch::CutMixAfter => {
                for i in 0..u {
                    let j = (i + 1) % u;
                    let m =
                        CutMixMask::sample(strong[i].h, strong[i].w, &cfg.cutmix, &mut self.rngs.input)?;
                    stu_x.push(cutmix_combine(&strong[i], &strong[j], &m));
                    let (hard, conf) = cutmix_after_prediction(&preds[i], &preds[j], &m)?;
                    let soft = cutmix_combine(&preds[i].soft, &preds[j].soft, &m);
                    let pseudo = match (&unl_ps[i], &unl_ps[j]) {
                        (Some(a), Some(b)) => Some(composite_mask(a, b, &m)),
                        _ => None,
                    };
                    targets.push(ConsTarget { hard, conf, soft, pseudo });
                }
            }
            Branch::Zoom => {
                for i in 0..u {
                    let scale = cfg.zoom.scales[self.rngs.input.gen_range(0..cfg.zoom.scales.len())];
                    let spec = ZoomSpec { scale };
                    stu_x.push(zoom_image(&strong[i], &spec)?);
                    let (hard, conf) = zoom_consistency_targets(&preds[i], &spec)?;
                    let soft = nearest_resize_hwc(&preds[i].soft, hard.h, hard.w);
                    let pseudo = unl_ps[i]
                        .as_ref()
                        .map(|p| nearest_resize_mask(p, hard.h, hard.w));
                    targets.push(ConsTarget { hard, conf, soft, pseudo });
                }
            }
        }

        // 4./5. forward, perturb, losses, accumulate gradients
        let beta = beta_at(&cfg.ramp, self.epoch);
        let mut grads = vec![T::zero(); self.student.params.len()];

        let mut sup_sum = 0.0f64;
        for (x, y) in &lab {
            let x_in = if cfg.perturb_labelled {
                strong_augment(x, &cfg.strong_aug, &mut self.rngs.strong)
            } else {
                x.clone()
            };
            let mut trace = self.student.forward_train_perturbed(&x_in, None)?;
            if cfg.perturb_labelled {
                inject_feature_perturbation(
                    &self.student,
                    &self.pair,
                    &cfg.tvat,
                    &mut self.rngs.tvat,
                    &mut trace,
                )?;
            }
            let probs = softmax_hwc(&trace.logits);
            sup_sum += supervised_loss(&probs, y).to_f64_c();
            let mut d = supervised_dlogits(&probs, y);
            d.scale(sc::<T>(1.0 / l.max(1) as f64));
            self.student.backward(&trace, &d, &mut grads);
            if cfg.arch.batch_norm {
                self.student.update_bn_running(&trace, BN_MOMENTUM);
            }
        }

        let mut con_sum = 0.0f64;
        let mut cam_sum = 0.0f64;
        for i in 0..u {
            let mut trace = self.student.forward_train_perturbed(&stu_x[i], None)?;
            inject_feature_perturbation(
                &self.student,
                &self.pair,
                &cfg.tvat,
                &mut self.rngs.tvat,
                &mut trace,
            )?;
            let probs = softmax_hwc(&trace.logits);
            let t = &targets[i];
            let (loss_i, mut d) = match cfg.loss {
                LossMode::ConfCe => (
                    conf_ce_loss(&probs, &t.hard, &t.conf).to_f64_c(),
                    conf_ce_dlogits(&probs, &t.hard, &t.conf),
                ),
                LossMode::Mse => (
                    mse_consistency_loss(&probs, &t.soft).to_f64_c(),
                    mse_consistency_dlogits(&probs, &t.soft),
                ),
            };
            con_sum += loss_i;
            d.scale(sc::<T>(beta / u.max(1) as f64));
            let mut backprop = beta > 0.0;
            if cfg.cam_loss {
                if let Some(ps) = &t.pseudo {
                    cam_sum += cam_loss(&probs, ps, &t.conf).to_f64_c();
                    let mut dc = cam_dlogits(&probs, ps, &t.conf);
                    dc.scale(sc::<T>(1.0 / u.max(1) as f64));
                    d.add_assign(&dc);
                    backprop = true;
                }
            }
            if backprop {
                self.student.backward(&trace, &d, &mut grads);
            }
            if cfg.arch.batch_norm {
                self.student.update_bn_running(&trace, BN_MOMENTUM);
            }
        }

        let sup = sup_sum / l.max(1) as f64;
        let con = if u > 0 { con_sum / u as f64 } else { 0.0 };
        let cam = (cfg.cam_loss && u > 0).then(|| cam_sum / u as f64);
        let report = LossReport::compose(sup, con, cam, beta);
        if !report.total.is_finite() {
            return Err(Error::Numeric("non-finite training loss".into()));
        }

        // 6. SGD on the student only
        let lr = lr_at(&cfg, self.iter, self.max_iter);
        sgd_update(
            &mut self.student.params,
            &mut self.velocity,
            &grads,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );
        if self.student.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(
                "non-finite parameters after the optimizer step".into(),
            ));
        }

        // 7. EMA per cadence
        if cfg.ema_cadence == EmaCadence::Iter {
            self.ema_step()?;
        }
        self.iter += 1;
        Ok(report)
    }

    fn ema_step(&mut self) -> Result<()> {
        let (pair, student) = (&mut self.pair, &self.student);
        pair.ema_update(student)?;
        if !self.cfg.auxiliary_teacher {
            // single-teacher arm: keep the pair degenerate so the ensemble
            // is exactly the one teacher
            pair.t2.params.copy_from_slice(&pair.t1.params);
            pair.t2.buffers.copy_from_slice(&pair.t1.buffers);
        }
        Ok(())
    }

    /// Close an epoch: epoch-cadence EMA, cursor flip, fresh RNG streams.
    pub fn end_epoch(&mut self) -> Result<()> {
        if self.cfg.ema_cadence == EmaCadence::Epoch {
            self.ema_step()?;
        }
        if self.cfg.auxiliary_teacher {
            self.pair.advance_epoch();
        }
        self.epoch += 1;
        self.rngs = EpochRngs::at(self.seed, self.epoch);
        Ok(())
    }

    /// Mean absolute consistency-loss gradient per layer; no optimizer step,
    /// no state change.
    pub fn probe(&self, images: &[Tensor<T>], mode: LossMode) -> Result<Vec<(String, f64)>> {
        gradient_magnitude_probe(&self.student, &self.pair, self.cfg.tau, images, mode)
    }
}

struct ConsTarget<T: Scalar> {
    hard: LabelMask,
    conf: Vec<T>,
    soft: Tensor<T>,
    pseudo: Option<LabelMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Plain,
    CutMixAfter,
    CutMixBefore,
    Zoom,
}

fn choose_branch(cfg: &RunConfig, u: usize, rng: &mut ChaCha8Rng) -> Branch {
    let mut options = Vec::new();
    if u >= 2 {
        match cfg.cutmix.mode {
            CutMixMode::After => options.push(Branch::CutMixAfter),
            CutMixMode::Before => options.push(Branch::CutMixBefore),
            CutMixMode::Off => {}
        }
    }
    if !cfg.zoom.scales.is_empty() && u > 0 {
        options.push(Branch::Zoom);
    }
    if options.is_empty() {
        Branch::Plain
    } else {
        options[rng.gen_range(0..options.len())]
    }
}

/// Copy the box region of `b` into a clone of `a`.
fn composite_mask(a: &LabelMask, b: &LabelMask, m: &CutMixMask) -> LabelMask {
    let mut out = a.clone();
    for y in m.top..m.top + m.box_h {
        let row = y * out.w;
        out.classes[row + m.left..row + m.left + m.box_w]
            .copy_from_slice(&b.classes[row + m.left..row + m.left + m.box_w]);
    }
    out
}

/// Replace the decoder input with features plus the configured perturbation
/// and redo the (cheap) decode, leaving the encoder trace intact.
fn inject_feature_perturbation<T: Scalar>(
    student: &SegModel<T>,
    pair: &TeacherPair<T>,
    tvat: &TvatCfg,
    rng: &mut ChaCha8Rng,
    trace: &mut ForwardTrace<T>,
) -> Result<()> {
    let r = match tvat.mode {
        FeaturePerturb::Off => return Ok(()),
        FeaturePerturb::Uniform => {
            let f = &trace.features;
            uniform_perturbation(f.h, f.w, f.c, tvat.epsilon, rng)?
        }
        FeaturePerturb::VatStudent => {
            vat_perturbation(&trace.features, student, &tvat.spec(), rng)?
        }
        FeaturePerturb::Tvat => tvat_perturbation(&trace.features, pair, &tvat.spec(), rng)?,
    };
    trace.decoder_in = trace.features.clone();
    trace.decoder_in.add_assign(&r);
    trace.logits = student.decode(&trace.decoder_in)?;
    Ok(())
}

fn sgd_update<T: Scalar>(
    params: &mut [T],
    velocity: &mut [T],
    grads: &[T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr = sc::<T>(lr);
    let m = sc::<T>(momentum);
    let wd = sc::<T>(weight_decay);
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let g = g + wd * *p;
        *v = m * *v + g;
        *p = *p - lr * *v;
    }
}

/// Mean absolute consistency-loss gradient per named layer on a frozen
/// state; teachers supply the targets, the student never steps.
pub fn gradient_magnitude_probe<T: Scalar>(
    student: &SegModel<T>,
    pair: &TeacherPair<T>,
    tau: f64,
    images: &[Tensor<T>],
    mode: LossMode,
) -> Result<Vec<(String, f64)>> {
    let mut grads = vec![T::zero(); student.params.len()];
    let n = images.len().max(1);
    for x in images {
        let trace = student.forward_train(x)?;
        let probs = softmax_hwc(&trace.logits);
        let pred = pair.ensemble_predict(x, tau)?;
        let mut d = match mode {
            LossMode::ConfCe => conf_ce_dlogits(&probs, &pred.hard, &pred.confidence),
            LossMode::Mse => mse_consistency_dlogits(&probs, &pred.soft),
        };
        d.scale(sc::<T>(1.0 / n as f64));
        student.backward(&trace, &d, &mut grads);
    }
    Ok(layer_grad_mean_abs(&student.arch, &grads))
}

// ── the full run ────────────────────────────────────────────────────────────

/// What a completed run hands back.
pub struct RunOutput<T: Scalar> {
    pub state: TrainState<T>,
    pub final_eval: Option<EvalReport>,
    pub metrics_path: PathBuf,
}

fn loss_mode_name(mode: LossMode) -> &'static str {
    match mode {
        LossMode::ConfCe => "conf_ce",
        LossMode::Mse => "mse",
    }
}

fn write_run_checkpoint<T: Scalar>(state: &TrainState<T>, out_dir: &Path) -> Result<PathBuf> {
    let file = build_checkpoint(
        &state.student,
        &state.pair,
        &state.velocity,
        state.seed,
        state.epoch,
        state.iter,
    );
    let stamped = out_dir.join(format!("ckpt-epoch-{:04}.json", state.epoch));
    save_checkpoint(&file, &stamped)?;
    save_checkpoint(&file, &out_dir.join("ckpt-latest.json"))?;
    Ok(stamped)
}

/// Train per the configuration: epochs of steps, cursor flips at epoch
/// boundaries, periodic checkpoints, a JSONL metrics log, and optional
/// validation passes. `resume` continues from a checkpoint, appending to the
/// existing metrics file.
pub fn run_training<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let manifest = SplitManifest::load(&cfg.data.split)?;
    if manifest.num_classes != cfg.arch.num_classes {
        return Err(Error::Config(format!(
            "split carries {} classes but the model is configured for {}",
            manifest.num_classes, cfg.arch.num_classes
        )));
    }
    let index = index_from_manifest(&cfg.data.root, &manifest)?;
    let cache = load_cache::<T>(&index, cfg.data.pseudo_dir.as_deref())?;
    if cache.labelled.is_empty() {
        return Err(Error::Dataset("split has no labelled images".into()));
    }
    let val = match &cfg.data.val_root {
        Some(root) => {
            let vi = index_dataset(root, cfg.arch.num_classes)?;
            let vc = load_cache::<T>(&vi, None)?;
            if vc.labelled.is_empty() {
                return Err(Error::Dataset(format!(
                    "validation root {} holds no image/mask pairs",
                    root.display()
                )));
            }
            Some(vc.labelled)
        }
        None => None,
    };
    let ipe = cfg
        .iters_per_epoch
        .unwrap_or_else(|| cache.labelled.len().div_ceil(cfg.batch_labelled));

    let mut state = match resume {
        Some(p) => TrainState::<T>::resume(cfg.clone(), p, ipe)?,
        None => TrainState::<T>::new(cfg.clone(), ipe)?,
    };
    let out_dir = cfg.io.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut mw = MetricsWriter::create(&metrics_path, resume.is_some())?;
    let mut final_eval = None;

    let start = state.epoch;
    for epoch in start..cfg.epochs {
        let mut lab_s = CyclingSampler::new(
            cache.labelled.len(),
            stream(state.seed, Stream::SamplerLabelled, epoch),
        );
        let mut unl_s = if cache.unlabelled.is_empty() {
            None
        } else {
            Some(CyclingSampler::new(
                cache.unlabelled.len(),
                stream(state.seed, Stream::SamplerUnlabelled, epoch),
            ))
        };
        for _ in 0..ipe {
            let ids = BatchIds {
                labelled: lab_s.next_batch(cfg.batch_labelled),
                unlabelled: unl_s
                    .as_mut()
                    .map(|s| s.next_batch(cfg.batch_unlabelled))
                    .unwrap_or_default(),
            };
            let lr = lr_at(cfg, state.iter, state.max_iter);
            let iter = state.iter;
            let report = state.train_step(&cache, &ids)?;
            mw.write(&MetricsRecord::Step(StepRecord {
                epoch,
                iter,
                lr,
                sup: report.sup,
                con: report.con,
                cam: report.cam,
                beta: report.beta_t,
                total: report.total,
            }))?;
        }
        state.end_epoch()?;
        let done = state.epoch;
        let is_last = done == cfg.epochs;
        if let Some(vs) = &val {
            if is_last || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
                let rep = evaluate(&state.pair, vs, None)?;
                mw.write(&MetricsRecord::Eval(EvalEntry {
                    epoch: done,
                    miou: rep.miou,
                    pixel_accuracy: rep.pixel_accuracy,
                }))?;
                if is_last {
                    final_eval = Some(rep);
                }
            }
        }
        if is_last && !cache.unlabelled.is_empty() {
            let k = cfg.batch_unlabelled.min(cache.unlabelled.len());
            for mode in [LossMode::ConfCe, LossMode::Mse] {
                let layers = state.probe(&cache.unlabelled[..k], mode)?;
                mw.write(&MetricsRecord::Probe(ProbeEntry {
                    epoch: done,
                    loss: loss_mode_name(mode).to_string(),
                    layers,
                }))?;
            }
        }
        if done % cfg.checkpoint_every.max(1) == 0 || is_last {
            write_run_checkpoint(&state, &out_dir)?;
        }
    }
    if cfg.epochs == 0 {
        write_run_checkpoint(&state, &out_dir)?;
    }
    mw.flush()?;
    Ok(RunOutput {
        state,
        final_eval,
        metrics_path,
    })
}
