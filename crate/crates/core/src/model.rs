//! Segmentation network: strided-convolution encoder, projection + bilinear
//! upsample decoder, pixel-wise softmax head.
//!
//! Parameters live in one flat vector with a layout derived from the
//! architecture descriptor, so models sharing a descriptor can be blended
//! elementwise (exponential moving averages) and checkpointed by named spans.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, bilinear_resize,
    bilinear_resize_backward, conv2d_backward, conv2d_forward, relu_backward, relu_forward,
    softmax_hwc, BnCache,
};
use crate::rng::{stream, Stream};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

pub const ENCODER_KERNEL: usize = 3;

/// Structural description of the network. Two models with equal descriptors
/// have identical parameter layouts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of each encoder stage; the last entry is the feature
    /// dimension the decoder consumes.
    pub widths: Vec<usize>,
    /// Stride of each encoder stage; the product is the downsample factor.
    pub strides: Vec<usize>,
    /// Insert spatial batch norm after each encoder convolution.
    #[serde(default)]
    pub batch_norm: bool,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            in_channels: 3,
            num_classes: 4,
            widths: vec![8, 16, 32],
            strides: vec![2, 2, 1],
            batch_norm: false,
        }
    }
}

/// Named contiguous range inside a flat parameter or buffer vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "widths ({}) and strides ({}) must be equal-length and non-empty",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("encoder strides must be positive".into()));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        self.strides.iter().product()
    }

    /// Channel count of the encoder output (the feature space the
    /// adversarial perturbation lives in).
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty widths")
    }

    fn stage_channels(&self) -> Vec<(usize, usize)> {
        let mut ins = vec![self.in_channels];
        ins.extend(self.widths.iter().copied());
        ins.windows(2).map(|p| (p[0], p[1])).collect()
    }

    /// Trainable parameter spans in storage order.
    pub fn param_layout(&self) -> Vec<LayerSpan> {
        let mut spans = Vec::new();
        let mut off = 0usize;
        let mut push = |name: String, len: usize, off: &mut usize| {
            spans.push(LayerSpan {
                name,
                offset: *off,
                len,
            });
            *off += len;
        };
        for (i, (ic, oc)) in self.stage_channels().into_iter().enumerate() {
            let n = i + 1;
            push(
                format!("encoder.conv{n}.weight"),
                ENCODER_KERNEL * ENCODER_KERNEL * ic * oc,
                &mut off,
            );
            push(format!("encoder.conv{n}.bias"), oc, &mut off);
            if self.batch_norm {
                push(format!("encoder.bn{n}.gamma"), oc, &mut off);
                push(format!("encoder.bn{n}.beta"), oc, &mut off);
            }
        }
        let z = self.feature_dim();
        push("decoder.proj.weight".into(), z * self.num_classes, &mut off);
        push("decoder.proj.bias".into(), self.num_classes, &mut off);
        spans
    }

    /// Non-trainable buffer spans (batch-norm running statistics).
    pub fn buffer_layout(&self) -> Vec<LayerSpan> {
        let mut spans = Vec::new();
        if !self.batch_norm {
            return spans;
        }
        let mut off = 0usize;
        for (i, (_, oc)) in self.stage_channels().into_iter().enumerate() {
            let n = i + 1;
            spans.push(LayerSpan {
                name: format!("encoder.bn{n}.running_mean"),
                offset: off,
                len: oc,
            });
            off += oc;
            spans.push(LayerSpan {
                name: format!("encoder.bn{n}.running_var"),
                offset: off,
                len: oc,
            });
            off += oc;
        }
        spans
    }

    pub fn num_params(&self) -> usize {
        self.param_layout().iter().map(|s| s.len).sum()
    }

    pub fn num_buffers(&self) -> usize {
        self.buffer_layout().iter().map(|s| s.len).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct StageOffsets {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    run_mean: usize,
    run_var: usize,
    in_c: usize,
    out_c: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    stages: Vec<StageOffsets>,
    proj_w: usize,
    proj_b: usize,
}

fn offsets(arch: &ArchDescriptor) -> Offsets {
    let mut stages = Vec::new();
    let mut off = 0usize;
    let mut buf = 0usize;
    for ((ic, oc), &stride) in arch.stage_channels().into_iter().zip(&arch.strides) {
        let w = off;
        off += ENCODER_KERNEL * ENCODER_KERNEL * ic * oc;
        let b = off;
        off += oc;
        let (gamma, beta, run_mean, run_var) = if arch.batch_norm {
            let g = off;
            off += oc;
            let bt = off;
            off += oc;
            let rm = buf;
            buf += oc;
            let rv = buf;
            buf += oc;
            (g, bt, rm, rv)
        } else {
            (0, 0, 0, 0)
        };
        stages.push(StageOffsets {
            w,
            b,
            gamma,
            beta,
            run_mean,
            run_var,
            in_c: ic,
            out_c: oc,
            stride,
        });
    }
    let proj_w = off;
    let proj_b = off + arch.feature_dim() * arch.num_classes;
    Offsets {
        stages,
        proj_w,
        proj_b,
    }
}

/// Segmentation model: flat trainable parameters plus batch-norm running
/// buffers, interpreted through the architecture descriptor.
#[derive(Debug, Clone)]
pub struct SegModel<T> {
    pub arch: ArchDescriptor,
    pub params: Vec<T>,
    pub buffers: Vec<T>,
}

/// Everything the backward pass needs from one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// Stage inputs: `acts[0]` is the image, `acts[i]` the output of stage i.
    pub acts: Vec<Tensor<T>>,
    pub bn_caches: Vec<Option<BnCache<T>>>,
    /// Encoder output before any feature perturbation.
    pub features: Tensor<T>,
    /// What the decoder actually consumed (`features` plus any perturbation).
    pub decoder_in: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> SegModel<T> {
    /// He-style fan-in initialization; biases zero, batch-norm affine at
    /// identity, running statistics at (0, 1).
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, Stream::Init, 0);
        let mut params = vec![T::zero(); arch.num_params()];
        let off = offsets(&arch);
        for st in &off.stages {
            let fan_in = ENCODER_KERNEL * ENCODER_KERNEL * st.in_c;
            let std = (2.0 / fan_in as f64).sqrt();
            let wlen = ENCODER_KERNEL * ENCODER_KERNEL * st.in_c * st.out_c;
            for v in &mut params[st.w..st.w + wlen] {
                let n: f64 = rng.sample(StandardNormal);
                *v = sc(n * std);
            }
            if arch.batch_norm {
                for v in &mut params[st.gamma..st.gamma + st.out_c] {
                    *v = T::one();
                }
            }
        }
        let z = arch.feature_dim();
        let std = (2.0 / z as f64).sqrt();
        for v in &mut params[off.proj_w..off.proj_w + z * arch.num_classes] {
            let n: f64 = rng.sample(StandardNormal);
            *v = sc(n * std);
        }
        let mut buffers = vec![T::zero(); arch.num_buffers()];
        for span in arch.buffer_layout() {
            if span.name.ends_with("running_var") {
                for v in &mut buffers[span.offset..span.offset + span.len] {
                    *v = T::one();
                }
            }
        }
        Ok(SegModel {
            arch,
            params,
            buffers,
        })
    }

    /// All-zero parameters; useful as a gradient accumulator shape or in
    /// zero-propagation tests.
    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let params = vec![T::zero(); arch.num_params()];
        let buffers = vec![T::zero(); arch.num_buffers()];
        Ok(SegModel {
            arch,
            params,
            buffers,
        })
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        let df = self.arch.downsample_factor();
        if x.c != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                x.c, self.arch.in_channels
            )));
        }
        if x.h == 0 || x.w == 0 || x.h % df != 0 || x.w % df != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by the downsample factor {}",
                x.h, x.w, df
            )));
        }
        Ok(())
    }

    fn check_features(&self, z: &Tensor<T>) -> Result<()> {
        if z.c != self.arch.feature_dim() {
            return Err(Error::Shape(format!(
                "feature map has {} channels, decoder expects {}",
                z.c,
                self.arch.feature_dim()
            )));
        }
        Ok(())
    }

    /// Encoder forward in inference mode (running batch-norm statistics).
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(x)?;
        let off = offsets(&self.arch);
        let mut cur = x.clone();
        for st in &off.stages {
            let wlen = ENCODER_KERNEL * ENCODER_KERNEL * st.in_c * st.out_c;
            let mut out = conv2d_forward(
                &cur,
                &self.params[st.w..st.w + wlen],
                &self.params[st.b..st.b + st.out_c],
                st.out_c,
                ENCODER_KERNEL,
                st.stride,
            );
            if self.arch.batch_norm {
                out = batchnorm_forward_infer(
                    &out,
                    &self.params[st.gamma..st.gamma + st.out_c],
                    &self.params[st.beta..st.beta + st.out_c],
                    &self.buffers[st.run_mean..st.run_mean + st.out_c],
                    &self.buffers[st.run_var..st.run_var + st.out_c],
                );
            }
            relu_forward(&mut out);
            cur = out;
        }
        Ok(cur)
    }

    /// Decoder forward: 1x1 projection to class logits, then bilinear
    /// upsample back to image resolution.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_features(z)?;
        let off = offsets(&self.arch);
        let zc = self.arch.feature_dim();
        let y = self.arch.num_classes;
        let proj = conv2d_forward(
            z,
            &self.params[off.proj_w..off.proj_w + zc * y],
            &self.params[off.proj_b..off.proj_b + y],
            y,
            1,
            1,
        );
        let df = self.arch.downsample_factor();
        Ok(bilinear_resize(&proj, z.h * df, z.w * df))
    }

    /// Softmax probabilities at image resolution.
    pub fn predict_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.decode(&self.encode(x)?)?;
        Ok(softmax_hwc(&logits))
    }

    /// Training-mode forward pass recording everything backward needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.forward_train_perturbed(x, None)
    }

    /// Training-mode forward with an optional additive feature perturbation
    /// applied between encoder and decoder.
    pub fn forward_train_perturbed(
        &self,
        x: &Tensor<T>,
        feature_offset: Option<&Tensor<T>>,
    ) -> Result<ForwardTrace<T>> {
        self.check_image(x)?;
        let off = offsets(&self.arch);
        let mut acts = vec![x.clone()];
        let mut bn_caches = Vec::new();
        for st in &off.stages {
            let wlen = ENCODER_KERNEL * ENCODER_KERNEL * st.in_c * st.out_c;
            let mut out = conv2d_forward(
                acts.last().unwrap(),
                &self.params[st.w..st.w + wlen],
                &self.params[st.b..st.b + st.out_c],
                st.out_c,
                ENCODER_KERNEL,
                st.stride,
            );
            if self.arch.batch_norm {
                let (bn_out, cache) = batchnorm_forward_train(
                    &out,
                    &self.params[st.gamma..st.gamma + st.out_c],
                    &self.params[st.beta..st.beta + st.out_c],
                );
                out = bn_out;
                bn_caches.push(Some(cache));
            } else {
                bn_caches.push(None);
            }
            relu_forward(&mut out);
            acts.push(out);
        }
        let features = acts.last().unwrap().clone();
        let decoder_in = match feature_offset {
            Some(r) => {
                if !r.same_shape(&features) {
                    return Err(Error::Shape(format!(
                        "feature perturbation shape {:?} does not match features {:?}",
                        r.shape(),
                        features.shape()
                    )));
                }
                let mut d = features.clone();
                d.add_assign(r);
                d
            }
            None => features.clone(),
        };
        let logits = self.decode(&decoder_in)?;
        Ok(ForwardTrace {
            acts,
            bn_caches,
            features,
            decoder_in,
            logits,
        })
    }

    /// Backward pass: accumulates parameter gradients into `grads`
    /// (length [`ArchDescriptor::num_params`]).
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Tensor<T>, grads: &mut [T]) {
        debug_assert_eq!(grads.len(), self.arch.num_params());
        let off = offsets(&self.arch);
        let zc = self.arch.feature_dim();
        let y = self.arch.num_classes;
        let zin = &trace.decoder_in;

        // decoder: upsample transpose, then the 1x1 projection
        let dproj = bilinear_resize_backward(dlogits, zin.h, zin.w);
        let mut dfeat = Tensor::zeros(zin.h, zin.w, zc);
        {
            let (dw, rest) = grads[off.proj_w..].split_at_mut(zc * y);
            let db = &mut rest[..y];
            conv2d_backward(
                zin,
                &self.params[off.proj_w..off.proj_w + zc * y],
                &dproj,
                y,
                1,
                1,
                dw,
                db,
                Some(&mut dfeat),
            );
        }

        // encoder stages in reverse
        let mut dout = dfeat;
        for (i, st) in off.stages.iter().enumerate().rev() {
            relu_backward(&trace.acts[i + 1], &mut dout);
            if self.arch.batch_norm {
                let cache = trace.bn_caches[i].as_ref().expect("bn cache present");
                let gamma = self.params[st.gamma..st.gamma + st.out_c].to_vec();
                let (dg_slice, db_slice) = {
                    let (a, b) = grads.split_at_mut(st.beta);
                    (&mut a[st.gamma..st.gamma + st.out_c], &mut b[..st.out_c])
                };
                dout = batchnorm_backward(cache, &gamma, &dout, dg_slice, db_slice);
            }
            let wlen = ENCODER_KERNEL * ENCODER_KERNEL * st.in_c * st.out_c;
            let x = &trace.acts[i];
            let mut dx = if i > 0 {
                Some(Tensor::zeros(x.h, x.w, x.c))
            } else {
                None
            };
            {
                let (head, rest) = grads.split_at_mut(st.b);
                let dw = &mut head[st.w..st.w + wlen];
                let db = &mut rest[..st.out_c];
                conv2d_backward(
                    x,
                    &self.params[st.w..st.w + wlen],
                    &dout,
                    st.out_c,
                    ENCODER_KERNEL,
                    st.stride,
                    dw,
                    db,
                    dx.as_mut(),
                );
            }
            match dx {
                Some(d) => dout = d,
                None => break,
            }
        }
    }

    /// Gradient of a scalar objective w.r.t. the decoder input, holding
    /// decoder parameters fixed. Used to search feature perturbations.
    pub fn decode_input_grad(&self, z: &Tensor<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_features(z)?;
        let off = offsets(&self.arch);
        let zc = self.arch.feature_dim();
        let y = self.arch.num_classes;
        let dproj = bilinear_resize_backward(dlogits, z.h, z.w);
        let mut dz = Tensor::zeros(z.h, z.w, zc);
        let mut dw = vec![T::zero(); zc * y];
        let mut db = vec![T::zero(); y];
        conv2d_backward(
            z,
            &self.params[off.proj_w..off.proj_w + zc * y],
            &dproj,
            y,
            1,
            1,
            &mut dw,
            &mut db,
            Some(&mut dz),
        );
        Ok(dz)
    }

    /// Fold one forward pass's batch statistics into the running buffers.
    pub fn update_bn_running(&mut self, trace: &ForwardTrace<T>, momentum: f64) {
        if !self.arch.batch_norm {
            return;
        }
        let off = offsets(&self.arch);
        let m: T = sc(momentum);
        let one_m: T = sc(1.0 - momentum);
        for (st, cache) in off.stages.iter().zip(&trace.bn_caches) {
            let cache = cache.as_ref().expect("bn cache present");
            for (i, (&mu, &var)) in cache.mean.iter().zip(&cache.var).enumerate() {
                let rm = &mut self.buffers[st.run_mean + i];
                *rm = m * *rm + one_m * mu;
                let rv = &mut self.buffers[st.run_var + i];
                *rv = m * *rv + one_m * var;
            }
        }
    }

    /// Concatenated trainable parameters followed by running buffers.
    pub fn flatten(&self) -> Vec<T> {
        let mut v = self.params.clone();
        v.extend_from_slice(&self.buffers);
        v
    }

    /// Inverse of [`SegModel::flatten`].
    pub fn restore(arch: ArchDescriptor, flat: &[T]) -> Result<Self> {
        arch.validate()?;
        let np = arch.num_params();
        let nb = arch.num_buffers();
        if flat.len() != np + nb {
            return Err(Error::Shape(format!(
                "flat vector has {} values, descriptor needs {}",
                flat.len(),
                np + nb
            )));
        }
        Ok(SegModel {
            arch,
            params: flat[..np].to_vec(),
            buffers: flat[np..].to_vec(),
        })
    }
}

/// L2 norm of the gradient per named layer (weight and bias spans of one
/// layer pooled together), in storage order.
pub fn layer_grad_norms<T: Scalar>(arch: &ArchDescriptor, grads: &[T]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for span in arch.param_layout() {
        let layer = span
            .name
            .rsplit_once('.')
            .map(|(head, _)| head.to_string())
            .unwrap_or_else(|| span.name.clone());
        let ss: f64 = grads[span.offset..span.offset + span.len]
            .iter()
            .map(|&g| {
                let g = g.to_f64_c();
                g * g
            })
            .sum();
        match out.last_mut() {
            Some((name, acc)) if *name == layer => *acc += ss,
            _ => out.push((layer, ss)),
        }
    }
    for (_, v) in &mut out {
        *v = v.sqrt();
    }
    out
}

/// Mean absolute gradient per named layer, grouped like
/// [`layer_grad_norms`].
pub fn layer_grad_mean_abs<T: Scalar>(arch: &ArchDescriptor, grads: &[T]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for span in arch.param_layout() {
        let layer = span
            .name
            .rsplit_once('.')
            .map(|(head, _)| head.to_string())
            .unwrap_or_else(|| span.name.clone());
        let sum: f64 = grads[span.offset..span.offset + span.len]
            .iter()
            .map(|&g| g.to_f64_c().abs())
            .sum();
        match out.last_mut() {
            Some((name, acc, n)) if *name == layer => {
                *acc += sum;
                *n += span.len;
            }
            _ => out.push((layer, sum, span.len)),
        }
    }
    out.into_iter().map(|(name, sum, n)| (name, sum / n as f64)).collect()
}
