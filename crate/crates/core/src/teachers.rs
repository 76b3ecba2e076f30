//! The two averaged teachers: exponential moving averages of the student,
//! updated in alternation, whose ensembled prediction supplies hard labels
//! and a confidence map to the consistency loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::nn::{argmax_channel, softmax_hwc};
use crate::scalar::{sc, Scalar};
use crate::tensor::{LabelMask, Tensor};

/// Which teacher receives the next epoch's averaging updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cursor {
    T1,
    T2,
}

impl Cursor {
    pub fn flipped(self) -> Cursor {
        match self {
            Cursor::T1 => Cursor::T2,
            Cursor::T2 => Cursor::T1,
        }
    }
}

/// Two teachers plus the averaging decay and the alternation cursor.
#[derive(Debug, Clone)]
pub struct TeacherPair<T> {
    pub t1: SegModel<T>,
    pub t2: SegModel<T>,
    pub gamma: f64,
    pub cursor: Cursor,
}

/// Ensembled teacher output for one image: soft probabilities, hard argmax
/// labels, and the gated per-pixel confidence.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction<T> {
    pub soft: Tensor<T>,
    pub hard: LabelMask,
    pub confidence: Vec<T>,
}

impl<T: Scalar> EnsemblePrediction<T> {
    /// Derive hard labels and confidence from a soft map: confidence is the
    /// winning probability when strictly above `tau`, else exactly zero.
    pub fn from_soft(soft: Tensor<T>, tau: f64) -> Self {
        let hard = argmax_channel(&soft);
        let tau_t: T = sc(tau);
        let confidence = soft
            .data
            .chunks_exact(soft.c)
            .zip(&hard.classes)
            .map(|(px, &lab)| {
                let c = px[lab as usize];
                if c > tau_t {
                    c
                } else {
                    T::zero()
                }
            })
            .collect();
        EnsemblePrediction {
            soft,
            hard,
            confidence,
        }
    }
}

/// Softmax of the elementwise mean of two logit maps.
pub fn ensemble_soft_from_logits<T: Scalar>(l1: &Tensor<T>, l2: &Tensor<T>) -> Tensor<T> {
    assert!(l1.same_shape(l2), "teacher logit shape mismatch");
    let mut mean = l1.add(l2);
    mean.scale(sc(0.5));
    softmax_hwc(&mean)
}

impl<T: Scalar> TeacherPair<T> {
    /// Both teachers start as copies of the student.
    pub fn from_student(student: &SegModel<T>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(TeacherPair {
            t1: student.clone(),
            t2: student.clone(),
            gamma,
            cursor: Cursor::T1,
        })
    }

    pub fn check_arch(&self, student: &SegModel<T>) -> Result<()> {
        if self.t1.arch != self.t2.arch || self.t1.arch != student.arch {
            return Err(Error::Config(
                "teachers and student must share one architecture".into(),
            ));
        }
        Ok(())
    }

    /// Mean-logit softmax of the two teachers on one image.
    pub fn ensemble_soft(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.t1.arch != self.t2.arch {
            return Err(Error::Config(
                "teachers must share one architecture".into(),
            ));
        }
        let l1 = self.t1.decode(&self.t1.encode(x)?)?;
        let l2 = self.t2.decode(&self.t2.encode(x)?)?;
        Ok(ensemble_soft_from_logits(&l1, &l2))
    }

    /// Full ensemble prediction with the confidence gate at `tau`.
    pub fn ensemble_predict(&self, x: &Tensor<T>, tau: f64) -> Result<EnsemblePrediction<T>> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!(
                "confidence threshold must lie in [0,1), got {tau}"
            )));
        }
        Ok(EnsemblePrediction::from_soft(self.ensemble_soft(x)?, tau))
    }

    /// Blend the student into the teacher selected by the cursor:
    /// `theta_k = gamma * theta_k + (1 - gamma) * theta_s` elementwise, over
    /// trainable parameters and running buffers alike. The other teacher is
    /// untouched.
    pub fn ema_update(&mut self, student: &SegModel<T>) -> Result<()> {
        check_gamma(self.gamma)?;
        self.check_arch(student)?;
        let target = match self.cursor {
            Cursor::T1 => &mut self.t1,
            Cursor::T2 => &mut self.t2,
        };
        ema_blend(&mut target.params, &student.params, self.gamma);
        ema_blend(&mut target.buffers, &student.buffers, self.gamma);
        Ok(())
    }

    /// Flip the cursor at an epoch boundary; parameters are untouched.
    pub fn advance_epoch(&mut self) {
        self.cursor = self.cursor.flipped();
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!(
            "EMA decay must lie strictly inside (0,1), got {gamma}"
        )));
    }
    Ok(())
}

fn ema_blend<T: Scalar>(target: &mut [T], source: &[T], gamma: f64) {
    let g: T = sc(gamma);
    let one_g: T = sc(1.0 - gamma);
    for (t, &s) in target.iter_mut().zip(source) {
        *t = g * *t + one_g * s;
    }
}
