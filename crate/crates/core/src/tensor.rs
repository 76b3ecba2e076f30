//! Dense H x W x C tensors in row-major HWC layout, plus integer label masks.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A dense rank-3 tensor stored row-major as `[y][x][channel]`.
///
/// Images are `H x W x 3`, feature maps `H' x W' x Z`, logit and probability
/// maps `H x W x Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w * c, "tensor data length mismatch");
        Tensor { h, w, c, data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut T {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    /// Channel slice at one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    /// Euclidean norm over all entries.
    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// In-place scale by a scalar.
    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// In-place elementwise addition of another tensor of the same shape.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert!(self.same_shape(other), "tensor add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy of the window starting at (top, left).
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
        assert!(top + h <= self.h && left + w <= self.w, "crop out of bounds");
        let mut out = Tensor::zeros(h, w, self.c);
        for y in 0..h {
            let src = ((top + y) * self.w + left) * self.c;
            let dst = y * w * self.c;
            out.data[dst..dst + w * self.c].copy_from_slice(&self.data[src..src + w * self.c]);
        }
        out
    }

    /// Mirror along the horizontal axis (left-right).
    pub fn flip_horizontal(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                let src = (y * self.w + (self.w - 1 - x)) * self.c;
                let dst = (y * self.w + x) * self.c;
                out.data[dst..dst + self.c].copy_from_slice(&self.data[src..src + self.c]);
            }
        }
        out
    }

    /// Elementwise sum with another tensor of the same shape.
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(self.same_shape(other), "tensor add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        }
    }
}

/// Per-pixel class indices in `{0..num_classes-1}` plus the IGNORE sentinel.
///
/// IGNORE is stored as `num_classes` in memory and 255 on disk; it marks crop
/// padding and unscored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<u8>,
}

impl LabelMask {
    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        LabelMask {
            h,
            w,
            classes: vec![class; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.classes[y * self.w + x] = class;
    }

    /// Count of pixels carrying each class in `0..num_classes` (IGNORE excluded).
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = vec![0usize; num_classes];
        for &c in &self.classes {
            if (c as usize) < num_classes {
                hist[c as usize] += 1;
            }
        }
        hist
    }

    /// Copy of the window starting at (top, left).
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> LabelMask {
        assert!(top + h <= self.h && left + w <= self.w, "crop out of bounds");
        let mut out = LabelMask::filled(h, w, 0);
        for y in 0..h {
            let src = (top + y) * self.w + left;
            out.classes[y * w..(y + 1) * w].copy_from_slice(&self.classes[src..src + w]);
        }
        out
    }

    /// Mirror along the horizontal axis (left-right).
    pub fn flip_horizontal(&self) -> LabelMask {
        let mut out = LabelMask::filled(self.h, self.w, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                out.classes[y * self.w + x] = self.classes[y * self.w + (self.w - 1 - x)];
            }
        }
        out
    }
}
