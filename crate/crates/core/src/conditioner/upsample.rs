use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{conv_transpose2d, leaky_relu, TransposeGeometry};
use crate::tensor::{Scalar, Tensor};

pub const UPSAMPLE_SLOPE: f64 = 0.4;
pub const UPSAMPLE_FACTOR: usize = 256;

/// Frequency × time geometry shared by both layers: 3 × 32 filters,
/// stride 16 in time, padding that preserves the band count.
pub const UPSAMPLE_GEOMETRY: TransposeGeometry = TransposeGeometry {
    kh: 3,
    kw: 32,
    stride_h: 1,
    stride_w: 16,
    pad_h: 1,
    pad_w: 8,
};

/// Two single-channel transposed convolutions over the (band, frame)
/// image, each followed by a leaky ReLU. Weights are `[1, 1, 3, 32]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler<T> {
    pub weights: [Tensor<T>; 2],
    pub biases: [T; 2],
}

impl<T: Scalar> Upsampler<T> {
    /// Kernel that repeats every input value 16 times along time.
    pub fn nearest_kernel() -> Tensor<T> {
        let g = UPSAMPLE_GEOMETRY;
        Tensor::from_fn(&[1, 1, g.kh, g.kw], |i| {
            let (a, b) = (i / g.kw, i % g.kw);
            if a == g.kh / 2 && (g.pad_w..g.pad_w + g.stride_w).contains(&b) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Nearest-neighbor repetition for both layers.
    pub fn nearest() -> Self {
        Self {
            weights: [Self::nearest_kernel(), Self::nearest_kernel()],
            biases: [T::zero(); 2],
        }
    }

    /// Nearest-neighbor kernels plus `N(0, std²)` perturbations.
    pub fn init<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Self {
        let mut up = Self::nearest();
        for w in &mut up.weights {
            for v in w.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += T::of(z * std);
            }
        }
        up
    }

    pub fn zeros() -> Self {
        let g = UPSAMPLE_GEOMETRY;
        Self {
            weights: [Tensor::zeros(&[1, 1, g.kh, g.kw]), Tensor::zeros(&[1, 1, g.kh, g.kw])],
            biases: [T::zero(); 2],
        }
    }

    /// `[bands, frames]` → `[bands, 256 · frames]`.
    pub fn forward(&self, mel: &Tensor<T>) -> Result<Tensor<T>> {
        let s = mel.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::ShapeMismatch {
                context: "upsampler input".into(),
                expected: vec![0, 1],
                found: s.to_vec(),
            });
        }
        let mut cur = mel.clone().reshape(&[1, s[0], s[1]]);
        let slope = T::of(UPSAMPLE_SLOPE);
        for (w, &b) in self.weights.iter().zip(&self.biases) {
            cur = conv_transpose2d(&cur, w, Some(&[b]), &UPSAMPLE_GEOMETRY).map(|v| leaky_relu(v, slope));
        }
        let (_, m, t) = cur.dims3();
        Ok(cur.reshape(&[m, t]))
    }

    pub fn cast<U: Scalar>(&self) -> Upsampler<U> {
        Upsampler {
            weights: [self.weights[0].cast(), self.weights[1].cast()],
            biases: [U::of(self.biases[0].as_f64()), U::of(self.biases[1].as_f64())],
        }
    }
}
