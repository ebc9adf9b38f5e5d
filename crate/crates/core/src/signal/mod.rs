//! Waveforms, squeezed 2-D grids and height permutations.
//!
//! A waveform of length `n` is squeezed into an `h × (n / h)` grid in
//! column-major order, so `X[i][j] = x[j·h + i]` and temporally adjacent
//! samples share a column.

mod wav;

pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T = f32> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|&v| U::of(v.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn mean_square(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / self.samples.len() as f64
    }

    pub fn is_normalized(&self) -> bool {
        self.samples
            .iter()
            .all(|v| v.is_finite() && v.abs() <= T::one())
    }
}

/// 16-bit PCM to `[-1, 1)`.
pub fn normalize_pcm16(pcm: &[i16]) -> Vec<f32> {
    pcm.iter().map(|&s| s as f32 / 32768.0).collect()
}

/// Inverse of [`normalize_pcm16`], saturating out-of-range values.
pub fn to_pcm16<T: Scalar>(samples: &[T]) -> Vec<i16> {
    samples
        .iter()
        .map(|&v| {
            let v = v.as_f64();
            let v = if v.is_finite() { v } else { 0.0 };
            (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect()
}

/// An `h × w` matrix stored row-major as a `[1, h, w]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveGrid<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> WaveGrid<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[1, h, w]),
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == w), "ragged rows");
        Self {
            tensor: Tensor::from_vec(&[1, h, w], rows.concat()),
        }
    }

    pub fn from_vec(h: usize, w: usize, values: Vec<T>) -> Self {
        Self {
            tensor: Tensor::from_vec(&[1, h, w], values),
        }
    }

    /// Accepts `[1, h, w]` or `[h, w]`.
    pub fn from_tensor(t: Tensor<T>) -> Self {
        let shape = t.shape().to_vec();
        match shape.as_slice() {
            [1, h, w] | [h, w] => {
                let (h, w) = (*h, *w);
                Self {
                    tensor: t.reshape(&[1, h, w]),
                }
            }
            _ => panic!("WaveGrid from tensor of shape {shape:?}"),
        }
    }

    pub fn h(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.tensor.data()[i * self.w() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let w = self.w();
        self.tensor.data_mut()[i * w + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.w();
        &self.tensor.data()[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.w();
        &mut self.tensor.data_mut()[i * w..(i + 1) * w]
    }

    pub fn values(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.h()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> WaveGrid<U> {
        WaveGrid {
            tensor: self.tensor.cast(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.tensor.max_abs_diff(&other.tensor)
    }
}

/// Column-major squeeze of `x` into `h` rows.
pub fn squeeze<T: Scalar>(x: &Waveform<T>, h: usize) -> Result<WaveGrid<T>> {
    squeeze_samples(&x.samples, h)
}

pub fn squeeze_samples<T: Scalar>(x: &[T], h: usize) -> Result<WaveGrid<T>> {
    if h == 0 {
        return Err(Error::InvalidArgument("squeeze height must be positive".into()));
    }
    let remainder = x.len() % h;
    if remainder != 0 || x.is_empty() {
        return Err(Error::NotDivisible {
            len: x.len(),
            h,
            remainder,
        });
    }
    let w = x.len() / h;
    let mut out = vec![T::zero(); x.len()];
    for j in 0..w {
        for i in 0..h {
            out[i * w + j] = x[j * h + i];
        }
    }
    Ok(WaveGrid::from_vec(h, w, out))
}

pub fn unsqueeze<T: Scalar>(grid: &WaveGrid<T>, sample_rate: u32) -> Waveform<T> {
    let (h, w) = (grid.h(), grid.w());
    let mut out = vec![T::zero(); h * w];
    for j in 0..w {
        for i in 0..h {
            out[j * h + i] = grid.get(i, j);
        }
    }
    Waveform::new(out, sample_rate)
}

/// Zero-pads the tail up to the next multiple of `h`; returns the pad count.
pub fn pad_to_multiple<T: Scalar>(x: &Waveform<T>, h: usize) -> (Waveform<T>, usize) {
    assert!(h > 0, "pad height must be positive");
    let pad = (h - x.len() % h) % h;
    let mut samples = x.samples.clone();
    samples.resize(x.len() + pad, T::zero());
    (Waveform::new(samples, x.sample_rate), pad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationKind {
    Identity,
    Reverse,
    BipartiteReverse,
    /// Inverse of another permutation, or anything built from a raw map.
    Custom,
}

/// A bijection on grid rows: input row `i` moves to output row `row_map[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    kind: PermutationKind,
    row_map: Vec<usize>,
}

impl Permutation {
    pub fn new(kind: PermutationKind, h: usize) -> Self {
        let row_map = match kind {
            PermutationKind::Identity | PermutationKind::Custom => (0..h).collect(),
            PermutationKind::Reverse => (0..h).rev().collect(),
            PermutationKind::BipartiteReverse => {
                // first half takes ceil(h/2) rows when h is odd
                let half = h.div_ceil(2);
                (0..h)
                    .map(|i| if i < half { half - 1 - i } else { h - 1 - (i - half) })
                    .collect()
            }
        };
        Self { kind, row_map }
    }

    pub fn identity(h: usize) -> Self {
        Self::new(PermutationKind::Identity, h)
    }

    pub fn reverse(h: usize) -> Self {
        Self::new(PermutationKind::Reverse, h)
    }

    pub fn bipartite_reverse(h: usize) -> Self {
        Self::new(PermutationKind::BipartiteReverse, h)
    }

    pub fn from_map(row_map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; row_map.len()];
        for &r in &row_map {
            if r >= row_map.len() || std::mem::replace(&mut seen[r], true) {
                return Err(Error::InvalidArgument(format!(
                    "row map {row_map:?} is not a bijection"
                )));
            }
        }
        Ok(Self {
            kind: PermutationKind::Custom,
            row_map,
        })
    }

    pub fn kind(&self) -> PermutationKind {
        self.kind
    }

    pub fn row_map(&self) -> &[usize] {
        &self.row_map
    }

    pub fn len(&self) -> usize {
        self.row_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_map.is_empty()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.row_map.len()];
        for (i, &r) in self.row_map.iter().enumerate() {
            inv[r] = i;
        }
        let kind = match self.kind {
            // all named kinds are involutions
            k @ (PermutationKind::Identity
            | PermutationKind::Reverse
            | PermutationKind::BipartiteReverse) => k,
            PermutationKind::Custom => PermutationKind::Custom,
        };
        Self { kind, row_map: inv }
    }

    /// `self` applied first, then `next`.
    pub fn then(&self, next: &Permutation) -> Self {
        assert_eq!(self.len(), next.len(), "permutation length");
        Self {
            kind: PermutationKind::Custom,
            row_map: self.row_map.iter().map(|&r| next.row_map[r]).collect(),
        }
    }

    /// Source row feeding each output row.
    pub fn source_rows(&self) -> Vec<usize> {
        self.inverse().row_map
    }
}

/// Moves row `i` of every channel to row `p.row_map[i]`. Works on any
/// `[c, h, w]` tensor so the conditioner can follow the latents.
pub fn permute_rows_tensor<T: Scalar>(x: &Tensor<T>, p: &Permutation) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3();
    if p.len() != h {
        return Err(Error::ShapeMismatch {
            context: "permute_rows".into(),
            expected: vec![h],
            found: vec![p.len()],
        });
    }
    let mut out = vec![T::zero(); x.numel()];
    for ch in 0..c {
        for (i, &dst) in p.row_map().iter().enumerate() {
            let s = (ch * h + i) * w;
            let d = (ch * h + dst) * w;
            out[d..d + w].copy_from_slice(&x.data()[s..s + w]);
        }
    }
    Ok(Tensor::from_vec(&[c, h, w], out))
}

pub fn permute_rows<T: Scalar>(x: &WaveGrid<T>, p: &Permutation) -> Result<WaveGrid<T>> {
    Ok(WaveGrid::from_tensor(permute_rows_tensor(x.as_tensor(), p)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wf(v: &[f64]) -> Waveform<f64> {
        Waveform::new(v.to_vec(), 22050)
    }

    #[test]
    fn squeeze_is_column_major() {
        let g = squeeze(&wf(&[1., 2., 3., 4., 5., 6.]), 2).unwrap();
        assert_eq!(g.to_rows(), vec![vec![1., 3., 5.], vec![2., 4., 6.]]);
        let g = squeeze(&wf(&[7.]), 1).unwrap();
        assert_eq!(g.to_rows(), vec![vec![7.]]);
    }

    #[test]
    fn squeeze_clip_of_16000_at_h16() {
        let g = squeeze(&wf(&vec![0.0; 16000]), 16).unwrap();
        assert_eq!((g.h(), g.w()), (16, 1000));
    }

    #[test]
    fn squeeze_rejects_remainder() {
        match squeeze(&wf(&[1., 2., 3., 4., 5.]), 2) {
            Err(Error::NotDivisible { remainder, .. }) => assert_eq!(remainder, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unsqueeze_examples() {
        let g = WaveGrid::from_rows(&[vec![1., 3., 5.], vec![2., 4., 6.]]);
        assert_eq!(unsqueeze(&g, 1).samples, vec![1., 2., 3., 4., 5., 6.]);
        let g = WaveGrid::from_rows(&[vec![7.0f64]]);
        assert_eq!(unsqueeze(&g, 1).samples, vec![7.]);
    }

    #[test]
    fn squeeze_round_trip_exhaustive_small_lengths() {
        for n in 1..=64usize {
            let x = wf(&(0..n).map(|i| i as f64 * 0.25 - 3.0).collect::<Vec<_>>());
            for h in (1..=n).filter(|h| n % h == 0) {
                let g = squeeze(&x, h).unwrap();
                assert_eq!(unsqueeze(&g, 22050), x, "n={n} h={h}");
            }
        }
    }

    #[test]
    fn pad_examples() {
        let (p, k) = pad_to_multiple(&wf(&[1.0; 10]), 4);
        assert_eq!((p.len(), k), (12, 2));
        assert_eq!(&p.samples[10..], &[0.0, 0.0]);
        let (p, k) = pad_to_multiple(&wf(&[1.0; 12]), 4);
        assert_eq!((p.len(), k), (12, 0));
        let (p, k) = pad_to_multiple(&wf(&vec![0.5; 16000]), 64);
        assert_eq!((p.len(), k), (16000, 0));
    }

    #[test]
    fn permutation_maps() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let g = WaveGrid::from_rows(&rows);
        let order = |p: &Permutation| -> Vec<f64> {
            permute_rows(&g, p).unwrap().values().to_vec()
        };
        assert_eq!(order(&Permutation::reverse(8)), vec![7., 6., 5., 4., 3., 2., 1., 0.]);
        assert_eq!(
            order(&Permutation::bipartite_reverse(8)),
            vec![3., 2., 1., 0., 7., 6., 5., 4.]
        );
        assert_eq!(Permutation::bipartite_reverse(2).row_map(), &[0, 1]);
        assert_eq!(Permutation::bipartite_reverse(5).row_map(), &[2, 1, 0, 4, 3]);
        assert_eq!(
            Permutation::bipartite_reverse(16).row_map(),
            &[7, 6, 5, 4, 3, 2, 1, 0, 15, 14, 13, 12, 11, 10, 9, 8]
        );
    }

    #[test]
    fn permute_rejects_size_mismatch() {
        let g = WaveGrid::<f64>::zeros(4, 2);
        assert!(matches!(
            permute_rows(&g, &Permutation::reverse(3)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn from_map_rejects_non_bijection() {
        assert!(Permutation::from_map(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_map(vec![0, 3, 1]).is_err());
        assert!(Permutation::from_map(vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn pcm_normalization() {
        assert_eq!(normalize_pcm16(&[i16::MIN, 0, 16384]), vec![-1.0, 0.0, 0.5]);
        assert_eq!(to_pcm16(&[-1.0f32, 0.5, 2.0]), vec![i16::MIN, 16384, i16::MAX]);
    }

    proptest! {
        #[test]
        fn permutations_are_bijective_involutions(h in 1usize..80) {
            for p in [Permutation::identity(h), Permutation::reverse(h), Permutation::bipartite_reverse(h)] {
                let mut sorted = p.row_map().to_vec();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..h).collect::<Vec<_>>());
                prop_assert_eq!(p.inverse().row_map().to_vec(), p.row_map().to_vec());
                let twice = p.then(&p);
                prop_assert_eq!(twice.row_map().to_vec(), Permutation::identity(h).row_map().to_vec());
            }
        }

        #[test]
        fn permute_then_inverse_is_identity(h in 1usize..12, w in 1usize..6, seed in 0u64..1000) {
            let vals: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 31 + seed) % 97) as f64).collect();
            let g = WaveGrid::from_vec(h, w, vals);
            let map: Vec<usize> = {
                let mut m: Vec<usize> = (0..h).collect();
                m.rotate_left((seed as usize) % h);
                m
            };
            let p = Permutation::from_map(map).unwrap();
            let back = permute_rows(&permute_rows(&g, &p).unwrap(), &p.inverse()).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn padding_only_appends_zeros(len in 0usize..300, h in 1usize..70) {
            let x = Waveform::new((0..len).map(|i| i as f32 + 1.0).collect(), 8000);
            let (p, k) = pad_to_multiple(&x, h);
            prop_assert_eq!(p.len() % h, 0);
            prop_assert!(k < h);
            prop_assert_eq!(&p.samples[..len], &x.samples[..]);
            prop_assert!(p.samples[len..].iter().all(|&v| v == 0.0));
        }
    }
}
