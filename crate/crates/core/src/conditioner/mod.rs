//! Log-mel features and their alignment with the squeezed waveform.

mod upsample;

pub use upsample::{Upsampler, UPSAMPLE_FACTOR, UPSAMPLE_GEOMETRY, UPSAMPLE_SLOPE};

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{permute_rows_tensor, Permutation, Waveform};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper band edge; Nyquist when absent.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            win: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::InvalidConfig("mel sizes must be positive".into()));
        }
        if self.win > self.n_fft {
            return Err(Error::InvalidConfig("mel window longer than the FFT".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("mel log floor must be positive".into()));
        }
        Ok(())
    }
}

/// Log-magnitude mel energies, stored band-major: `values[m * n_frames + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub hop: usize,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, n_frames: usize, hop: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(Error::ShapeMismatch {
                context: "mel spectrogram".into(),
                expected: vec![n_mels, n_frames],
                found: vec![values.len()],
            });
        }
        Ok(Self {
            n_mels,
            n_frames,
            hop,
            values,
        })
    }

    pub fn get(&self, m: usize, t: usize) -> f32 {
        self.values[m * self.n_frames + t]
    }

    pub fn frame(&self, t: usize) -> Vec<f32> {
        (0..self.n_mels).map(|m| self.get(m, t)).collect()
    }

    /// Number of waveform samples the frames cover.
    pub fn covered_samples(&self) -> usize {
        self.n_frames * self.hop
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.n_mels, self.n_frames], |i| T::of(self.values[i] as f64))
    }

    pub fn from_tensor(t: &Tensor<f32>, hop: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "mel tensor rank".into(),
                expected: vec![2],
                found: vec![s.len()],
            });
        }
        Self::new(s[0], s[1], hop, t.data().to_vec())
    }

    /// Frames `start..start + count`; frames past the end are filled with
    /// `pad_value`.
    pub fn slice_frames(&self, start: usize, count: usize, pad_value: f32) -> Self {
        let mut values = vec![pad_value; self.n_mels * count];
        for m in 0..self.n_mels {
            for t in 0..count {
                if start + t < self.n_frames {
                    values[m * count + t] = self.get(m, start + t);
                }
            }
        }
        Self {
            n_mels: self.n_mels,
            n_frames: count,
            hop: self.hop,
            values,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `[n_mels][n_fft / 2 + 1]`,
/// with unit peak height.
pub fn mel_filterbank(sample_rate: u32, cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let fmax = cfg.fmax.unwrap_or(sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period.max(1));
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Log-mel spectrogram with centered frames (reflect padding), producing
/// `ceil(len / hop)` frames.
pub fn mel_spectrogram<T: Scalar>(x: &Waveform<T>, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if x.len() < cfg.win {
        return Err(Error::TooShort {
            len: x.len(),
            window: cfg.win,
        });
    }
    let n = x.len();
    let n_frames = n.div_ceil(cfg.hop);
    let n_bins = cfg.n_fft / 2 + 1;
    let window = hann(cfg.win);
    let win_off = (cfg.n_fft - cfg.win) / 2;
    let bank = mel_filterbank(x.sample_rate, cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let samples: Vec<f64> = x.samples.iter().map(|v| v.as_f64()).collect();

    let mut values = vec![0f32; cfg.n_mels * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut mag = vec![0.0; n_bins];
    let half = (cfg.n_fft / 2) as isize;
    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize - half;
        for (k, b) in buf.iter_mut().enumerate() {
            let wv = if k >= win_off && k < win_off + cfg.win {
                window[k - win_off]
            } else {
                0.0
            };
            *b = Complex::new(samples[reflect(start + k as isize, n)] * wv, 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mag.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for (mi, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
            values[mi * n_frames + t] = e.max(cfg.log_floor).ln() as f32;
        }
    }
    MelSpectrogram::new(cfg.n_mels, n_frames, cfg.hop, values)
}

/// Trims per-sample features `[channels, len]` to `h · w`, squeezes each
/// channel column-major into `[channels, h, w]`, and returns one grid per
/// flow: flow `k` sees the grid permuted by the permutations of flows
/// `0..k`, matching the latents it receives.
pub fn build_conditioner_grid<T: Scalar>(
    features: &Tensor<T>,
    h: usize,
    w: usize,
    flow_permutations: &[Permutation],
) -> Result<Vec<Tensor<T>>> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "conditioner features".into(),
            expected: vec![0, h * w],
            found: s.to_vec(),
        });
    }
    let (m, len) = (s[0], s[1]);
    let n = h * w;
    if len < n {
        return Err(Error::ConditionerTooShort {
            available: len,
            required: n,
        });
    }
    let src = features.data();
    let mut grid = vec![T::zero(); m * n];
    for c in 0..m {
        let chan = &src[c * len..c * len + n];
        let dst = &mut grid[c * n..(c + 1) * n];
        for j in 0..w {
            for i in 0..h {
                dst[i * w + j] = chan[j * h + i];
            }
        }
    }
    let mut cur = Tensor::from_vec(&[m, h, w], grid);
    let mut out = Vec::with_capacity(flow_permutations.len());
    for p in flow_permutations {
        let next = permute_rows_tensor(&cur, p)?;
        out.push(cur);
        cur = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::squeeze_samples;

    #[test]
    fn frame_count_is_ceil_of_hops() {
        let x = Waveform::new(vec![0f32; 16384], 22050);
        let mel = mel_spectrogram(&x, &MelConfig::default()).unwrap();
        assert_eq!((mel.n_mels, mel.n_frames), (80, 64));
        let x = Waveform::new(vec![0f32; 16385], 22050);
        assert_eq!(mel_spectrogram(&x, &MelConfig::default()).unwrap().n_frames, 65);
    }

    #[test]
    fn silence_hits_the_floor() {
        let x = Waveform::new(vec![0f32; 4096], 22050);
        let mel = mel_spectrogram(&x, &MelConfig::default()).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn short_input_is_rejected() {
        let x = Waveform::new(vec![0f32; 1000], 22050);
        assert!(matches!(
            mel_spectrogram(&x, &MelConfig::default()),
            Err(Error::TooShort { len: 1000, window: 1024 })
        ));
    }

    #[test]
    fn sine_peak_matches_direct_dft() {
        let sr = 22050u32;
        let x: Vec<f64> = (0..8192)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / sr as f64).sin())
            .collect();
        let cfg = MelConfig::default();
        let mel = mel_spectrogram(&Waveform::new(x.clone(), sr), &cfg).unwrap();

        // direct DFT of one interior windowed frame
        let w = hann(1024);
        let frame: Vec<f64> = (0..1024).map(|k| x[2048 + k] * w[k]).collect();
        let peak_bin = (0..=512)
            .max_by(|&a, &b| {
                let mag = |k: usize| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, v) in frame.iter().enumerate() {
                        let ph = -2.0 * std::f64::consts::PI * (k * n) as f64 / 1024.0;
                        re += v * ph.cos();
                        im += v * ph.sin();
                    }
                    (re * re + im * im).sqrt()
                };
                mag(a).partial_cmp(&mag(b)).unwrap()
            })
            .unwrap();
        let bank = mel_filterbank(sr, &cfg);
        let expected = (0..80)
            .max_by(|&a, &b| bank[a][peak_bin].partial_cmp(&bank[b][peak_bin]).unwrap())
            .unwrap();

        for t in 0..mel.n_frames {
            let f = mel.frame(t);
            let arg = (0..80).max_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap()).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn filterbank_spans_zero_to_nyquist() {
        let bank = mel_filterbank(16000, &MelConfig::default());
        assert_eq!(bank.len(), 80);
        assert!(bank.iter().all(|f| f.len() == 513));
        assert!(bank.iter().all(|f| f.iter().any(|&v| v > 0.0)));
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn grid_is_column_major_and_trimmed() {
        let feats = Tensor::from_fn(&[2, 8], |i| i as f64);
        let grids = build_conditioner_grid(&feats, 2, 3, &[Permutation::identity(2)]).unwrap();
        assert_eq!(grids.len(), 1);
        let g = &grids[0];
        assert_eq!(g.shape(), &[2, 2, 3]);
        assert_eq!(g.channel(0), &[0.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
        assert_eq!(g.channel(1), &[8.0, 10.0, 12.0, 9.0, 11.0, 13.0]);
        assert!(build_conditioner_grid(&feats, 2, 5, &[Permutation::identity(2)]).is_err());
    }

    #[test]
    fn later_flows_see_rows_permuted_like_the_latents() {
        let feats = Tensor::from_fn(&[1, 8], |i| i as f64);
        let perms = [Permutation::reverse(4), Permutation::bipartite_reverse(4), Permutation::reverse(4)];
        let grids = build_conditioner_grid(&feats, 4, 2, &perms).unwrap();
        let base = squeeze_samples(feats.data(), 4).unwrap();
        let mut expected = base.clone();
        for (k, g) in grids.iter().enumerate() {
            assert_eq!(g.data(), expected.values(), "flow {k}");
            expected = crate::signal::permute_rows(&expected, &perms[k]).unwrap();
        }
        assert_eq!(grids[1].channel(0), &[3.0, 7.0, 2.0, 6.0, 1.0, 5.0, 0.0, 4.0]);
    }
}
