//! Maximum-likelihood training: clip sampling, Adam and the training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape};
use crate::conditioner::{mel_spectrogram, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::io::checkpoint::{save_checkpoint, TrainingMeta};
use crate::io::dataset::DatasetEntry;
use crate::kernels;
use crate::model::WaveFlowModel;
use crate::signal::{read_wav, squeeze_samples, Waveform};
use crate::tensor::{Scalar, Tensor};

/// Hop between mel frames; clip starts are multiples of it.
pub const CLIP_HOP: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Fp32,
    Fp64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "fp64" => Ok(Precision::Fp64),
            other => Err(Error::InvalidArgument(format!("unknown precision {other:?} (fp32 or fp64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_length: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub precision: Precision,
    /// Optional global-norm gradient clipping.
    pub max_grad_norm: Option<f64>,
    /// Worker threads for per-clip gradient evaluation.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 8,
            clip_length: 16000,
            max_steps: 1000,
            seed: 0,
            checkpoint_interval: 1000,
            precision: Precision::Fp32,
            max_grad_norm: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Small settings that finish on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            batch_size: 2,
            clip_length: 4096,
            ..Self::default()
        }
    }

    /// Residual channels of the desk model.
    pub const DESK_CHANNELS: usize = 32;

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.clip_length == 0 {
            return Err(Error::InvalidConfig("clip_length must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("threads must be positive".into()));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::InvalidConfig("max_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `w = g · v / ‖v‖` with one magnitude per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNormParam<T> {
    pub v: Tensor<T>,
    pub g: Vec<T>,
}

impl<T: Scalar> WeightNormParam<T> {
    /// Starts from `v = w`, `g = ‖w‖`, which reproduces `w`.
    pub fn from_weight(w: &Tensor<T>) -> Self {
        let cout = w.shape()[0];
        let n = w.numel() / cout;
        let g = (0..cout)
            .map(|o| w.data()[o * n..(o + 1) * n].iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        Self { v: w.clone(), g }
    }

    pub fn weight(&self) -> Tensor<T> {
        kernels::weight_norm(&self.v, &self.g)
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Updates skipped because of a non-finite gradient.
    pub skipped: u64,
    pub m: BTreeMap<ParamId, Tensor<T>>,
    pub v: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |_| -> BTreeMap<ParamId, Tensor<T>> {
            params.iter().map(|(id, _, t)| (id, Tensor::zeros(t.shape()))).collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            skipped: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient. Returns `false` and leaves everything
/// untouched when any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<bool> {
    for (id, g) in grads.iter() {
        if g.shape() != params.get(id).shape() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient of {}", params.name(id)),
                expected: params.get(id).shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    if !grads.all_finite() {
        state.skipped += 1;
        log::warn!("skipping update: non-finite gradient ({} skipped so far)", state.skipped);
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let m = state.m.get_mut(&id).expect("moment per parameter");
        let v = state.v.get_mut(&id).expect("moment per parameter");
        let p = params.get_mut(id);
        for k in 0..p.numel() {
            let gk = g.map_or(0.0, |g| g.data()[k].as_f64());
            let mk = b1 * m.data()[k].as_f64() + (1.0 - b1) * gk;
            let vk = b2 * v.data()[k].as_f64() + (1.0 - b2) * gk * gk;
            m.data_mut()[k] = T::of(mk);
            v.data_mut()[k] = T::of(vk);
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + state.eps);
            p.data_mut()[k] = T::of(p.data()[k].as_f64() - update);
        }
    }
    Ok(true)
}

/// One training utterance with its full mel, if the model is conditioned.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub audio: Waveform<f32>,
    pub mel: Option<MelSpectrogram>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    /// Computes mels up front when `mel` is given.
    pub fn from_waveforms(waves: Vec<Waveform<f32>>, mel: Option<&MelConfig>) -> Result<Self> {
        if waves.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let utterances = waves
            .into_iter()
            .map(|audio| {
                let mel = mel.map(|cfg| mel_spectrogram(&audio, cfg)).transpose()?;
                Ok(Utterance { audio, mel })
            })
            .collect::<Result<_>>()?;
        Ok(Self { utterances })
    }

    pub fn from_entries(entries: &[DatasetEntry], mel: Option<&MelConfig>) -> Result<Self> {
        let waves = entries.iter().map(|e| read_wav(&e.wav)).collect::<Result<Vec<_>>>()?;
        Self::from_waveforms(waves, mel)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// A training example cut from one utterance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Clip {
    pub utterance: usize,
    /// Sample offset into the utterance, a multiple of [`CLIP_HOP`].
    pub start: usize,
    pub audio: Vec<f32>,
    /// Frames `start / hop ..`, padded with the log floor past the end.
    #[serde(skip)]
    pub mel: Option<MelSpectrogram>,
}

/// Picks a random utterance and a hop-aligned start. Short utterances are
/// zero-padded at the tail and start at 0.
pub fn sample_clip<R: Rng + ?Sized>(dataset: &Dataset, clip_length: usize, rng: &mut R) -> Result<Clip> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let u = rng.random_range(0..dataset.len());
    let utt = &dataset.utterances[u];
    let len = utt.audio.len();
    let start = if len > clip_length {
        CLIP_HOP * rng.random_range(0..=(len - clip_length) / CLIP_HOP)
    } else {
        0
    };
    let mut audio = vec![0.0f32; clip_length];
    let end = (start + clip_length).min(len);
    audio[..end - start].copy_from_slice(&utt.audio.samples[start..end]);
    let mel = utt.mel.as_ref().map(|m| {
        let floor = 1e-5f32.ln();
        m.slice_frames(start / m.hop, clip_length.div_ceil(m.hop), floor)
    });
    Ok(Clip {
        utterance: u,
        start,
        audio,
        mel,
    })
}

/// Per-dimension loss and gradients for one clip, padded to a multiple of
/// the model height.
pub fn clip_loss<T: Scalar>(model: &WaveFlowModel<T>, clip: &Clip) -> Result<(f64, Gradients<T>)> {
    let h = model.config.h;
    let mut audio: Vec<T> = clip.audio.iter().map(|&v| T::of(v as f64)).collect();
    audio.resize(audio.len().div_ceil(h) * h, T::zero());
    let grid = squeeze_samples(&audio, h)?;
    let mel = clip.mel.as_ref().map(|m| m.to_tensor::<T>());
    let mut tape = Tape::new();
    let taped = model.record_loss(&mut tape, &grid, mel.as_ref())?;
    let loss = tape.value(taped.loss).item().as_f64();
    Ok((loss, tape.backward(taped.loss)))
}

/// Mean loss and gradients over a batch. With `threads > 1` clips are split
/// across scoped threads and reduced in clip order.
pub fn batch_loss<T: Scalar>(model: &WaveFlowModel<T>, clips: &[Clip], threads: usize) -> Result<(f64, Gradients<T>)> {
    let results: Vec<Result<(f64, Gradients<T>)>> = if threads <= 1 || clips.len() <= 1 {
        clips.iter().map(|c| clip_loss(model, c)).collect()
    } else {
        let chunk = clips.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = clips
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|c| clip_loss(model, c)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };
    let mut total = 0.0;
    let mut grads = Gradients::new();
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.accumulate(g);
    }
    let inv = 1.0 / clips.len() as f64;
    grads.scale(T::of(inv));
    Ok((total * inv, grads))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Nats per dimension.
    pub loss: f64,
    pub grad_norm: f64,
    /// Seconds since the loop started.
    pub wall_time: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub skipped_steps: u64,
}

impl TrainSummary {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Where the loop writes its outputs. Without a directory nothing is
/// written.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn metrics_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("metrics.ndjson"))
    }

    pub fn checkpoint_base(&self, step: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("ckpt-{step:08}")))
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    clips: &'a [Clip],
}

fn dump_batch(dir: &Path, step: usize, clips: &[Clip]) -> Result<PathBuf> {
    let path = dir.join(format!("nan-step{step:08}.json"));
    std::fs::write(&path, serde_json::to_vec(&NanDump { step, clips })?)?;
    Ok(path)
}

/// Trains in place. Clip sampling is driven by `config.seed`, so runs are
/// reproducible. A non-finite loss halts with the last batch dumped next to
/// the metrics.
pub fn train_loop<T: Scalar>(
    config: &TrainConfig,
    model: &mut WaveFlowModel<T>,
    dataset: &Dataset,
    output: &TrainOutput,
) -> Result<TrainSummary> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut metrics = match (&output.dir, output.metrics_path()) {
        (Some(dir), Some(p)) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&model.params);
    let mut summary = TrainSummary {
        records: Vec::with_capacity(config.max_steps),
        checkpoints: Vec::new(),
        skipped_steps: 0,
    };
    let t0 = Instant::now();
    for step in 1..=config.max_steps {
        let clips = (0..config.batch_size)
            .map(|_| sample_clip(dataset, config.clip_length, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let evaluated = batch_loss(model, &clips, config.threads);
        let (loss, mut grads) = match evaluated {
            Ok((l, g)) if l.is_finite() => (l, g),
            Ok(_) | Err(Error::NonFiniteNode { .. }) | Err(Error::NonFinite { .. }) => {
                let dump = output.dir.as_deref().map(|d| dump_batch(d, step, &clips)).transpose()?;
                return Err(Error::NanLoss { step, dump });
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grads.global_norm();
        if let Some(max) = config.max_grad_norm {
            if grad_norm > max {
                grads.scale(T::of(max / grad_norm));
            }
        }
        let applied = adam_step(&mut model.params, &grads, &mut adam, config.learning_rate)?;
        let record = StepRecord {
            step,
            loss,
            grad_norm,
            wall_time: t0.elapsed().as_secs_f64(),
            skipped: !applied,
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        summary.records.push(record);
        let due = config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0;
        if due || step == config.max_steps {
            if let Some(base) = output.checkpoint_base(step) {
                let meta = TrainingMeta {
                    step: step as u64,
                    seed: config.seed,
                };
                save_checkpoint(model, &base, meta)?;
                summary.checkpoints.push(base);
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    summary.skipped_steps = adam.skipped;
    Ok(summary)
}

pub fn count_parameters<T: Scalar>(model: &WaveFlowModel<T>) -> usize {
    model.count_parameters()
}

/// Sums of a few random sinusoids per clip, scaled to peak amplitude
/// `amplitude`. Used for toy training runs.
pub fn sine_mixture_dataset<R: Rng + ?Sized>(
    n_clips: usize,
    len: usize,
    sample_rate: u32,
    amplitude: f32,
    rng: &mut R,
) -> Vec<Waveform<f32>> {
    (0..n_clips)
        .map(|_| {
            let k = rng.random_range(1..=3);
            let parts: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.random_range(100.0..2000.0),
                        rng.random_range(0.2..1.0),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            let norm: f64 = parts.iter().map(|p| p.1).sum();
            let samples = (0..len)
                .map(|n| {
                    let t = n as f64 / sample_rate as f64;
                    let v: f64 = parts.iter().map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
                    (v / norm) as f32 * amplitude
                })
                .collect();
            Waveform::new(samples, sample_rate)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::ModelConfig;
    use crate::io::checkpoint::load_checkpoint;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_vec(&[1], vec![v]));
        (s, id)
    }

    fn grad(id: ParamId, g: f64) -> Gradients<f64> {
        let mut gr = Gradients::new();
        gr.insert(id, Tensor::from_vec(&[1], vec![g]));
        gr
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        assert!(adam_step(&mut s, &grad(id, 1.0), &mut st, 0.1).unwrap());
        // m̂ = 1, v̂ = 1, so Δ = −lr / (1 + ε)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_decays_moments_only() {
        let (mut s, id) = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grad(id, 2.0), &mut st, 0.01).unwrap();
        let p = s.get(id).data()[0];
        let (m, v) = (st.m[&id].data()[0], st.v[&id].data()[0]);
        // with g = 0 at t = 2: m̂ = 0.9·m / (1 − 0.81), nonzero, so p still
        // moves; the raw moments must decay by β exactly
        adam_step(&mut s, &grad(id, 0.0), &mut st, 0.0).unwrap();
        assert_eq!(s.get(id).data()[0], p);
        assert!((st.m[&id].data()[0] - 0.9 * m).abs() < 1e-15);
        assert!((st.v[&id].data()[0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_from_rest_is_a_no_op() {
        let (mut s, id) = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grad(id, 0.0), &mut st, 0.1).unwrap();
        assert_eq!(s.get(id).data()[0], 0.5);
        assert_eq!(st.m[&id].data()[0], 0.0);
    }

    #[test]
    fn adam_second_step_is_not_larger() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grad(id, 0.7), &mut st, 0.05).unwrap();
        let d1 = s.get(id).data()[0].abs();
        let before = s.get(id).data()[0];
        adam_step(&mut s, &grad(id, 0.7), &mut st, 0.05).unwrap();
        let d2 = (s.get(id).data()[0] - before).abs();
        assert!(d2 <= d1 * 1.01, "{d2} vs {d1}");
    }

    #[test]
    fn adam_skips_non_finite() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        assert!(!adam_step(&mut s, &grad(id, f64::NAN), &mut st, 0.1).unwrap());
        assert_eq!((st.step, st.skipped), (0, 1));
        assert_eq!(s.get(id).data()[0], 1.0);
        let mut bad = Gradients::new();
        bad.insert(id, Tensor::from_vec(&[2], vec![0.0, 0.0]));
        assert!(adam_step(&mut s, &bad, &mut st, 0.1).is_err());
    }

    #[test]
    fn weight_norm_round_trip() {
        let w = Tensor::from_fn(&[3, 2, 1, 2], |i| (i as f64 * 0.37).sin());
        let p = WeightNormParam::from_weight(&w);
        assert!(p.weight().max_abs_diff(&w) < 1e-12);
        let w32 = w.cast::<f32>();
        assert!(WeightNormParam::from_weight(&w32).weight().max_abs_diff(&w32) < 1e-6);
    }

    fn dataset(lens: &[usize]) -> Dataset {
        let waves = lens
            .iter()
            .map(|&n| Waveform::new((0..n).map(|i| (i as f32 * 1e-4).sin()).collect(), 22050))
            .collect();
        Dataset::from_waveforms(waves, None).unwrap()
    }

    #[test]
    fn clip_starts_are_aligned_and_uniform() {
        let ds = dataset(&[32000]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n_bins = (32000 - 16000) / CLIP_HOP + 1;
        let mut counts = vec![0usize; n_bins];
        let draws = 10_000;
        for _ in 0..draws {
            let c = sample_clip(&ds, 16000, &mut rng).unwrap();
            assert_eq!(c.start % CLIP_HOP, 0);
            assert!(c.start + 16000 <= 32000);
            counts[c.start / CLIP_HOP] += 1;
        }
        let e = draws as f64 / n_bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 62 degrees of freedom; the 99.9% quantile is about 103
        assert!(chi2 < 103.0, "chi2 {chi2}");
        assert_eq!(*counts.last().unwrap() > 0, true);
    }

    #[test]
    fn short_utterances_are_padded() {
        let ds = dataset(&[10000]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = sample_clip(&ds, 16000, &mut rng).unwrap();
        assert_eq!((c.start, c.audio.len()), (0, 16000));
        assert_eq!(&c.audio[..10000], &ds.utterances[0].audio.samples[..]);
        assert!(c.audio[10000..].iter().all(|&v| v == 0.0));
        assert!(matches!(
            sample_clip(&Dataset::default(), 10, &mut rng),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn clip_mel_is_the_aligned_slice() {
        let waves = vec![Waveform::new((0..6000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(), 22050)];
        let cfg = MelConfig {
            n_mels: 8,
            ..MelConfig::default()
        };
        let ds = Dataset::from_waveforms(waves, Some(&cfg)).unwrap();
        let full = ds.utterances[0].mel.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = sample_clip(&ds, 2048, &mut rng).unwrap();
            let m = c.mel.unwrap();
            assert_eq!(m.n_frames, 8);
            for t in 0..8 {
                assert_eq!(m.frame(t), full.frame(c.start / 256 + t));
            }
        }
    }

    fn toy_model() -> WaveFlowModel<f64> {
        let mut c = ModelConfig::unconditioned(4, 1, 2, 4);
        c.dilations_h = Some(vec![1, 1]);
        c.dilations_w = Some(vec![1, 2]);
        WaveFlowModel::init(&c, 5).unwrap()
    }

    fn toy_config(steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            clip_length: 64,
            max_steps: steps,
            seed: 11,
            checkpoint_interval: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let d = TrainConfig::default();
        assert_eq!((d.learning_rate, d.batch_size, d.clip_length), (2e-4, 8, 16000));
        let k = TrainConfig::desk();
        assert_eq!((k.batch_size, k.clip_length, TrainConfig::DESK_CHANNELS), (2, 4096, 32));
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..d
        }
        .validate()
        .is_err());
    }

    #[test]
    fn training_is_deterministic_and_writes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = Dataset::from_waveforms(sine_mixture_dataset(4, 300, 8000, 0.5, &mut rng), None).unwrap();
        let snapshot = ds.clone();
        let dir = tempfile::tempdir().unwrap();
        let mut a = toy_model();
        let sa = train_loop(&toy_config(12), &mut a, &ds, &TrainOutput::to_dir(dir.path())).unwrap();
        let mut b = toy_model();
        let sb = train_loop(&toy_config(12), &mut b, &ds, &TrainOutput::default()).unwrap();
        assert_eq!(sa.losses(), sb.losses());
        assert_eq!(ds, snapshot);
        assert_eq!(sa.checkpoints.len(), 3);
        let lines = std::fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
        let recs: Vec<StepRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 12);
        assert_eq!(recs[3].loss, sa.records[3].loss);
        let (loaded, meta) = load_checkpoint::<f64>(sa.checkpoints.last().unwrap()).unwrap();
        assert_eq!(meta.step, 12);
        assert_eq!(loaded.count_parameters(), a.count_parameters());
    }

    #[test]
    fn threaded_batches_match_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = Dataset::from_waveforms(sine_mixture_dataset(3, 200, 8000, 0.5, &mut rng), None).unwrap();
        let mut m = toy_model();
        train_loop(&toy_config(3), &mut m, &ds, &TrainOutput::default()).unwrap();
        let clips: Vec<Clip> = (0..4).map(|_| sample_clip(&ds, 64, &mut rng).unwrap()).collect();
        let (l1, g1) = batch_loss(&m, &clips, 1).unwrap();
        let (l3, g3) = batch_loss(&m, &clips, 3).unwrap();
        assert_eq!(l1, l3);
        for (id, g) in g1.iter() {
            assert_eq!(g, g3.get(id).unwrap());
        }
    }

    #[test]
    fn nan_loss_halts_with_a_dump() {
        let ds = Dataset::from_waveforms(vec![Waveform::new(vec![f32::NAN; 128], 8000)], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_model();
        match train_loop(&toy_config(3), &mut m, &ds, &TrainOutput::to_dir(dir.path())) {
            Err(Error::NanLoss { step: 1, dump: Some(p) }) => assert!(p.exists()),
            other => panic!("expected a NaN halt, got {other:?}"),
        }
    }
}
