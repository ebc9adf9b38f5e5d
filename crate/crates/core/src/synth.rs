//! Synthesis engines and the benchmark harness.
//!
//! The naive engine recomputes the whole network for every generated row.
//! The queued engine keeps, per layer, a ring buffer of the last
//! `(k_h − 1) · d_h` layer-input rows, so each row step costs the same
//! regardless of its index or of `h`.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::conditioner::MelSpectrogram;
use crate::error::{Error, Result};
use crate::flow::{at_flow, check_conds, solve_row, stack_forward_grid, FlowStack, SynthStats};
use crate::kernels;
use crate::network::ConvNet;
use crate::signal::{permute_rows, unsqueeze, WaveGrid, Waveform};
use crate::tensor::{Scalar, Tensor};

/// I.i.d. `N(0, std²)` latents. `std = 0` gives an all-zero grid.
pub fn sample_latent<T: Scalar, R: Rng + ?Sized>(h: usize, w: usize, std: f64, rng: &mut R) -> Result<WaveGrid<T>> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("latent std must be non-negative, got {std}")));
    }
    let values = (0..h * w)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of(z * std)
        })
        .collect();
    Ok(WaveGrid::from_vec(h, w, values))
}

/// Per-layer ring buffers for one flow.
pub struct QueueState<T> {
    queues: Vec<VecDeque<Vec<T>>>,
    capacities: Vec<usize>,
    /// Conditioner projection per layer, `[2C, h, w]`, computed once.
    cond_proj: Vec<Option<Vec<T>>>,
    w: usize,
    channels: usize,
    next_row: usize,
}

impl<T: Scalar> QueueState<T> {
    /// Empty-history state: every slot holds a zero row, which is exactly
    /// the top padding of a full pass.
    pub fn new(net: &ConvNet<T>, cond: Option<&Tensor<T>>, h: usize, w: usize) -> Result<Self> {
        crate::network::check_cond(net, cond, h, w)?;
        let c = net.residual_channels();
        let capacities: Vec<usize> = net.layers.iter().map(|l| l.geometry().history_rows()).collect();
        let queues = capacities
            .iter()
            .map(|&cap| (0..cap).map(|_| vec![T::zero(); c * w]).collect())
            .collect();
        let cond_proj = net
            .layers
            .iter()
            .map(|l| match (&l.cond_projection, cond) {
                (Some(p), Some(cg)) => Some(kernels::pointwise(
                    cg.data(),
                    p.in_channels(),
                    &p.weight,
                    Some(&p.bias),
                )),
                _ => None,
            })
            .collect();
        Ok(Self {
            queues,
            capacities,
            cond_proj,
            w,
            channels: c,
            next_row: 0,
        })
    }

    pub fn capacity(&self, layer: usize) -> usize {
        self.capacities[layer]
    }

    /// Cached layer-input rows, oldest first.
    pub fn history(&self, layer: usize) -> impl Iterator<Item = &[T]> {
        self.queues[layer].iter().map(Vec::as_slice)
    }

    /// Computes `(μ, log σ)` for the next row from the previous data row
    /// (`None` for row 0). Returns the MACs spent.
    pub fn step(&mut self, net: &ConvNet<T>, prev_row: Option<&[T]>, h: usize) -> Result<(Vec<T>, Vec<T>, u64)> {
        let (c, w, i) = (self.channels, self.w, self.next_row);
        if i >= h {
            return Err(Error::InvalidArgument(format!("row {i} is past the grid height {h}")));
        }
        let mut macs = 0u64;
        let zeros;
        let input = match prev_row {
            Some(r) => r,
            None => {
                zeros = vec![T::zero(); w];
                &zeros
            }
        };
        let mut hidden = kernels::pointwise(input, 1, &net.start.weight, Some(&net.start.bias));
        macs += (c * w) as u64;
        let mut skip: Option<Vec<T>> = None;
        for (l, layer) in net.layers.iter().enumerate() {
            let g = layer.geometry();
            let cap = self.capacities[l];
            let q = &mut self.queues[l];
            if q.len() != cap {
                return Err(Error::QueueUnderflow { layer: l, row: i });
            }
            // taps[a] is layer-input row i − (kh − 1 − a)·d_h
            let taps: Vec<Option<&[T]>> = (0..g.kh)
                .map(|a| {
                    let back = (g.kh - 1 - a) * g.dil_h;
                    if back == 0 {
                        Some(hidden.as_slice())
                    } else {
                        Some(q[cap - back].as_slice())
                    }
                })
                .collect();
            let mut pre = kernels::conv2d_row(&taps, c, w, &layer.filter, Some(&layer.bias), &g);
            macs += (2 * c * c * g.kh * g.kw * w) as u64;
            if let Some(cp) = &self.cond_proj[l] {
                let n = cp.len() / (2 * c);
                for ch in 0..2 * c {
                    let src = &cp[ch * n + i * w..ch * n + (i + 1) * w];
                    for (a, b) in pre[ch * w..(ch + 1) * w].iter_mut().zip(src) {
                        *a += *b;
                    }
                }
            }
            let gated = kernels::gate(&pre, c);
            if cap > 0 {
                q.pop_front();
                q.push_back(hidden.clone());
            }
            if let Some(res) = &layer.residual {
                let r = kernels::pointwise(&gated, c, &res.weight, Some(&res.bias));
                macs += (c * c * w) as u64;
                for (a, b) in hidden.iter_mut().zip(&r) {
                    *a += *b;
                }
            }
            let s = kernels::pointwise(&gated, c, &layer.skip.weight, Some(&layer.skip.bias));
            macs += (c * c * w) as u64;
            match &mut skip {
                None => skip = Some(s),
                Some(acc) => acc.iter_mut().zip(&s).for_each(|(a, b)| *a += *b),
            }
        }
        let skip = skip.unwrap_or_else(|| vec![T::zero(); c * w]);
        let out = kernels::pointwise(&skip, c, &net.output.weight, Some(&net.output.bias));
        macs += (2 * c * w) as u64;
        self.next_row += 1;
        Ok((out[..w].to_vec(), out[w..].to_vec(), macs))
    }
}

/// One flow, latents → data, with the convolution queue.
pub fn flow_forward_queued<T: Scalar>(
    z: &WaveGrid<T>,
    cond: Option<&Tensor<T>>,
    net: &ConvNet<T>,
    stats: &mut SynthStats,
) -> Result<WaveGrid<T>> {
    let (h, w) = (z.h(), z.w());
    let mut state = QueueState::new(net, cond, h, w)?;
    let mut x = WaveGrid::zeros(h, w);
    for i in 0..h {
        let prev = (i > 0).then(|| x.row(i - 1).to_vec());
        let (mu, log_sigma, macs) = state.step(net, prev.as_deref(), h)?;
        stats.sequential_steps += 1;
        stats.row_macs.push(macs);
        let mut row = vec![T::zero(); w];
        solve_row(z.row(i), &mu, &log_sigma, &mut row, stats);
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sample",
                flow: 0,
                row: i,
                col: j,
            });
        }
        x.row_mut(i).copy_from_slice(&row);
    }
    Ok(x)
}

pub fn stack_forward_queued_grid<T: Scalar>(
    z0: &WaveGrid<T>,
    conds: &[Option<Tensor<T>>],
    fs: &FlowStack<T>,
    stats: &mut SynthStats,
) -> Result<WaveGrid<T>> {
    check_conds(conds, fs.n_flows())?;
    let mut cur = z0.clone();
    for (k, (flow, cond)) in fs.flows.iter().zip(conds).enumerate().rev() {
        let z = permute_rows(&cur, &flow.permutation.inverse())?;
        cur = flow_forward_queued(&z, cond.as_ref(), &flow.net, stats).map_err(|e| at_flow(e, k))?;
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Naive,
    Queued,
}

/// Latents → waveform with the chosen engine, trimmed to `n_samples`.
pub fn synthesize<T: Scalar>(
    engine: Engine,
    z0: &WaveGrid<T>,
    mel: Option<&MelSpectrogram>,
    fs: &FlowStack<T>,
    sample_rate: u32,
    n_samples: Option<usize>,
) -> Result<(Waveform<T>, SynthStats)> {
    if z0.h() != fs.h {
        return Err(Error::ShapeMismatch {
            context: "latent height".into(),
            expected: vec![fs.h],
            found: vec![z0.h()],
        });
    }
    let conds = fs.conditioner_grids(mel, z0.w())?;
    let mut stats = SynthStats::default();
    let grid = match engine {
        Engine::Naive => stack_forward_grid(z0, &conds, fs, &mut stats)?,
        Engine::Queued => stack_forward_queued_grid(z0, &conds, fs, &mut stats)?,
    };
    let mut out = unsqueeze(&grid, sample_rate);
    if let Some(n) = n_samples {
        out.samples.truncate(n);
    }
    Ok((out, stats))
}

pub fn synth_naive<T: Scalar>(
    z0: &WaveGrid<T>,
    mel: Option<&MelSpectrogram>,
    fs: &FlowStack<T>,
    sample_rate: u32,
) -> Result<(Waveform<T>, SynthStats)> {
    synthesize(Engine::Naive, z0, mel, fs, sample_rate, None)
}

pub fn synth_queued<T: Scalar>(
    z0: &WaveGrid<T>,
    mel: Option<&MelSpectrogram>,
    fs: &FlowStack<T>,
    sample_rate: u32,
) -> Result<(Waveform<T>, SynthStats)> {
    synthesize(Engine::Queued, z0, mel, fs, sample_rate, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub w: usize,
    pub std: f64,
    pub seed: u64,
    pub sample_rate: u32,
    /// Timed repetitions per engine; the fastest is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            w: 256,
            std: 1.0,
            seed: 0,
            sample_rate: 22050,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub h: usize,
    pub w: usize,
    pub n_flows: usize,
    pub samples: usize,
    pub sample_rate: u32,
    pub naive_seconds: f64,
    pub queued_seconds: f64,
    pub sequential_steps: usize,
    pub naive_samples_per_second: f64,
    pub queued_samples_per_second: f64,
    /// Generated audio seconds per wall second.
    pub naive_realtime_factor: f64,
    pub queued_realtime_factor: f64,
    /// `naive_seconds / queued_seconds`.
    pub speedup_ratio: f64,
    pub max_abs_diff: f64,
}

/// Real-time factor: audio seconds produced per wall-clock second.
pub fn realtime_factor(samples: usize, sample_rate: u32, wall_seconds: f64) -> f64 {
    if wall_seconds <= 0.0 {
        return f64::INFINITY;
    }
    (samples as f64 / sample_rate as f64) / wall_seconds
}

/// Times both engines on the same latents. Conditioner grids are built
/// before the clocks start; queue setup is timed.
pub fn bench<T: Scalar>(fs: &FlowStack<T>, cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = sample_latent::<T, _>(fs.h, cfg.w, cfg.std, &mut rng)?;
    let samples = fs.h * cfg.w;
    let mel = fs.upsampler.as_ref().map(|_| {
        let n_mels = fs.flows[0].net.cond_channels().unwrap_or(0);
        let frames = samples.div_ceil(crate::conditioner::UPSAMPLE_FACTOR);
        let values = (0..n_mels * frames)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v as f32
            })
            .collect();
        MelSpectrogram::new(n_mels, frames, crate::conditioner::UPSAMPLE_FACTOR, values)
    });
    let mel = mel.transpose()?;
    let conds = fs.conditioner_grids(mel.as_ref(), cfg.w)?;

    let time = |engine: Engine| -> Result<(f64, WaveGrid<T>, SynthStats)> {
        let mut best = f64::INFINITY;
        let mut last = None;
        for _ in 0..cfg.repeats.max(1) {
            let mut stats = SynthStats::default();
            let t0 = Instant::now();
            let out = match engine {
                Engine::Naive => stack_forward_grid(&z, &conds, fs, &mut stats)?,
                Engine::Queued => stack_forward_queued_grid(&z, &conds, fs, &mut stats)?,
            };
            best = best.min(t0.elapsed().as_secs_f64());
            last = Some((out, stats));
        }
        let (out, stats) = last.expect("at least one repetition");
        Ok((best, out, stats))
    };
    let (naive_seconds, naive_out, _) = time(Engine::Naive)?;
    let (queued_seconds, queued_out, stats) = time(Engine::Queued)?;
    let max_abs_diff = naive_out.max_abs_diff(&queued_out).as_f64();
    Ok(BenchReport {
        h: fs.h,
        w: cfg.w,
        n_flows: fs.n_flows(),
        samples,
        sample_rate: cfg.sample_rate,
        naive_seconds,
        queued_seconds,
        sequential_steps: stats.sequential_steps,
        naive_samples_per_second: samples as f64 / naive_seconds,
        queued_samples_per_second: samples as f64 / queued_seconds,
        naive_realtime_factor: realtime_factor(samples, cfg.sample_rate, naive_seconds),
        queued_realtime_factor: realtime_factor(samples, cfg.sample_rate, queued_seconds),
        speedup_ratio: naive_seconds / queued_seconds,
        max_abs_diff,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowLayer;
    use crate::network::{net_forward_traced, shift_down, NetShape};
    use crate::signal::Permutation;
    use rand_chacha::ChaCha8Rng;

    fn stack(h: usize, n_flows: usize, cond: Option<usize>, seed: u64) -> FlowStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = NetShape {
            residual_channels: 4,
            kernel_h: 3,
            kernel_w: 3,
            dilations_h: vec![1, 2, 4],
            dilations_w: vec![1, 2, 4],
            cond_channels: cond,
        };
        let flows = (0..n_flows)
            .map(|k| FlowLayer {
                net: ConvNet::random(&shape, 0.3, true, &mut rng).unwrap(),
                permutation: if k % 2 == 0 {
                    Permutation::reverse(h)
                } else {
                    Permutation::bipartite_reverse(h)
                },
            })
            .collect();
        let up = cond.map(|_| crate::conditioner::Upsampler::init(0.1, &mut rng));
        FlowStack::new(h, flows, up).unwrap()
    }

    #[test]
    fn latent_std_zero_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sample_latent::<f32, _>(4, 5, 0.0, &mut rng).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        assert!(sample_latent::<f32, _>(4, 5, -1.0, &mut rng).is_err());
        let a = sample_latent::<f64, _>(3, 3, 0.6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_latent::<f64, _>(3, 3, 0.6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn queued_matches_naive_conditioned() {
        let fs = stack(8, 3, Some(3), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = sample_latent::<f64, _>(8, 64, 1.0, &mut rng).unwrap();
        let mel = MelSpectrogram::new(3, 2, 256, (0..6).map(|i| i as f32 * 0.3 - 1.0).collect()).unwrap();
        let (a, sa) = synth_naive(&z, Some(&mel), &fs, 16000).unwrap();
        let (b, sb) = synth_queued(&z, Some(&mel), &fs, 16000).unwrap();
        let diff = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "diff {diff}");
        assert_eq!(sa.sequential_steps, 24);
        assert_eq!(sb.sequential_steps, 24);
        assert_eq!(sa.net_evaluations, 24);
    }

    #[test]
    fn per_row_cost_is_constant() {
        let fs = stack(16, 2, None, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = sample_latent::<f64, _>(16, 8, 1.0, &mut rng).unwrap();
        let (_, stats) = synth_queued(&z, None, &fs, 16000).unwrap();
        assert_eq!(stats.row_macs.len(), 32);
        let first = stats.row_macs[0];
        assert!(stats.row_macs.iter().all(|&m| m == first));
    }

    #[test]
    fn queue_holds_the_latest_layer_inputs() {
        let fs = stack(12, 1, None, 5);
        let net = &fs.flows[0].net;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = sample_latent::<f64, _>(12, 5, 1.0, &mut rng).unwrap();
        let mut stats = SynthStats::default();
        let x = flow_forward_queued(&z, None, net, &mut stats).unwrap();
        let mut trace = Vec::new();
        net_forward_traced(&shift_down(&x), None, net, Some(&mut trace)).unwrap();

        for stop in [1usize, 6, 12] {
            let mut state = QueueState::new(net, None, 12, 5).unwrap();
            for i in 0..stop {
                let prev = (i > 0).then(|| x.row(i - 1).to_vec());
                state.step(net, prev.as_deref(), 12).unwrap();
            }
            for (l, full) in trace.iter().enumerate() {
                let cap = state.capacity(l);
                let hist: Vec<&[f64]> = state.history(l).collect();
                assert_eq!(hist.len(), cap);
                // slot s holds layer-input row stop − cap + s, zero if negative
                for (s, row) in hist.iter().enumerate() {
                    let r = stop as isize - cap as isize + s as isize;
                    for ch in 0..4 {
                        for j in 0..5 {
                            let expected = if r < 0 { 0.0 } else { full.data()[(ch * 12 + r as usize) * 5 + j] };
                            assert!((row[ch * 5 + j] - expected).abs() < 1e-12, "layer {l} slot {s}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stepping_past_the_end_is_rejected() {
        let fs = stack(2, 1, None, 7);
        let net = &fs.flows[0].net;
        let mut st = QueueState::new(net, None, 2, 3).unwrap();
        st.step(net, None, 2).unwrap();
        st.step(net, Some(&[0.0; 3]), 2).unwrap();
        assert!(st.step(net, Some(&[0.0; 3]), 2).is_err());
    }

    #[test]
    fn bench_counts_steps() {
        let fs = stack(8, 2, None, 8);
        let r = bench(
            &fs,
            &BenchConfig {
                w: 16,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.sequential_steps, 16);
        assert!(r.max_abs_diff < 1e-12);
        assert!(r.queued_realtime_factor >= 0.0);
        assert!((realtime_factor(22050, 22050, 0.5) - 2.0).abs() < 1e-15);
    }
}
