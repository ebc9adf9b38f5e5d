//! The per-flow affine bijection, its log-determinant, and stacks of flows
//! separated by row permutations.
//!
//! Direction convention: the *inverse* maps data to latents and runs in one
//! parallel pass; the *forward* maps latents to data and needs one
//! sequential step per grid row.

pub mod reference;

use serde::Serialize;

use crate::conditioner::{build_conditioner_grid, MelSpectrogram, Upsampler};
use crate::error::{Error, Result};
use crate::network::{net_forward, shift_down, ConvNet};
use crate::signal::{pad_to_multiple, permute_rows, squeeze, unsqueeze, Permutation, WaveGrid, Waveform};
use crate::tensor::{Scalar, Tensor};

/// `σ` is floored at `exp(LOG_SIGMA_FLOOR)` when dividing during synthesis.
pub const LOG_SIGMA_FLOOR: f64 = -7.0;

/// `½ log 2π`
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Counters filled in by the synthesis paths.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SynthStats {
    /// Row steps taken, one per row per flow.
    pub sequential_steps: usize,
    /// Full-grid network passes (naive engine only).
    pub net_evaluations: usize,
    /// Elements whose `σ` hit the floor.
    pub floored_sigmas: usize,
    /// Multiply-accumulates spent on each row step (queued engine only).
    pub row_macs: Vec<u64>,
}

impl SynthStats {
    pub fn merge(&mut self, other: SynthStats) {
        self.sequential_steps += other.sequential_steps;
        self.net_evaluations += other.net_evaluations;
        self.floored_sigmas += other.floored_sigmas;
        self.row_macs.extend(other.row_macs);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LikelihoodReport {
    /// `logdet_sum + base_term`, in nats.
    pub total_loglik: f64,
    /// `total_loglik / dims`.
    pub per_dim_loglik: f64,
    pub logdet_sum: f64,
    /// `Σ (−z²/2 − ½ log 2π)` over the final latents.
    pub base_term: f64,
    pub per_flow_logdet: Vec<f64>,
    /// Number of grid elements, including any tail padding.
    pub dims: usize,
    /// Zero samples appended to reach a multiple of `h`.
    pub pad_count: usize,
}

impl LikelihoodReport {
    pub fn new(per_flow_logdet: Vec<f64>, base_term: f64, dims: usize, pad_count: usize) -> Self {
        let logdet_sum: f64 = per_flow_logdet.iter().sum();
        let total_loglik = logdet_sum + base_term;
        Self {
            total_loglik,
            per_dim_loglik: total_loglik / dims as f64,
            logdet_sum,
            base_term,
            per_flow_logdet,
            dims,
            pad_count,
        }
    }
}

/// Standard-normal log density summed over `z`.
pub fn base_log_density<T: Scalar>(z: &[T]) -> f64 {
    z.iter()
        .map(|&v| {
            let v = v.as_f64();
            -0.5 * v * v - HALF_LOG_2PI
        })
        .sum()
}

fn locate_nonfinite<T: Scalar>(g: &WaveGrid<T>, what: &'static str) -> Result<()> {
    match g.values().iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(k) => Err(Error::NonFinite {
            what,
            flow: 0,
            row: k / g.w(),
            col: k % g.w(),
        }),
    }
}

pub(crate) fn at_flow(e: Error, k: usize) -> Error {
    match e {
        Error::NonFinite { what, row, col, .. } => Error::NonFinite { what, flow: k, row, col },
        other => other,
    }
}

/// Data → latents: `Z = σ ⊙ X + μ` with `(μ, log σ)` computed from the
/// shifted `X`. Returns `Z` and `Σ log σ`.
pub fn flow_inverse<T: Scalar>(
    x: &WaveGrid<T>,
    cond: Option<&Tensor<T>>,
    net: &ConvNet<T>,
) -> Result<(WaveGrid<T>, f64)> {
    let (mu, log_sigma) = net_forward(&shift_down(x), cond, net)?;
    locate_nonfinite(&mu, "mu")?;
    locate_nonfinite(&log_sigma, "log_sigma")?;
    let z: Vec<T> = x
        .values()
        .iter()
        .zip(mu.values().iter().zip(log_sigma.values()))
        .map(|(&xv, (&m, &ls))| ls.exp() * xv + m)
        .collect();
    let z = WaveGrid::from_vec(x.h(), x.w(), z);
    locate_nonfinite(&z, "latent")?;
    let logdet = log_sigma.values().iter().map(|v| v.as_f64()).sum();
    Ok((z, logdet))
}

/// Solves row `i` of `X` given `μ`, `log σ` and `Z` for that row.
pub(crate) fn solve_row<T: Scalar>(
    z_row: &[T],
    mu: &[T],
    log_sigma: &[T],
    out: &mut [T],
    stats: &mut SynthStats,
) {
    let floor = T::of(LOG_SIGMA_FLOOR);
    for j in 0..out.len() {
        let ls = if log_sigma[j] < floor {
            stats.floored_sigmas += 1;
            floor
        } else {
            log_sigma[j]
        };
        out[j] = (z_row[j] - mu[j]) / ls.exp();
    }
}

/// Latents → data, one row at a time, recomputing the whole network for
/// every row. This is the reference synthesis path.
pub fn flow_forward<T: Scalar>(
    z: &WaveGrid<T>,
    cond: Option<&Tensor<T>>,
    net: &ConvNet<T>,
    stats: &mut SynthStats,
) -> Result<WaveGrid<T>> {
    let (h, w) = (z.h(), z.w());
    let mut x = WaveGrid::zeros(h, w);
    for i in 0..h {
        let (mu, log_sigma) = net_forward(&shift_down(&x), cond, net)?;
        stats.net_evaluations += 1;
        stats.sequential_steps += 1;
        let mut row = vec![T::zero(); w];
        solve_row(z.row(i), mu.row(i), log_sigma.row(i), &mut row, stats);
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

/// One flow of a stack: its network and the permutation applied to its
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowLayer<T> {
    pub net: ConvNet<T>,
    pub permutation: Permutation,
}

/// Materialized model used for likelihood and synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack<T> {
    pub h: usize,
    pub flows: Vec<FlowLayer<T>>,
    /// Mel upsampler; `None` for unconditioned stacks.
    pub upsampler: Option<Upsampler<T>>,
    /// Standard deviation of the latents at synthesis time.
    pub base_std: f64,
}

impl<T: Scalar> FlowStack<T> {
    pub fn new(h: usize, flows: Vec<FlowLayer<T>>, upsampler: Option<Upsampler<T>>) -> Result<Self> {
        if h == 0 {
            return Err(Error::InvalidConfig("h must be at least 1".into()));
        }
        if flows.is_empty() {
            return Err(Error::InvalidConfig("a stack needs at least one flow".into()));
        }
        for f in &flows {
            if f.permutation.len() != h {
                return Err(Error::InvalidConfig(format!(
                    "permutation of length {} in a stack of height {h}",
                    f.permutation.len()
                )));
            }
            if f.net.cond_channels().is_some() != upsampler.is_some() {
                return Err(Error::InvalidConfig(
                    "networks and upsampler disagree about conditioning".into(),
                ));
            }
        }
        Ok(Self {
            h,
            flows,
            upsampler,
            base_std: 1.0,
        })
    }

    pub fn n_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn permutations(&self) -> Vec<Permutation> {
        self.flows.iter().map(|f| f.permutation.clone()).collect()
    }

    pub fn is_conditioned(&self) -> bool {
        self.upsampler.is_some()
    }

    pub fn cast<U: Scalar>(&self) -> FlowStack<U> {
        FlowStack {
            h: self.h,
            flows: self
                .flows
                .iter()
                .map(|f| FlowLayer {
                    net: f.net.cast(),
                    permutation: f.permutation.clone(),
                })
                .collect(),
            upsampler: self.upsampler.as_ref().map(Upsampler::cast),
            base_std: self.base_std,
        }
    }

    /// Per-flow conditioner grids for an `h × w` latent grid.
    pub fn conditioner_grids(&self, mel: Option<&MelSpectrogram>, w: usize) -> Result<Vec<Option<Tensor<T>>>> {
        match (&self.upsampler, mel) {
            (None, None) => Ok(vec![None; self.n_flows()]),
            (Some(up), Some(mel)) => {
                let features = up.forward(&mel.to_tensor())?;
                let grids = build_conditioner_grid(&features, self.h, w, &self.permutations())?;
                Ok(grids.into_iter().map(Some).collect())
            }
            (Some(_), None) => Err(Error::InvalidArgument(
                "this model is conditioned and needs a mel spectrogram".into(),
            )),
            (None, Some(_)) => Err(Error::InvalidArgument(
                "this model is unconditioned but a mel spectrogram was given".into(),
            )),
        }
    }
}

pub(crate) fn check_conds<T>(conds: &[Option<Tensor<T>>], n: usize) -> Result<()> {
    if conds.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} conditioner grids for {n} flows",
            conds.len()
        )));
    }
    Ok(())
}

/// Grid-level likelihood pass with prebuilt per-flow conditioner grids.
pub fn stack_inverse_grid<T: Scalar>(
    x: &WaveGrid<T>,
    conds: &[Option<Tensor<T>>],
    fs: &FlowStack<T>,
) -> Result<(WaveGrid<T>, LikelihoodReport)> {
    check_conds(conds, fs.n_flows())?;
    let mut cur = x.clone();
    let mut logdets = Vec::with_capacity(fs.n_flows());
    for (k, (flow, cond)) in fs.flows.iter().zip(conds).enumerate() {
        let (z, ld) = flow_inverse(&cur, cond.as_ref(), &flow.net).map_err(|e| at_flow(e, k))?;
        logdets.push(ld);
        cur = permute_rows(&z, &flow.permutation)?;
    }
    let base = base_log_density(cur.values());
    let report = LikelihoodReport::new(logdets, base, x.h() * x.w(), 0);
    Ok((cur, report))
}

/// Grid-level synthesis pass, the exact inverse of [`stack_inverse_grid`].
pub fn stack_forward_grid<T: Scalar>(
    z0: &WaveGrid<T>,
    conds: &[Option<Tensor<T>>],
    fs: &FlowStack<T>,
    stats: &mut SynthStats,
) -> Result<WaveGrid<T>> {
    check_conds(conds, fs.n_flows())?;
    let mut cur = z0.clone();
    for (k, (flow, cond)) in fs.flows.iter().zip(conds).enumerate().rev() {
        let z = permute_rows(&cur, &flow.permutation.inverse())?;
        cur = flow_forward(&z, cond.as_ref(), &flow.net, stats).map_err(|e| at_flow(e, k))?;
    }
    Ok(cur)
}

/// Waveform → latents and likelihood. The waveform is zero-padded to a
/// multiple of `h`; padded elements are part of the reported dimensions.
pub fn stack_inverse<T: Scalar>(
    x: &Waveform<T>,
    mel: Option<&MelSpectrogram>,
    fs: &FlowStack<T>,
) -> Result<(WaveGrid<T>, LikelihoodReport)> {
    let (padded, pad_count) = pad_to_multiple(x, fs.h);
    let grid = squeeze(&padded, fs.h)?;
    let conds = fs.conditioner_grids(mel, grid.w())?;
    let (z, mut report) = stack_inverse_grid(&grid, &conds, fs)?;
    report.pad_count = pad_count;
    Ok((z, report))
}

/// Latents → waveform via the naive engine, trimmed to `n_samples` if given.
pub fn stack_forward<T: Scalar>(
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
    let grid = stack_forward_grid(z0, &conds, fs, &mut stats)?;
    let mut out = unsqueeze(&grid, sample_rate);
    if let Some(n) = n_samples {
        out.samples.truncate(n);
    }
    Ok((out, stats))
}
