//! Invariant checks shared by the `verify` command and the test suites.
//!
//! Each check returns the measured quantity; [`run_suite`] compares it with
//! a fixed tolerance.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::conditioner::{build_conditioner_grid, MelSpectrogram, Upsampler};
use crate::error::{Error, Result};
use crate::flow::reference::{af_reference_forward, af_reference_inverse, bipartite_reference, Wavenet1d};
use crate::flow::{flow_forward, flow_inverse, stack_forward_grid, stack_inverse_grid, FlowLayer, FlowStack, SynthStats};
use crate::io::config::{ModelConfig, PermutationStrategy};
use crate::model::WaveFlowModel;
use crate::network::{net_forward, receptive_field, ConvNet, NetShape};
use crate::numeric::{jacobian_fd, log_abs_det, max_upper, relative_error};
use crate::signal::{permute_rows, squeeze_samples, Permutation, PermutationKind, WaveGrid};
use crate::synth::{sample_latent, stack_forward_queued_grid};
use crate::tensor::{Scalar, Tensor};

/// Small unconditioned config with explicit dilations.
pub fn tiny_config(h: usize, n_flows: usize, channels: usize, n_layers: usize) -> ModelConfig {
    let mut c = ModelConfig::unconditioned(h, n_flows, n_layers, channels);
    c.dilations_h = Some(crate::network::dilation_cycle(h, n_layers, 3).expect("valid height"));
    c.dilations_w = Some((0..n_layers).map(|l| 1 << (l % 3)).collect());
    c
}

/// A stack with random filters, output projections and biases.
pub fn random_stack(config: &ModelConfig, std: f64, seed: u64) -> Result<FlowStack<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = config.net_shape()?;
    let flows = config
        .permutations()
        .into_iter()
        .map(|permutation| {
            Ok(FlowLayer {
                net: ConvNet::random(&shape, std, true, &mut rng)?,
                permutation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let up = config.mel.as_ref().map(|_| Upsampler::init(std, &mut rng));
    FlowStack::new(config.h, flows, up)
}

fn uniform_grid(h: usize, w: usize, rng: &mut ChaCha8Rng) -> WaveGrid<f64> {
    WaveGrid::from_vec(h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `max |x − forward(inverse(x))|` in precision `T`.
pub fn round_trip_error<T: Scalar>(h: usize, n_flows: usize, w: usize, seed: u64) -> Result<f64> {
    let cfg = tiny_config(h, n_flows, 4, 3);
    let fs = random_stack(&cfg, 0.2, seed)?.cast::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x: WaveGrid<T> = uniform_grid(h, w, &mut rng).cast();
    let conds = vec![None; n_flows];
    let (z, _) = stack_inverse_grid(&x, &conds, &fs)?;
    let back = stack_forward_grid(&z, &conds, &fs, &mut SynthStats::default())?;
    Ok(back.max_abs_diff(&x).as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogdetCheck {
    /// Worst relative error over the single flows.
    pub per_flow: f64,
    /// Relative error of the whole stack.
    pub stack: f64,
}

/// Analytic `Σ log σ` against `log |det J|` of a finite-difference Jacobian.
pub fn logdet_error(h: usize, w: usize, n_flows: usize, seed: u64) -> Result<LogdetCheck> {
    let mut cfg = tiny_config(h, n_flows, 3, 2);
    cfg.permutation = PermutationStrategy::Reverse;
    let fs = random_stack(&cfg, 0.4, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10d);
    let x = uniform_grid(h, w, &mut rng);
    let conds = vec![None; n_flows];
    let eps = 1e-6;

    let mut per_flow: f64 = 0.0;
    let mut cur = x.clone();
    for flow in &fs.flows {
        let (z, ld) = flow_inverse(&cur, None, &flow.net)?;
        let jac = jacobian_fd(
            |v| {
                let g = WaveGrid::from_vec(h, w, v.to_vec());
                flow_inverse(&g, None, &flow.net).map(|r| r.0.values().to_vec()).unwrap_or_default()
            },
            cur.values(),
            eps,
        );
        per_flow = per_flow.max(relative_error(ld, log_abs_det(&jac), 1e-12));
        cur = permute_rows(&z, &flow.permutation)?;
    }

    let (_, report) = stack_inverse_grid(&x, &conds, &fs)?;
    let jac = jacobian_fd(
        |v| {
            let g = WaveGrid::from_vec(h, w, v.to_vec());
            stack_inverse_grid(&g, &conds, &fs).map(|r| r.0.values().to_vec()).unwrap_or_default()
        },
        x.values(),
        eps,
    );
    let stack = relative_error(report.logdet_sum, log_abs_det(&jac), 1e-12);
    Ok(LogdetCheck { per_flow, stack })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TriangularityCheck {
    pub max_upper: f64,
    /// `max |J_kk − σ_k|`.
    pub diagonal_error: f64,
}

/// Row-major Jacobian of one flow's inverse on an `h × w` grid.
pub fn triangularity(h: usize, w: usize, seed: u64) -> Result<TriangularityCheck> {
    let cfg = tiny_config(h, 1, 3, 3);
    let fs = random_stack(&cfg, 0.4, seed)?;
    let net = &fs.flows[0].net;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1);
    let x = uniform_grid(h, w, &mut rng);
    let jac = jacobian_fd(
        |v| {
            let g = WaveGrid::from_vec(h, w, v.to_vec());
            flow_inverse(&g, None, net).map(|r| r.0.values().to_vec()).unwrap_or_default()
        },
        x.values(),
        1e-6,
    );
    let (_, log_sigma) = net_forward(&crate::network::shift_down(&x), None, net)?;
    let diagonal_error = log_sigma
        .values()
        .iter()
        .enumerate()
        .map(|(k, ls)| (jac[(k, k)] - ls.exp()).abs())
        .fold(0.0, f64::max);
    Ok(TriangularityCheck {
        max_upper: max_upper(&jac),
        diagonal_error,
    })
}

/// Height-only network (width filter 1) on an `n × 1` grid against the
/// sequential autoregressive reference, both directions plus the logdet.
pub fn af_equivalence(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetShape {
        residual_channels: 3,
        kernel_h: 3,
        kernel_w: 1,
        dilations_h: crate::network::dilation_cycle(n, 4, 3)?,
        dilations_w: vec![1; 4],
        cond_channels: None,
    };
    let net = ConvNet::<f64>::random(&shape, 0.4, true, &mut rng)?;
    let oracle = Wavenet1d::along_height(&net)?;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grid = squeeze_samples(&x, n)?;
    let (z, logdet) = flow_inverse(&grid, None, &net)?;
    let (z_ref, logdet_ref) = af_reference_inverse(&x, |t, p| oracle.causal_step(t, p));
    let mut worst = (logdet - logdet_ref).abs();
    for (a, b) in z.values().iter().zip(&z_ref) {
        worst = worst.max((a - b).abs());
    }
    let back = flow_forward(&z, None, &net, &mut SynthStats::default())?;
    let back_ref = af_reference_forward(&z_ref, |t, p| oracle.causal_step(t, p));
    for (a, b) in back.values().iter().zip(&back_ref) {
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// `h = 2` with height filter 1 against the two-group coupling reference.
/// Biases are zero so the first row maps to itself, as in the coupling.
pub fn bipartite_equivalence(n: usize, seed: u64) -> Result<f64> {
    if n % 2 != 0 {
        return Err(Error::InvalidArgument("length must be even".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetShape {
        residual_channels: 3,
        kernel_h: 1,
        kernel_w: 3,
        dilations_h: vec![1; 3],
        dilations_w: vec![1, 2, 4],
        cond_channels: None,
    };
    let net = ConvNet::<f64>::random(&shape, 0.4, false, &mut rng)?;
    let oracle = Wavenet1d::along_width(&net)?;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grid = squeeze_samples(&x, 2)?;
    let (z, logdet) = flow_inverse(&grid, None, &net)?;
    let (xa, xb) = (grid.row(0).to_vec(), grid.row(1).to_vec());
    let (za, zb, logdet_ref) = bipartite_reference(&xa, &xb, |a| oracle.eval(a));
    let mut worst = (logdet - logdet_ref).abs();
    for (a, b) in z.row(0).iter().zip(&za).chain(z.row(1).iter().zip(&zb)) {
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Number of output rows of the raw network that react to an impulse in
/// input row 0, for the default dilations at height `h`.
pub fn probe_receptive_field(h: usize, seed: u64) -> Result<usize> {
    let d = crate::network::default_dilations(h)?;
    let r = receptive_field(3, &d)?;
    let rows = r + 8;
    let shape = NetShape {
        residual_channels: 2,
        kernel_h: 3,
        kernel_w: 1,
        dilations_h: d,
        dilations_w: vec![1; 8],
        cond_channels: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ConvNet::<f64>::random(&shape, 0.8, true, &mut rng)?;
    let zero = WaveGrid::zeros(rows, 1);
    let mut impulse = WaveGrid::zeros(rows, 1);
    impulse.set(0, 0, 1.0);
    let (m0, s0) = net_forward(&zero, None, &net)?;
    let (m1, s1) = net_forward(&impulse, None, &net)?;
    let reached = (0..rows)
        .filter(|&i| m0.get(i, 0) != m1.get(i, 0) || s0.get(i, 0) != s1.get(i, 0))
        .max()
        .map_or(0, |i| i + 1);
    Ok(reached)
}

/// Worst relative error between taped gradients and central differences
/// over every trainable scalar, on the loss of one random grid.
pub fn gradient_check(h: usize, w: usize, channels: usize, n_layers: usize, conditioned: bool, seed: u64) -> Result<f64> {
    let mut cfg = tiny_config(h, 1, channels, n_layers);
    if conditioned {
        cfg.mel = Some(crate::conditioner::MelConfig {
            n_mels: 2,
            ..Default::default()
        });
    }
    let fs = random_stack(&cfg, 0.4, seed)?;
    let mut model = WaveFlowModel::from_stack(&cfg, &fs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let x = uniform_grid(h, w, &mut rng);
    let mel = conditioned.then(|| {
        let frames = (h * w).div_ceil(crate::conditioner::UPSAMPLE_FACTOR);
        Tensor::from_fn(&[2, frames], |_| rng.sample::<f64, _>(StandardNormal))
    });
    let loss_of = |m: &WaveFlowModel<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = m.record_loss(&mut tape, &x, mel.as_ref())?;
        Ok(tape.value(l.loss).item())
    };
    let mut tape = Tape::new();
    let l = model.record_loss(&mut tape, &x, mel.as_ref())?;
    let grads = tape.backward(l.loss);
    let eps = 1e-5;
    let ids: Vec<_> = model.params.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for k in 0..model.params.get(id).numel() {
            let orig = model.params.get(id).data()[k];
            model.params.get_mut(id).data_mut()[k] = orig + eps;
            let hi = loss_of(&model)?;
            model.params.get_mut(id).data_mut()[k] = orig - eps;
            let lo = loss_of(&model)?;
            model.params.get_mut(id).data_mut()[k] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let an = grads.get(id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(relative_error(an, fd, GRAD_FLOOR));
        }
    }
    Ok(worst)
}

/// Denominator floor for gradient relative errors, so entries that are
/// zero up to rounding do not divide by nothing.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `max |naive − queued|` in f32 on random latents.
pub fn queue_equivalence(h: usize, n_flows: usize, w: usize, seed: u64) -> Result<f64> {
    let cfg = tiny_config(h, n_flows, 4, 4);
    let fs = random_stack(&cfg, 0.2, seed)?.cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e);
    let z = sample_latent::<f32, _>(h, w, 1.0, &mut rng)?;
    let conds = vec![None; n_flows];
    let a = stack_forward_grid(&z, &conds, &fs, &mut SynthStats::default())?;
    let b = stack_forward_queued_grid(&z, &conds, &fs, &mut SynthStats::default())?;
    Ok(a.max_abs_diff(&b) as f64)
}

/// Involution, footnote mapping and conditioner/latent agreement for one
/// height. Returns a description of the first failure.
pub fn permutation_check(h: usize) -> std::result::Result<(), String> {
    let rev = Permutation::reverse(h);
    let bip = Permutation::bipartite_reverse(h);
    let expected_rev: Vec<usize> = (0..h).rev().collect();
    let half = h / 2;
    let expected_bip: Vec<usize> = (0..half).rev().chain((half..h).rev()).collect();
    if rev.row_map() != expected_rev {
        return Err(format!("reverse map {:?}", rev.row_map()));
    }
    if bip.row_map() != expected_bip {
        return Err(format!("bipartite map {:?}", bip.row_map()));
    }
    for p in [&rev, &bip] {
        if p.then(p).row_map() != Permutation::identity(h).row_map() || p.inverse().row_map() != p.row_map() {
            return Err(format!("{:?} is not an involution", p.kind()));
        }
    }
    let kinds = PermutationStrategy::Auto.kinds(8);
    let want: Vec<PermutationKind> = [PermutationKind::Reverse; 4]
        .into_iter()
        .chain([PermutationKind::BipartiteReverse; 4])
        .collect();
    if kinds != want {
        return Err(format!("eight-flow strategy {kinds:?}"));
    }
    // a conditioner holding the sample index must follow the latents
    let w = 3;
    let perms: Vec<Permutation> = kinds.iter().map(|&k| Permutation::new(k, h)).collect();
    let index: Vec<f64> = (0..h * w).map(|v| v as f64).collect();
    let feats = Tensor::from_vec(&[1, h * w], index.clone());
    let grids = build_conditioner_grid(&feats, h, w, &perms).map_err(|e| e.to_string())?;
    let mut cur = squeeze_samples(&index, h).map_err(|e| e.to_string())?;
    for (k, p) in perms.iter().enumerate() {
        if grids[k].data() != cur.values() {
            return Err(format!("conditioner of flow {k} disagrees with its input rows"));
        }
        cur = permute_rows(&cur, p).map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Checkpoint save/load through a scratch directory: returns whether the
/// parameters and the likelihood survive bit-exactly.
pub fn checkpoint_round_trip(seed: u64) -> Result<bool> {
    let dir = std::env::temp_dir().join(format!("waveflow-verify-{}-{seed}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let outcome = (|| {
        let cfg = tiny_config(4, 2, 3, 2);
        let fs = random_stack(&cfg, 0.3, seed)?.cast::<f32>();
        let model = WaveFlowModel::from_stack(&cfg, &fs)?;
        let base = dir.join("ckpt");
        crate::io::checkpoint::save_checkpoint(&model, &base, Default::default())?;
        let (loaded, _) = crate::io::checkpoint::load_checkpoint::<f32>(&base)?;
        let same_params = model.params.iter().zip(loaded.params.iter()).all(|(a, b)| a.1 == b.1 && a.2 == b.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: WaveGrid<f32> = uniform_grid(4, 16, &mut rng).cast();
        let conds = vec![None; 2];
        let before = stack_inverse_grid(&x, &conds, &model.materialize()?)?.1.total_loglik;
        let after = stack_inverse_grid(&x, &conds, &loaded.materialize()?)?.1.total_loglik;
        Ok(same_params && before.to_bits() == after.to_bits())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    outcome
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::InvalidArgument(format!("unknown level {other:?} (fast or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

fn check(name: &str, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> CheckOutcome {
    let t0 = Instant::now();
    let (passed, measured, detail) = match f() {
        Ok(v) => (v <= tolerance, v, String::new()),
        Err(e) => (false, f64::NAN, e.to_string()),
    };
    CheckOutcome {
        name: name.to_string(),
        passed,
        measured,
        tolerance,
        seconds: t0.elapsed().as_secs_f64(),
        detail,
    }
}

fn worst(values: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    values.into_iter().try_fold(0.0, |acc: f64, v| Ok(acc.max(v?)))
}

/// Runs the invariant suite. `seed` offsets every random draw.
pub fn run_suite(level: Level, seed: u64) -> Vec<CheckOutcome> {
    let full = level == Level::Full;
    let seeds: Vec<u64> = (0..if full { 20 } else { 3 }).map(|s| seed + s).collect();
    let mut out = Vec::new();
    let combos = [(2, 1), (2, 4), (8, 1), (8, 4), (8, 8), (16, 1), (16, 8)];
    out.push(check("round_trip_fp64", 1e-9, || {
        worst(combos.iter().flat_map(|&(h, f)| seeds.iter().map(move |&s| round_trip_error::<f64>(h, f, 16, s))))
    }));
    out.push(check("round_trip_fp32", 1e-4, || {
        worst(combos.iter().flat_map(|&(h, f)| seeds.iter().map(move |&s| round_trip_error::<f32>(h, f, 16, s))))
    }));
    let grids: &[(usize, usize)] = if full { &[(4, 6), (6, 6)] } else { &[(4, 6)] };
    out.push(check("logdet_vs_jacobian", 1e-5, || {
        worst(grids.iter().flat_map(|&(h, w)| {
            [1, 2].map(|n| logdet_error(h, w, n, seed).map(|c| c.per_flow.max(c.stack)))
        }))
    }));
    out.push(check("jacobian_upper_triangle", 1e-6, || Ok(triangularity(8, 8, seed)?.max_upper)));
    out.push(check("jacobian_diagonal_is_sigma", 1e-6, || Ok(triangularity(8, 8, seed)?.diagonal_error)));
    out.push(check("autoregressive_special_case", 1e-6, || worst(seeds.iter().map(|&s| af_equivalence(16, s)))));
    out.push(check("bipartite_special_case", 1e-6, || {
        worst(seeds.iter().map(|&s| bipartite_equivalence(16, s)))
    }));
    out.push(check("receptive_field_table", 0.0, || {
        let table = [(8, 17), (16, 17), (32, 35), (64, 77)];
        let mut mismatches = 0.0;
        for (h, r) in table {
            let d = crate::network::default_dilations(h)?;
            if receptive_field(3, &d)? != r || probe_receptive_field(h, seed)? != r {
                mismatches += 1.0;
            }
        }
        Ok(mismatches)
    }));
    out.push(check("gradient_check", 1e-4, || gradient_check(4, 8, 4, 2, false, seed)));
    if full {
        out.push(check("gradient_check_conditioned", 1e-4, || gradient_check(4, 8, 3, 2, true, seed)));
    }
    let queue: &[(usize, usize)] = if full {
        &[(8, 1), (8, 8), (16, 1), (16, 8), (32, 1), (32, 8), (64, 1), (64, 8)]
    } else {
        &[(16, 1), (16, 8)]
    };
    out.push(check("queued_matches_naive", 1e-5, || {
        worst(queue.iter().flat_map(|&(h, f)| seeds.iter().take(3).map(move |&s| queue_equivalence(h, f, 16, s))))
    }));
    out.push(check("permutations", 0.0, || {
        for h in [8, 16] {
            if let Err(msg) = permutation_check(h) {
                return Err(Error::InvalidArgument(msg));
            }
        }
        Ok(0.0)
    }));
    out.push(check("checkpoint_round_trip", 0.0, || {
        Ok(if checkpoint_round_trip(seed)? { 0.0 } else { 1.0 })
    }));
    out.push(check("mel_cache_round_trip", 0.0, || {
        let mel = MelSpectrogram::new(2, 3, 256, vec![0.5, -1.0, 2.0, 0.0, 1e-5f32.ln(), 3.25])?;
        let dir = std::env::temp_dir().join(format!("waveflow-verify-mel-{}-{seed}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let base = dir.join("mel");
        crate::io::checkpoint::save_mel(&mel, &base)?;
        let back = crate::io::checkpoint::load_mel(&base);
        let _ = std::fs::remove_dir_all(&dir);
        Ok(if back? == mel { 0.0 } else { 1.0 })
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_are_tight() {
        assert!(round_trip_error::<f64>(8, 4, 8, 1).unwrap() < 1e-9);
        assert!(round_trip_error::<f32>(16, 8, 8, 1).unwrap() < 1e-4);
    }

    #[test]
    fn logdet_matches_jacobian() {
        let c = logdet_error(4, 6, 2, 3).unwrap();
        assert!(c.per_flow < 1e-5 && c.stack < 1e-5, "{c:?}");
    }

    #[test]
    fn jacobian_is_triangular_with_sigma_diagonal() {
        let t = triangularity(8, 8, 4).unwrap();
        assert!(t.max_upper < 1e-6 && t.diagonal_error < 1e-6, "{t:?}");
    }

    #[test]
    fn special_cases_match_their_references() {
        assert!(af_equivalence(16, 5).unwrap() < 1e-6);
        assert!(bipartite_equivalence(16, 5).unwrap() < 1e-6);
        assert!(bipartite_equivalence(15, 5).is_err());
    }

    #[test]
    fn impulse_probe_matches_formula() {
        assert_eq!(probe_receptive_field(8, 0).unwrap(), 17);
        assert_eq!(probe_receptive_field(32, 0).unwrap(), 35);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e = gradient_check(4, 8, 4, 2, false, 6).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn permutations_pass() {
        permutation_check(8).unwrap();
        permutation_check(16).unwrap();
    }

    #[test]
    fn fast_suite_passes() {
        for o in run_suite(Level::Fast, 0) {
            assert!(o.passed, "{o:?}");
        }
    }
}
