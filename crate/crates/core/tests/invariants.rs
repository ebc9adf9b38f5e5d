use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use waveflow_core::flow::{stack_forward, stack_inverse, HALF_LOG_2PI};
use waveflow_core::model::WaveFlowModel;
use waveflow_core::signal::{squeeze, unsqueeze, Waveform};
use waveflow_core::synth::{sample_latent, synthesize, Engine};
use waveflow_core::verify::{self, random_stack, tiny_config};

fn signal(len: usize, seed: u64) -> Waveform<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-0.9..0.9)).collect(), 16000)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn squeeze_round_trips(len in 1usize..40, h in 1usize..9, seed in 0u64..1000) {
        let len = len * h;
        let x = signal(len, seed);
        let g = squeeze(&x, h).unwrap();
        for j in 0..g.w() {
            for i in 0..h {
                prop_assert_eq!(g.get(i, j), x.samples[j * h + i]);
            }
        }
        prop_assert_eq!(unsqueeze(&g, 16000), x);
    }

    #[test]
    fn stacks_invert_exactly(h in prop::sample::select(vec![2usize, 4, 8]), flows in 1usize..4, w in 1usize..7, seed in 0u64..1000) {
        let fs = random_stack(&tiny_config(h, flows, 4, 3), 0.2, seed).unwrap();
        let x = signal(h * w, seed + 1);
        let (z, report) = stack_inverse(&x, None, &fs).unwrap();
        let (back, _) = stack_forward(&z, None, &fs, 16000, Some(x.len())).unwrap();
        let err = back.samples.iter().zip(&x.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-9, "round trip {}", err);
        prop_assert_eq!(report.dims, h * w);
        prop_assert_eq!(report.per_flow_logdet.len(), flows);
    }

    #[test]
    fn identity_models_score_the_base_density(h in prop::sample::select(vec![2usize, 8]), len in 1usize..50, seed in 0u64..1000) {
        let model = WaveFlowModel::<f64>::init(&tiny_config(h, 2, 4, 2), seed).unwrap();
        let x = signal(len, seed);
        let (z, report) = stack_inverse(&x, None, &model.materialize().unwrap()).unwrap();
        let dims = len.div_ceil(h) * h;
        let expected = -HALF_LOG_2PI * dims as f64 - x.samples.iter().map(|v| v * v).sum::<f64>() / 2.0;
        prop_assert!((report.total_loglik - expected).abs() < 1e-9);
        prop_assert_eq!(report.logdet_sum, 0.0);
        prop_assert_eq!(report.dims, dims);
        prop_assert_eq!(z.w(), dims / h);
    }

    #[test]
    fn engines_agree(flows in 1usize..3, w in 1usize..12, seed in 0u64..1000) {
        let fs = random_stack(&tiny_config(8, flows, 4, 3), 0.2, seed).unwrap().cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = sample_latent::<f32, _>(8, w, 1.0, &mut rng).unwrap();
        let (a, sa) = synthesize(Engine::Naive, &z, None, &fs, 16000, None).unwrap();
        let (b, sb) = synthesize(Engine::Queued, &z, None, &fs, 16000, None).unwrap();
        let diff = a.samples.iter().zip(&b.samples).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        prop_assert!(diff <= 1e-5, "engines differ by {}", diff);
        prop_assert_eq!(sa.sequential_steps, 8 * flows);
        prop_assert_eq!(sb.sequential_steps, 8 * flows);
    }

    #[test]
    fn zero_temperature_sampling_is_deterministic(seed in 0u64..1000) {
        let fs = random_stack(&tiny_config(4, 2, 4, 2), 0.2, seed).unwrap();
        let z = |s: u64| sample_latent::<f64, _>(4, 6, 0.0, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        let (a, _) = synthesize(Engine::Queued, &z(seed), None, &fs, 16000, None).unwrap();
        let (b, _) = synthesize(Engine::Queued, &z(seed + 1), None, &fs, 16000, None).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn special_cases_match_their_reference_transforms() {
    for seed in 0..4 {
        assert!(verify::af_equivalence(12, seed).unwrap() <= 1e-9);
        assert!(verify::bipartite_equivalence(12, seed).unwrap() <= 1e-9);
    }
}

#[test]
fn gradients_match_finite_differences() {
    assert!(verify::gradient_check(4, 3, 4, 2, false, 11).unwrap() <= 1e-4);
    assert!(verify::gradient_check(4, 2, 4, 2, true, 12).unwrap() <= 1e-4);
}
