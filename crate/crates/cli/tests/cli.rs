use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use waveflow_core::flow::HALF_LOG_2PI;
use waveflow_core::io::checkpoint::{save_checkpoint, TrainingMeta};
use waveflow_core::io::config::ModelConfig;
use waveflow_core::model::WaveFlowModel;
use waveflow_core::signal::{read_wav, write_wav, Waveform};

fn waveflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_waveflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tone(n: usize, freq: f64) -> Waveform<f32> {
    let samples = (0..n)
        .map(|i| ((i as f64 * 2.0 * std::f64::consts::PI * freq / 16000.0).sin() * 0.4) as f32)
        .collect();
    Waveform::new(samples, 16000)
}

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::unconditioned(4, 2, 2, 4);
    c.sample_rate = 16000;
    c
}

fn write_config(dir: &Path, c: &ModelConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, c.to_json().unwrap()).unwrap();
    p
}

fn identity_checkpoint(dir: &Path, c: &ModelConfig) -> PathBuf {
    let base = dir.join("identity");
    let model = WaveFlowModel::<f32>::init(c, 0).unwrap();
    save_checkpoint(&model, &base, TrainingMeta::default()).unwrap();
    base
}

#[test]
fn verify_fast_passes_and_reports_json() {
    let o = waveflow(&["verify", "--level", "fast"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS"));
    let o = waveflow(&["verify", "--json", "--seed", "3"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().len() >= 10);
}

#[test]
fn unknown_flags_are_validation_errors() {
    assert_eq!(waveflow(&["verify", "--bogus"]).status.code(), Some(1));
    assert_eq!(waveflow(&["synth"]).status.code(), Some(1));
    assert_eq!(waveflow(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_shows_defaults() {
    let train = stdout(&waveflow(&["train", "--help"]));
    assert!(train.contains("[default: 0.0002]"));
    assert!(train.contains("[default: 8]"));
    assert!(train.contains("[default: 16000]"));
    let synth = stdout(&waveflow(&["synth", "--help"]));
    assert!(synth.contains("[default: 1]"));
}

#[test]
fn train_smoke_run_writes_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let mut lines = String::new();
    for (i, f) in [300.0, 450.0].iter().enumerate() {
        let p = dir.path().join(format!("u{i}.wav"));
        write_wav(&p, &tone(800, *f)).unwrap();
        lines.push_str(&format!("{{\"wav\": \"u{i}.wav\", \"duration\": 0.05}}\n"));
    }
    let manifest = dir.path().join("data.ndjson");
    std::fs::write(&manifest, lines).unwrap();
    let out = dir.path().join("run");
    let o = waveflow(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data-manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--steps",
        "10",
        "--batch",
        "2",
        "--clip",
        "256",
        "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["steps"], 10);
    assert_eq!(v["checkpoints"].as_array().unwrap().len(), 1);
    let manifests: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".manifest.json"))
        .collect();
    assert_eq!(manifests.len(), 1);
    let metrics = std::fs::read_to_string(out.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 10);
}

#[test]
fn loglik_of_identity_model_is_closed_form_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), &tiny_config());
    let wav = dir.path().join("a.wav");
    write_wav(&wav, &tone(400, 500.0)).unwrap();
    let x = read_wav(&wav).unwrap();
    let expected = -HALF_LOG_2PI - x.samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / (2.0 * x.len() as f64);
    let args = ["loglik", "--checkpoint", ckpt.to_str().unwrap(), "--wav", wav.to_str().unwrap(), "--json"];
    let a = waveflow(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&a).trim()).unwrap();
    let per_dim = v["per_dim_loglik"].as_f64().unwrap();
    assert!((per_dim - expected).abs() < 1e-6, "{per_dim} vs {expected}");
    assert_eq!(stdout(&a), stdout(&waveflow(&args)));
}

#[test]
fn synth_with_zero_std_is_deterministic_and_engines_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let fs = waveflow_core::verify::random_stack(&cfg, 0.2, 4).unwrap().cast::<f32>();
    let model = WaveFlowModel::from_stack(&cfg, &fs).unwrap();
    let base = dir.path().join("random");
    save_checkpoint(&model, &base, TrainingMeta::default()).unwrap();
    let run = |out: &str, std: &str, engine: &str| {
        let out = dir.path().join(out);
        let o = waveflow(&[
            "synth",
            "--checkpoint",
            base.to_str().unwrap(),
            "--samples",
            "256",
            "--std",
            std,
            "--engine",
            engine,
            "--out",
            out.to_str().unwrap(),
            "--json",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (read_wav(&out).unwrap(), serde_json::from_str::<serde_json::Value>(stdout(&o).trim()).unwrap())
    };
    let (a, _) = run("a.wav", "0", "queued");
    let (b, _) = run("b.wav", "0", "naive");
    assert_eq!(a, b);
    assert_eq!(a.len(), 256);
    let (_, v) = run("c.wav", "1.0", "both");
    assert!(v["max_abs_diff"].as_f64().unwrap() <= 1e-5);
    assert_eq!(v["sequential_steps"], 2 * 4);
}

#[test]
fn conditioned_synth_uses_a_cached_mel() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.mel = Some(waveflow_core::conditioner::MelConfig {
        n_mels: 4,
        ..Default::default()
    });
    let cfg_path = write_config(dir.path(), &cfg);
    let ckpt = identity_checkpoint(dir.path(), &cfg);
    let wav = dir.path().join("voice.wav");
    write_wav(&wav, &tone(2048, 220.0)).unwrap();
    let mel = dir.path().join("voice.mel");
    let o = waveflow(&[
        "mel",
        "--wav",
        wav.to_str().unwrap(),
        "--out",
        mel.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["n_mels"], 4);
    let frames = v["n_frames"].as_u64().unwrap() as usize;
    assert!(frames >= 8);
    let out = dir.path().join("out.wav");
    let o = waveflow(&[
        "synth",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--mel",
        mel.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_wav(&out).unwrap().len(), frames * 256);
    let o = waveflow(&[
        "synth",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--mel",
        mel.to_str().unwrap(),
        "--samples",
        "50000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = waveflow(&["synth", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn numerical_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut model = WaveFlowModel::<f32>::init(&cfg, 0).unwrap();
    let id = model.params.id("flow0.end.b").unwrap();
    model.params.get_mut(id).data_mut()[1] = f32::NAN;
    let base = dir.path().join("broken");
    save_checkpoint(&model, &base, TrainingMeta::default()).unwrap();
    let wav = dir.path().join("a.wav");
    write_wav(&wav, &tone(64, 300.0)).unwrap();
    let o = waveflow(&["loglik", "--checkpoint", base.to_str().unwrap(), "--wav", wav.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = waveflow(&["loglik", "--checkpoint", "/nonexistent/ckpt", "--wav", wav.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_reports_sequential_steps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::unconditioned(16, 8, 2, 4);
    cfg.sample_rate = 16000;
    let cfg_path = write_config(dir.path(), &cfg);
    let o = waveflow(&["bench", "--config", cfg_path.to_str().unwrap(), "--width", "4", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["sequential_steps"], 128);
    assert!(v["max_abs_diff"].as_f64().unwrap() <= 1e-5);
}
