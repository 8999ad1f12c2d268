use std::f64::consts::PI;

use bam_core::orchestrator::{run_bam, run_sequential, Trainer};
use bam_core::seed::rng;
use bam_core::slice::load_manifest;
use bam_core::toylab::{
    lr_schedule, prepare_experiment, variance_reduction_trial, Architecture, DomainPairConfig, ExperimentConfig,
    NoisyTaskVectorEnsemble, OptimizerConfig, Sample, ToyModel, ToyTrainer, SOURCE_EVAL, TARGET_EVAL,
};
use rand::Rng;

/// Reference warmup + cosine schedule written out by hand.
fn reference_lr(step: usize, max_lr: f64, total: usize) -> f64 {
    let warmup = ((total as f64 / 100.0).ceil() as usize).max(100);
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    let min_lr = max_lr / 10.0;
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    min_lr + (max_lr - min_lr) * (1.0 + (PI * t).cos()) / 2.0
}

#[test]
fn schedule_matches_reference_on_long_run() {
    let cfg = OptimizerConfig { max_lr: 1e-5, total_steps: 20_000, ..Default::default() };
    assert_eq!(cfg.warmup_steps(), 200);
    assert_eq!(lr_schedule(0, &cfg).unwrap(), 0.0);
    assert!((lr_schedule(200, &cfg).unwrap() - 1e-5).abs() < 1e-12);
    assert!((lr_schedule(20_000, &cfg).unwrap() - 1e-6).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for step in (0..=20_000).step_by(10) {
        let lr = lr_schedule(step, &cfg).unwrap();
        assert!((lr - reference_lr(step, 1e-5, 20_000)).abs() < 1e-15, "step {step}");
        if step >= 200 {
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
    assert!(lr_schedule(20_001, &cfg).is_err());
}

fn random_samples(d: usize, c: usize, n: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n).map(|_| Sample { x: (0..d).map(|_| r.random_range(-2.0..2.0)).collect(), y: r.random_range(0..c) }).collect()
}

#[test]
fn analytic_gradients_agree_with_central_differences() {
    for inst in 0..20u64 {
        let mut r = rng(500 + inst);
        let arch = if inst % 2 == 0 { Architecture::Mlp } else { Architecture::Logistic };
        let (d, h, c) = (r.random_range(2..6), r.random_range(2..6), r.random_range(2..5));
        let m = ToyModel::init(arch, d, h, c, inst);
        let samples = random_samples(d, c, 5, 900 + inst);
        let batch: Vec<&Sample> = samples.iter().collect();
        let (_, grad) = m.loss_and_grad(&batch).unwrap();
        let eps = 1e-6;
        for (i, &g) in grad.iter().enumerate() {
            let mut plus = m.clone();
            plus.params[i] += eps;
            let mut minus = m.clone();
            minus.params[i] -= eps;
            let numeric =
                (plus.loss_and_grad(&batch).unwrap().0 - minus.loss_and_grad(&batch).unwrap().0) / (2.0 * eps);
            let tol = 1e-4 * g.abs().max(numeric.abs()).max(1e-3);
            assert!((g - numeric).abs() <= tol, "instance {inst} param {i}: {g} vs {numeric}");
        }
    }
}

#[test]
fn zero_model_is_uniform() {
    let m = ToyModel::zeros(Architecture::Mlp, 3, 4, 4);
    let metrics = m.evaluate(&random_samples(3, 4, 50, 1)).unwrap();
    assert!((metrics.nll - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn averaging_shrinks_noise_by_root_k() {
    let ens = NoisyTaskVectorEnsemble::new(1000, 1.0, 4, 200, 17);
    for k in [1, 2, 4] {
        let report = variance_reduction_trial(&ens, k).unwrap();
        let want = 1.0 / (k as f64).sqrt();
        assert!((report.ratio - want).abs() <= 0.1 * want, "k={k}: {}", report.ratio);
        // ‖ε‖ for ε ~ N(0, 1000 I) concentrates at about √1000.
        assert!((report.mean_single_error / 1000f64.sqrt() - 1.0).abs() < 0.02);
    }
    assert_eq!(ens, NoisyTaskVectorEnsemble::new(1000, 1.0, 4, 200, 17));
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        domains: DomainPairConfig { train_size: 1200, eval_size: 400, ..Default::default() },
        hidden_dim: 16,
        n: 4,
        pretrain: OptimizerConfig { max_lr: 1e-2, total_steps: 300, ..Default::default() },
        optimizer: OptimizerConfig { max_lr: 1e-2, total_steps: 120, ..Default::default() },
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn toy_experiment_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let exp = prepare_experiment(&small_config(), dir.path()).unwrap();
    let trainer = ToyTrainer::new();
    let before = trainer.evaluate(&exp.base, &exp.plan.eval_sets[TARGET_EVAL]).unwrap();

    let bam = run_bam(&exp.plan_with(2, dir.path().join("bam")), &trainer).unwrap();
    let seq = run_sequential(&exp.plan_with(2, dir.path().join("seq")), &trainer).unwrap();
    assert!(bam.complete && seq.complete);
    assert_eq!(bam.ledger.merges().count(), 2);
    assert_eq!(seq.ledger.merges().count(), 4);

    let mb = exp.measure(&bam.checkpoint).unwrap();
    let ms = exp.measure(&seq.checkpoint).unwrap();
    assert!(mb.target.nll < before.nll, "{} vs {}", mb.target.nll, before.nll);
    assert!(mb.weight_change < ms.weight_change, "{} vs {}", mb.weight_change, ms.weight_change);
    let via_trainer = trainer.evaluate(&bam.checkpoint, &exp.plan.eval_sets[SOURCE_EVAL]).unwrap();
    assert_eq!(via_trainer, mb.source);

    let again_dir = tempfile::tempdir().unwrap();
    let again = prepare_experiment(&small_config(), again_dir.path()).unwrap();
    assert_eq!(again.base.content_hash(), exp.base.content_hash());
    assert_eq!(again.slice_plan, exp.slice_plan);
    for (a, b) in again.plan.slices.iter().zip(&exp.plan.slices) {
        assert_eq!(load_manifest(a).unwrap().len(), load_manifest(b).unwrap().len());
    }
}
