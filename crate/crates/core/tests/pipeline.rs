use std::collections::BTreeSet;

use traitmix::diffusion::{
    train_stage1, Checkpoint, DenoiserConfig, DenoiserModel, DiffusionSchedule, Mode, Stage1Config, TwoModeConfig,
    TwoModeTask,
};
use traitmix::dpo::{dpo_train, DpoConfig};
use traitmix::lora_attention::ConditionSet;
use traitmix::mpo::{
    read_dataset, run_mpo, sample_candidates, write_dataset, CommandScorer, Evaluators, LinearEmbedder, PreferencePair,
    QualityRatings, QualityScorer, RuleScorer, SamplerConfig, ScoringTask,
};
use traitmix::SeededRng;

fn setup() -> (DenoiserModel, DiffusionSchedule, Vec<ConditionSet>) {
    let model = DenoiserModel::new(DenoiserConfig::default(), 1).unwrap();
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let task = TwoModeTask::new(TwoModeConfig::default()).unwrap();
    let mut rng = SeededRng::new(5);
    let conds = (0..3).map(|_| task.sample_condition(&mut rng).0).collect();
    (model, schedule, conds)
}

fn fast_sampler() -> SamplerConfig {
    SamplerConfig { steps: 10, omega: 7.5 }
}

struct Embedders {
    content: LinearEmbedder,
    image: LinearEmbedder,
    text: LinearEmbedder,
}

fn embedders() -> Embedders {
    Embedders {
        content: LinearEmbedder::new("c", 8, 8, 1),
        image: LinearEmbedder::new("i", 8, 8, 2),
        text: LinearEmbedder::new("t", 8, 8, 3),
    }
}

fn evaluators<'a>(e: &'a Embedders, scorer: &'a dyn QualityScorer) -> Evaluators<'a> {
    Evaluators { content: &e.content, image: &e.image, text: &e.text, scorer, task: ScoringTask::Dressing, retries: 0 }
}

#[test]
fn candidate_pool_two_bundles_three_candidates() {
    let (model, schedule, conds) = setup();
    let pool = sample_candidates(&model, &conds, 2, 3, &schedule, &fast_sampler(), 42).unwrap();
    assert_eq!(pool.bundles.len(), 2);
    let all: Vec<_> = pool.bundles.iter().flat_map(|b| &b.candidates).collect();
    assert_eq!(all.len(), 6);
    assert!(all.iter().all(|c| c.latent.is_finite() && c.latent.shape() == (16, 8)));
    let seeds: BTreeSet<u64> = all.iter().map(|c| c.seed).collect();
    assert_eq!(seeds.len(), 6);

    let again = sample_candidates(&model, &conds, 2, 3, &schedule, &fast_sampler(), 42).unwrap();
    assert_eq!(pool.bundles, again.bundles);
    assert!(sample_candidates(&model, &conds, 4, 3, &schedule, &fast_sampler(), 42).is_err());
    assert!(sample_candidates(&model, &conds, 2, 0, &schedule, &fast_sampler(), 42).is_err());
}

#[test]
fn mpo_counts_and_dataset_roundtrip() {
    let (model, schedule, conds) = setup();
    let e = embedders();
    let scorer = RuleScorer::default();
    let ev = evaluators(&e, &scorer);
    let out = run_mpo(&model, &schedule, &conds, 2, 3, &fast_sampler(), &ev, 9).unwrap();
    assert_eq!(out.pairs.len(), 2);
    assert_eq!(out.rows.len(), 6);
    assert_eq!(out.manifest.reference_hash, model.param_hash());
    for p in &out.pairs {
        assert_ne!(p.winner_index, p.loser_index);
        assert!(p.winner_total >= p.loser_total);
    }

    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &out.pairs, &out.manifest).unwrap();
    let (pairs, manifest) = read_dataset(dir.path()).unwrap();
    assert_eq!(pairs, out.pairs);
    assert_eq!(manifest, out.manifest);

    let single = run_mpo(&model, &schedule, &conds, 2, 1, &fast_sampler(), &ev, 9).unwrap();
    assert!(single.pairs.is_empty());
    assert_eq!(single.manifest.skips.len(), 2);
}

#[test]
fn external_command_scorer_drives_the_pipeline() {
    let (model, schedule, conds) = setup();
    let e = embedders();
    let payload = QualityRatings { task: ScoringTask::Dressing, values: [7, 8, 9] }.payload();
    let script = format!("cat >/dev/null; printf '%s' 'Looks fine overall. <OUTPUT>{payload}</OUTPUT>'");
    let scorer = CommandScorer { name: "sh-judge".into(), program: "sh".into(), args: vec!["-c".into(), script] };
    let ev = evaluators(&e, &scorer);
    let out = run_mpo(&model, &schedule, &conds, 2, 3, &fast_sampler(), &ev, 9).unwrap();
    assert_eq!(out.pairs.len(), 2);
    assert!(out.rows.iter().all(|r| r.s_p == Some(24.0)));
    assert!(out.manifest.evaluators.iter().any(|s| s.contains("sh-judge")));

    let failing =
        CommandScorer { name: "broken".into(), program: "sh".into(), args: vec!["-c".into(), "exit 3".into()] };
    let ev = evaluators(&e, &failing);
    let out = run_mpo(&model, &schedule, &conds, 2, 3, &fast_sampler(), &ev, 9).unwrap();
    assert!(out.pairs.is_empty());
    assert_eq!(out.manifest.skips.len(), 2);
    assert!(out.rows.iter().all(|r| !r.valid && !r.reason.is_empty()));
}

#[test]
fn checkpoint_file_roundtrip_preserves_predictions() {
    let (model, schedule, conds) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::new("stage1", 0, &schedule, model.clone()).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.stage, "stage1");
    assert_eq!(back.model.param_hash(), model.param_hash());
    let z = SeededRng::new(3).normal_matrix(16, 8, 1.0);
    assert_eq!(back.model.predict(&z, Some(&conds[0]), 321).unwrap(), model.predict(&z, Some(&conds[0]), 321).unwrap());
    assert!(Checkpoint::load(&dir.path().join("missing.json")).is_err());
}

#[test]
fn short_two_stage_run_keeps_frozen_weights() {
    let (mut model, schedule, conds) = setup();
    let task = TwoModeTask::new(TwoModeConfig::default()).unwrap();
    let frozen = model.frozen_hash();
    let cfg = Stage1Config { steps: 200, lr: 0.03, eval_every: 50, eval_examples: 16, ..Stage1Config::default() };
    let report = train_stage1(&mut model, &schedule, &task, &cfg, &mut SeededRng::new(2)).unwrap();
    assert_eq!(report.records.len(), 200);
    assert!(report.final_eval_loss < report.initial_eval_loss);
    assert_eq!(model.frozen_hash(), frozen);

    let e = embedders();
    let scorer = RuleScorer::default();
    let out = run_mpo(&model, &schedule, &conds, 3, 3, &fast_sampler(), &evaluators(&e, &scorer), 1).unwrap();
    let mut theta = model.clone();
    let dpo = DpoConfig { steps: 20, ..DpoConfig::default() };
    let report = dpo_train(&mut theta, &model, &out.pairs, &schedule, &dpo, &mut SeededRng::new(3)).unwrap();
    assert_eq!(report.records.len(), 20);
    assert!((report.records[0].loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(theta.frozen_hash(), frozen);
    assert_eq!(report.reference_hash, model.param_hash());
}

#[test]
fn single_memorizable_pair_loss_trends_down() {
    let (mut model, schedule, _) = setup();
    let task = TwoModeTask::new(TwoModeConfig::default()).unwrap();
    let cfg = Stage1Config { steps: 2000, lr: 0.03, ..Stage1Config::default() };
    train_stage1(&mut model, &schedule, &task, &cfg, &mut SeededRng::new(2)).unwrap();

    let mut rng = SeededRng::new(100);
    let (cond, garment) = task.sample_condition(&mut rng);
    let pair = PreferencePair {
        bundle: 0,
        cond,
        winner: task.latent(Mode::A, &garment, &mut rng),
        loser: task.latent(Mode::B, &garment, &mut rng),
        winner_index: 0,
        loser_index: 1,
        winner_seed: 0,
        loser_seed: 1,
        winner_total: 1.0,
        loser_total: 0.0,
        margin: 1.0,
        evaluators: vec![],
    };
    let mut theta = model.clone();
    let dpo = DpoConfig { beta: 0.5, lr: 1e-3, steps: 200, ..DpoConfig::default() };
    let report = dpo_train(&mut theta, &model, &[pair], &schedule, &dpo, &mut SeededRng::new(0)).unwrap();
    let losses: Vec<f64> = report.records.iter().map(|r| r.loss).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(report.loss_slope() < 0.0, "slope {}", report.loss_slope());
    assert!(mean(&losses[100..]) < mean(&losses[..100]));
}
