//! End-to-end pipeline integration at small scale: generate, split, train,
//! refine, evaluate, and the harness-level fairness contracts.

use fcdistill::converter::ConverterParams;
use fcdistill::dagger::DaggerConfig;
use fcdistill::dataset::{
    class_histogram, class_weights, collect_with, split, truncate, EpisodePlan, PlantParams,
    SplitTag, SubsetEpisodes,
};
use fcdistill::experiments::{
    run_ablation, run_scenario_suite, run_sweep, AblationId, AblationRunConfig, RunContext,
    SuiteConfig, SurrogateKind, SweepAxis, SweepSpec,
};
use fcdistill::mpc::{ExpertPolicy, MpcConfig};
use fcdistill::policy::{train, MlpModel, Normalizer, TrainConfig};
use fcdistill::scenario::{ScenarioConfig, ScenarioKind, StepEvent, StepTarget};

fn mpc() -> MpcConfig {
    MpcConfig::for_output_ref(180.0)
}

/// Short but eventful episodes, started off the operating point so every
/// mode class shows up.
fn small_plans(n: usize) -> Vec<EpisodePlan> {
    use fcdistill::converter::PlantState;
    (0..n)
        .map(|i| {
            let scenario = ScenarioConfig {
                duration: 0.01,
                v_in0: 105.0 + 5.0 * i as f64,
                events: vec![StepEvent {
                    time: 0.004,
                    target: StepTarget::LoadR,
                    value: 18.0 + i as f64,
                }],
                initial_state: Some(PlantState::new(1.0, 90.0, 170.0)),
                ..ScenarioConfig::canonical_s1()
            };
            EpisodePlan {
                kind: [ScenarioKind::S1, ScenarioKind::S2, ScenarioKind::S3][i % 3],
                scenario,
                plant: PlantParams::Boost(ConverterParams::nominal()),
            }
        })
        .collect()
}

#[test]
fn generate_train_refine_evaluate_round_trip() {
    let cfg_mpc = mpc();
    let mut ds = collect_with(&small_plans(6), 3, false, |plan, _| {
        ExpertPolicy::new(plan.plant, cfg_mpc)
    })
    .unwrap();
    split(&mut ds, [0.7, 0.15, 0.15], 3).unwrap();
    assert!(ds.len() >= 2000);

    let train_set = ds.split_samples(SplitTag::Train);
    let val_set = ds.split_samples(SplitTag::Val);
    let weights = class_weights(&class_histogram(&train_set)).unwrap();
    let mut model = MlpModel::init(6, 32, 5);
    model.normalizer = Normalizer::from_stats(&ds.meta.feature_mean, &ds.meta.feature_std);
    let tc = TrainConfig {
        epochs: 8,
        batch_size: 256,
        learning_rate: 1e-3,
        class_weights: weights,
        seed: 5,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &train_set, &val_set, &tc).unwrap();
    assert_eq!(history.len(), 8);
    assert!(history.last().unwrap().train_acc > history[0].train_acc);

    let dag = DaggerConfig {
        iterations: 1,
        episodes_per_iter: 1,
        budget: 500,
        fine_tune_epochs: 2,
        seed: 5,
    };
    let (refined, stats) =
        fcdistill::dagger::run_dagger(&model, &ds, &cfg_mpc, &dag, &tc).unwrap();
    assert_eq!(stats.len(), 1);
    assert!(stats[0].visited > 0);

    // dataset and model survive the file formats end to end
    let dir = tempfile::tempdir().unwrap();
    let ds_path = dir.path().join("pipeline.fcds");
    ds.write_file(&ds_path).unwrap();
    let ds2 = fcdistill::dataset::Dataset::read_file(&ds_path).unwrap();
    assert_eq!(ds, ds2);
    let model_path = dir.path().join("pipeline.fcnn");
    refined.save_file(&model_path).unwrap();
    let back = MlpModel::load_file(&model_path).unwrap();
    assert_eq!(refined, back);
}

#[test]
fn truncation_keeps_episode_bookkeeping_consistent() {
    let cfg_mpc = mpc();
    let mut ds = collect_with(&small_plans(3), 9, false, |plan, _| {
        ExpertPolicy::new(plan.plant, cfg_mpc)
    })
    .unwrap();
    let per_episode = ds.meta.episodes[0].sample_len;
    truncate(&mut ds, per_episode + 123);
    assert_eq!(ds.len(), per_episode + 123);
    assert_eq!(ds.meta.episodes.len(), 2);
    assert_eq!(ds.meta.episodes[1].sample_len, 123);
    assert_eq!(
        ds.meta.class_hist.iter().sum::<u64>(),
        (per_episode + 123) as u64
    );
    assert_eq!(ds.meta.subset_counts.total(), ds.len());
}

#[test]
fn scenario_suite_pairs_controllers_per_family() {
    let model = MlpModel::standard(3);
    let rows = run_scenario_suite(&model, &mpc(), &SuiteConfig { rollouts: 1, seed: 12 }).unwrap();
    let count = |kind: ScenarioKind, ctrl: &str| {
        rows.iter().filter(|r| r.scenario == kind && r.controller == ctrl).count()
    };
    assert_eq!(count(ScenarioKind::S1, "mpc"), 1);
    assert_eq!(count(ScenarioKind::S1, "ann"), 1);
    assert_eq!(count(ScenarioKind::S2, "mpc"), 1);
    assert_eq!(count(ScenarioKind::S2, "ann"), 1);
    assert_eq!(count(ScenarioKind::S3, "mpc"), 0, "perturbed family grades the student only");
    assert_eq!(count(ScenarioKind::S3, "ann"), 1);

    // identical scenario, identical controller: the expert rows for S1 are
    // reproducible
    let rows2 = run_scenario_suite(&model, &mpc(), &SuiteConfig { rollouts: 1, seed: 12 }).unwrap();
    let pick = |rows: &[fcdistill::experiments::SuiteRow]| {
        rows.iter()
            .find(|r| r.scenario == ScenarioKind::S1 && r.controller == "mpc")
            .unwrap()
            .metrics
            .clone()
    };
    assert_eq!(pick(&rows), pick(&rows2));
}

#[test]
fn ablation_arms_consume_byte_identical_evaluation_configs() {
    let cfg = AblationRunConfig {
        episodes: SubsetEpisodes { nom: 1, op: 1, par: 1 },
        train: TrainConfig { epochs: 2, batch_size: 2048, seed: 4, ..TrainConfig::default() },
        dagger: DaggerConfig {
            iterations: 1,
            episodes_per_iter: 1,
            budget: 200,
            fine_tune_epochs: 1,
            seed: 4,
        },
        eval_rollouts: 1,
        surrogate: SurrogateKind::Random,
        seed: 4,
    };
    let dir = tempfile::tempdir().unwrap();
    let ctx = RunContext::new(dir.path().join("run"), 4).unwrap();
    let rows =
        run_ablation(&[AblationId::Full, AblationId::NoExpert], &cfg, &mpc(), Some(&ctx)).unwrap();
    assert_eq!(rows.len(), 2 * 3); // two arms, one rollout per family

    // fairness: the evaluation configs written for each arm are byte-equal
    for kind in ["S1", "S2", "S3"] {
        let a = std::fs::read(ctx.path("configs", &format!("ablation_FULL_eval_{kind}_0.toml")))
            .unwrap();
        let b = std::fs::read(
            ctx.path("configs", &format!("ablation_NO_EXPERT_eval_{kind}_0.toml")),
        )
        .unwrap();
        assert_eq!(a, b, "evaluation configs differ between arms for {kind}");
    }
    assert!(ctx.path("tables", "ablation.csv").exists());
    assert!(ctx.path("models", "ablation_FULL.fcnn").exists());
}

#[test]
fn sweep_is_deterministic_and_budget_zero_reuses_the_base() {
    let spec = SweepSpec {
        axis: SweepAxis::DaggerBudget,
        grid: vec![0.0, 300.0],
        seeds: vec![5],
        episodes: SubsetEpisodes { nom: 1, op: 1, par: 1 },
        base_train: TrainConfig { epochs: 2, batch_size: 2048, seed: 5, ..TrainConfig::default() },
        retrain_epochs: 1,
        dagger_episodes: 1,
        eval_rollouts: 1,
        eval_seed: 7,
    };
    let a = run_sweep(&spec, &mpc(), None).unwrap();
    let b = run_sweep(&spec, &mpc(), None).unwrap();
    assert_eq!(a.len(), 2 * 2); // two grid points x (S2, S3)
    for (ra, rb) in a.iter().zip(b.iter()) {
        assert_eq!(ra.value, rb.value);
        assert_eq!(ra.metrics, rb.metrics);
    }

    // the zero-budget point grades the unmodified base model: rerunning
    // with a different grid does not change it
    let solo = SweepSpec { grid: vec![0.0], ..spec };
    let c = run_sweep(&solo, &mpc(), None).unwrap();
    let zeros_a: Vec<_> = a.iter().filter(|r| r.value == 0.0).collect();
    for (ra, rc) in zeros_a.iter().zip(c.iter()) {
        assert_eq!(ra.metrics, rc.metrics);
    }
}

#[test]
fn transfer_protocol_produces_the_three_way_comparison() {
    use fcdistill::buck::{run_transfer_experiment, TransferConfig};
    let cfg = TransferConfig {
        source_samples: 2500,
        source_epochs: 4,
        target_samples: 2000,
        target_epochs: 4,
        episode_duration: 0.005,
        ..TransferConfig::default()
    };
    let report = run_transfer_experiment(&cfg, &[1]).unwrap();
    assert_eq!(report.runs.len(), 1);
    let run = &report.runs[0];
    assert!((0.0..=1.0).contains(&run.scratch_acc));
    assert!((0.0..=1.0).contains(&run.transfer_acc));
    assert_eq!(run.closed_loop.len(), 6);
    for row in &run.closed_loop {
        assert!(row.metrics.mse_vo.is_finite());
    }
    let controllers: Vec<&str> =
        run.closed_loop.iter().map(|r| r.controller.as_str()).collect();
    assert_eq!(controllers.iter().filter(|c| **c == "mpc").count(), 2);
    assert_eq!(controllers.iter().filter(|c| **c == "scratch").count(), 2);
    assert_eq!(controllers.iter().filter(|c| **c == "transfer").count(), 2);
}
