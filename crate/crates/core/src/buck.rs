//! Three-level buck converter target topology and the cross-topology
//! transfer experiment.
//!
//! The buck carries the same state structure as the boost — inductor
//! current, an internal capacitor voltage, and the output voltage — and the
//! same four-way action alphabet, which is what makes policy transfer
//! plausible. The inductor sees one of four terminal levels
//!
//! ```text
//! mode      level          dv_C_int/dt
//! PO        V_in            0
//! OP        V_in − v_C     +i_L / C_f
//! ON        v_C            −i_L / C_f
//! NO        0 (freewheel)   0
//! ```
//!
//! with `di_L/dt = (level − v_o)/L` and `dv_o/dt = (i_L − i_o)/C` in every
//! mode. Balancing the internal capacitor at `V_in/2` makes the two mid
//! levels coincide, mirroring the flying-capacitor balancing objective of
//! the source topology.
//!
//! The transfer experiment trains a source policy on the boost, re-uses its
//! hidden layer to initialize a buck policy (output layer re-drawn, feature
//! normalizer recomputed on the buck data), and compares it against an
//! identically trained from-scratch baseline and the buck's own
//! receding-horizon expert.

use serde::{Deserialize, Serialize};

use crate::converter::{Exogenous, PlantState, SwitchMode, SwitchedPlant};
use crate::dataset::{
    collect_with, split, truncate, Dataset, EpisodePlan, PlantParams, Sample, SplitTag,
};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::mpc::{ExpertPolicy, MpcConfig};
use crate::policy::{accuracy, train, MlpModel, NeuralPolicy, Normalizer, TrainConfig};
use crate::scenario::{
    run_episode, sample_scenario_with, DrRanges, ScenarioConfig, ScenarioKind, StepEvent,
    StepTarget, SwitchingPolicy, Trajectory,
};
use crate::seeding;
use crate::{Error, Result};

/// Buck passives and limits. Component values default to the boost bench
/// values; operating points come from the buck scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuckParams {
    pub l: f64,
    pub c_f: f64,
    pub c: f64,
    pub ts: f64,
    pub i_safe_lo: f64,
    pub i_safe_hi: f64,
}

impl BuckParams {
    pub fn nominal() -> Self {
        BuckParams {
            l: 1.0e-3,
            c_f: 50.0e-6,
            c: 125.0e-6,
            ts: 20.0e-6,
            i_safe_lo: -60.0,
            i_safe_hi: 60.0,
        }
    }
}

impl Default for BuckParams {
    fn default() -> Self {
        BuckParams::nominal()
    }
}

/// Coefficients of one buck mode: the inductor terminal level expressed in
/// `(V_in, v_C_int)` components, and the internal-capacitor charge sign.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuckModeCoefficients {
    pub level_vin: f64,
    pub level_vc: f64,
    pub beta: f64,
}

/// Coefficient row for one mode of the buck.
pub fn buck_mode_coefficients(m: SwitchMode) -> BuckModeCoefficients {
    match m {
        SwitchMode::Po => BuckModeCoefficients { level_vin: 1.0, level_vc: 0.0, beta: 0.0 },
        SwitchMode::Op => BuckModeCoefficients { level_vin: 1.0, level_vc: -1.0, beta: 1.0 },
        SwitchMode::On => BuckModeCoefficients { level_vin: 0.0, level_vc: 1.0, beta: -1.0 },
        SwitchMode::No => BuckModeCoefficients { level_vin: 0.0, level_vc: 0.0, beta: 0.0 },
    }
}

impl SwitchedPlant for BuckParams {
    fn step_mode(&self, x: &PlantState, w: &Exogenous, m: SwitchMode) -> PlantState {
        let k = buck_mode_coefficients(m);
        let level = k.level_vin * w.v_in + k.level_vc * x.v_cf;
        let di_l = (level - x.v_o) / self.l;
        let dv_cf = k.beta * x.i_l / self.c_f;
        let dv_o = (x.i_l - w.i_o) / self.c;
        PlantState {
            i_l: x.i_l + self.ts * di_l,
            v_cf: x.v_cf + self.ts * dv_cf,
            v_o: x.v_o + self.ts * dv_o,
        }
    }

    fn ts(&self) -> f64 {
        self.ts
    }

    fn i_safe(&self) -> (f64, f64) {
        (self.i_safe_lo, self.i_safe_hi)
    }

    /// The buck inductor feeds the load directly (`i_L = v_o/R`); the
    /// internal capacitor balances at half the input voltage.
    fn steady_state(&self, v_ref: f64, v_in: f64, r: f64) -> PlantState {
        PlantState { i_l: v_ref / r, v_cf: 0.5 * v_in, v_o: v_ref }
    }
}

/// One-step buck prediction with input checking.
pub fn buck_discrete_step(
    x: &PlantState,
    w: &Exogenous,
    m: SwitchMode,
    p: &BuckParams,
) -> Result<PlantState> {
    if !x.is_finite() {
        return Err(Error::NonFinite { what: "plant state" });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite { what: "exogenous input" });
    }
    Ok(p.step_mode(x, w, m))
}

/// Predictive-controller configuration for the buck: bench weights with the
/// internal capacitor balanced at half the nominal input voltage.
pub fn buck_mpc_config(v_in_nominal: f64) -> MpcConfig {
    MpcConfig { v_cf_ref: 0.5 * v_in_nominal, ..MpcConfig::for_output_ref(180.0) }
}

pub const BUCK_V_REF: f64 = 80.0;
pub const BUCK_V_IN: f64 = 120.0;

/// Moderate-disturbance evaluation scenario: load 20 Ω → 10 Ω at 0.25 s.
pub fn buck_scenario_moderate() -> ScenarioConfig {
    ScenarioConfig {
        kind: ScenarioKind::S1,
        v_ref: BUCK_V_REF,
        v_in0: BUCK_V_IN,
        r0: 20.0,
        events: vec![StepEvent { time: 0.25, target: StepTarget::LoadR, value: 10.0 }],
        ..ScenarioConfig::default()
    }
}

/// Strong-disturbance evaluation scenario: the same load step earlier in
/// the episode, compounded with an input-voltage sag.
pub fn buck_scenario_strong() -> ScenarioConfig {
    ScenarioConfig {
        kind: ScenarioKind::S2,
        v_ref: BUCK_V_REF,
        v_in0: BUCK_V_IN,
        r0: 20.0,
        events: vec![
            StepEvent { time: 0.2, target: StepTarget::LoadR, value: 10.0 },
            StepEvent { time: 0.3, target: StepTarget::VIn, value: 100.0 },
        ],
        ..ScenarioConfig::default()
    }
}

/// Re-initializes only the output layer of a source model for the target
/// action set: hidden weights and biases are copied bit-exact, the output
/// layer is drawn fresh from the given seed, and the feature normalizer is
/// recomputed from the target training samples.
pub fn transfer_init(source: &MlpModel, target_train: &[Sample], seed: u64) -> Result<MlpModel> {
    if source.n_in != 6 {
        return Err(Error::Model(format!(
            "source model expects {} inputs; the transfer pipeline uses 6",
            source.n_in
        )));
    }
    if target_train.is_empty() {
        return Err(Error::Model("transfer needs target training samples".into()));
    }
    let mut fresh = MlpModel::init(source.n_in, source.n_hidden, seed);
    fresh.w1.copy_from_slice(&source.w1);
    fresh.b1.copy_from_slice(&source.b1);

    let n = target_train.len() as f64;
    let mut mean = [0.0f64; 6];
    for s in target_train {
        for (m, &v) in mean.iter_mut().zip(s.z.iter()) {
            *m += v as f64 / n;
        }
    }
    let mut std = [0.0f64; 6];
    for s in target_train {
        for (j, &v) in s.z.iter().enumerate() {
            std[j] += (v as f64 - mean[j]).powi(2) / n;
        }
    }
    for s in &mut std {
        let raw = s.sqrt();
        *s = if raw < 1e-9 { 1.0 } else { raw };
    }
    fresh.normalizer = Normalizer::from_stats(&mean, &std);
    Ok(fresh)
}

/// Transfer-experiment schedule. Sample budgets and epoch counts apply to
/// both training arms identically.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Source-domain (boost) samples used to pre-train the source policy.
    pub source_samples: usize,
    pub source_epochs: usize,
    /// Source-training recipe; the source model is trained for this
    /// experiment alone, so its schedule is independent of the two target
    /// arms.
    pub source_batch: usize,
    pub source_lr: f64,
    /// Target-domain (buck) samples shared by both training arms.
    pub target_samples: usize,
    /// Fine-tune / from-scratch epochs on the target data.
    pub target_epochs: usize,
    /// Shared recipe of the two target arms.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Duration of the short data-collection episodes (s).
    pub episode_duration: f64,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            source_samples: 8203,
            source_epochs: 60,
            source_batch: 64,
            source_lr: 1e-3,
            target_samples: 4053,
            target_epochs: 40,
            batch_size: 256,
            learning_rate: 3e-4,
            episode_duration: 0.02,
            seed: 0,
        }
    }
}

fn rescale_events(cfg: &mut ScenarioConfig, duration: f64) {
    // Scenario samplers place events inside the standard 0.5 s episode;
    // map them linearly into the short-episode window.
    let src_lo = 0.05;
    let src_hi = 0.45;
    let dst_lo = 0.1 * duration;
    let dst_hi = 0.9 * duration;
    for ev in &mut cfg.events {
        let frac = ((ev.time - src_lo) / (src_hi - src_lo)).clamp(0.0, 1.0);
        ev.time = dst_lo + frac * (dst_hi - dst_lo);
    }
    cfg.events.sort_by(|a, b| a.time.total_cmp(&b.time));
    cfg.duration = duration;
}

fn short_boost_plans(n: usize, duration: f64, master_seed: u64) -> Vec<EpisodePlan> {
    (0..n)
        .map(|i| {
            let mut rng = seeding::stream_rng(master_seed, 0xb005 + i as u64);
            let kind = if i % 2 == 0 { ScenarioKind::S2 } else { ScenarioKind::S3 };
            let (mut scenario, params) = sample_scenario_with(kind, &DrRanges::nominal(), &mut rng);
            rescale_events(&mut scenario, duration);
            EpisodePlan { kind, scenario, plant: PlantParams::Boost(params) }
        })
        .collect()
}

fn buck_target_plans(n: usize, duration: f64, master_seed: u64) -> Vec<EpisodePlan> {
    use rand::Rng;
    (0..n)
        .map(|i| {
            let mut rng = seeding::stream_rng(master_seed, 0xb7c4 + i as u64);
            let v_in0 = rng.random_range(100.0..=140.0);
            let r0 = rng.random_range(10.0..=30.0);
            let mut times =
                [rng.random_range(0.1..=0.9) * duration, rng.random_range(0.1..=0.9) * duration];
            times.sort_by(f64::total_cmp);
            let events = times
                .into_iter()
                .map(|time| {
                    if rng.random_bool(0.5) {
                        StepEvent {
                            time,
                            target: StepTarget::VIn,
                            value: rng.random_range(100.0..=140.0),
                        }
                    } else {
                        StepEvent {
                            time,
                            target: StepTarget::LoadR,
                            value: rng.random_range(10.0..=30.0),
                        }
                    }
                })
                .collect();
            let scenario = ScenarioConfig {
                kind: ScenarioKind::S2,
                duration,
                v_ref: BUCK_V_REF,
                v_in0,
                r0,
                events,
                seed: rng.random(),
                ..ScenarioConfig::default()
            };
            EpisodePlan { kind: ScenarioKind::S2, scenario, plant: PlantParams::Buck(BuckParams::nominal()) }
        })
        .collect()
}

fn expert_dataset_from_plans(
    plans: &[EpisodePlan],
    mpc: &MpcConfig,
    seed: u64,
    limit: usize,
    fractions: [f64; 3],
) -> Result<Dataset> {
    let mpc = *mpc;
    let mut ds = collect_with(plans, seed, false, move |plan, _| ExpertPolicy::new(plan.plant, mpc))?;
    truncate(&mut ds, limit);
    split(&mut ds, fractions, seeding::derive_seed(seed, 0x59717))?;
    for (tag, name) in [(SplitTag::Train, "train"), (SplitTag::Test, "test")] {
        if ds.split_indices(tag).is_empty() {
            return Err(Error::Dataset(format!(
                "transfer {name} split is empty; use more samples or shorter episodes"
            )));
        }
    }
    Ok(ds)
}

/// Closed-loop row of the transfer comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferLoopRow {
    pub scenario: String,
    pub controller: String,
    pub diverged: bool,
    pub metrics: MetricsReport,
}

/// Result of one seeded run of the protocol.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferSeedResult {
    pub seed: u64,
    pub source_test_acc: f64,
    pub scratch_acc: f64,
    pub transfer_acc: f64,
    pub closed_loop: Vec<TransferLoopRow>,
}

/// Full transfer comparison across seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    pub runs: Vec<TransferSeedResult>,
}

fn rollout_metrics<P: SwitchedPlant, S: SwitchingPolicy + ?Sized>(
    cfg: &ScenarioConfig,
    policy: &mut S,
    plant: &P,
    mpc: &MpcConfig,
) -> Result<(MetricsReport, bool)> {
    let (traj, diverged): (Trajectory, bool) = match run_episode(cfg, policy, plant) {
        Ok(t) => (t, false),
        Err(Error::Diverged { partial, .. }) => (*partial, true),
        Err(other) => return Err(other),
    };
    let report = compute_metrics(&traj, cfg.v_ref, mpc, plant.i_safe())?;
    Ok((report, diverged))
}

/// Runs the three-stage protocol once per seed: pre-train on the boost,
/// train a buck policy from scratch, transfer-initialize and fine-tune a
/// second buck policy on byte-identical data and epochs, then compare all
/// three controllers in closed loop on the two buck scenarios.
pub fn run_transfer_experiment(cfg: &TransferConfig, seeds: &[u64]) -> Result<TransferReport> {
    let source_mpc = MpcConfig::for_output_ref(180.0);
    let buck_mpc = buck_mpc_config(BUCK_V_IN);
    let buck_plant = BuckParams::nominal();

    let samples_per_episode = (cfg.episode_duration / buck_plant.ts).round() as usize;
    if samples_per_episode == 0 {
        return Err(Error::InvalidConfig("episode duration shorter than one period".into()));
    }
    let n_source = cfg.source_samples.div_ceil(samples_per_episode);
    let n_target = cfg.target_samples.div_ceil(samples_per_episode);

    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_seed = seeding::derive_seed(cfg.seed, seed);

        // Stage 1: source pre-training on the boost.
        let source_plans = short_boost_plans(n_source, cfg.episode_duration, run_seed);
        let source_ds = expert_dataset_from_plans(
            &source_plans,
            &source_mpc,
            run_seed,
            cfg.source_samples,
            [0.8, 0.1, 0.1],
        )?;
        let mut source = MlpModel::standard(seeding::derive_seed(run_seed, 1));
        source.normalizer = Normalizer::from_stats(
            &source_ds.meta.feature_mean,
            &source_ds.meta.feature_std,
        );
        let source_tc = TrainConfig {
            learning_rate: cfg.source_lr,
            batch_size: cfg.source_batch,
            epochs: cfg.source_epochs,
            seed: seeding::derive_seed(run_seed, 2),
            ..TrainConfig::default()
        };
        train(
            &mut source,
            &source_ds.split_samples(SplitTag::Train),
            &source_ds.split_samples(SplitTag::Val),
            &source_tc,
        )?;
        let source_test_acc = accuracy(&source, &source_ds.split_samples(SplitTag::Test));

        // Stage 2: buck training from scratch.
        let target_plans = buck_target_plans(n_target, cfg.episode_duration, run_seed);
        let target_ds = expert_dataset_from_plans(
            &target_plans,
            &buck_mpc,
            seeding::derive_seed(run_seed, 3),
            cfg.target_samples,
            [0.7, 0.1, 0.2],
        )?;
        let target_train = target_ds.split_samples(SplitTag::Train);
        let target_val = target_ds.split_samples(SplitTag::Val);
        let target_test = target_ds.split_samples(SplitTag::Test);

        let target_tc = TrainConfig {
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            epochs: cfg.target_epochs,
            seed: seeding::derive_seed(run_seed, 4),
            ..TrainConfig::default()
        };

        let mut scratch = MlpModel::standard(seeding::derive_seed(run_seed, 5));
        scratch.normalizer = Normalizer::from_stats(
            &target_ds.meta.feature_mean,
            &target_ds.meta.feature_std,
        );
        train(&mut scratch, &target_train, &target_val, &target_tc)?;

        // Stage 3: transfer initialization and fine-tuning on the same
        // data with the same schedule.
        let mut transfer = transfer_init(&source, &target_train, seeding::derive_seed(run_seed, 6))?;
        train(&mut transfer, &target_train, &target_val, &target_tc)?;

        let scratch_acc = accuracy(&scratch, &target_test);
        let transfer_acc = accuracy(&transfer, &target_test);

        let mut closed_loop = Vec::new();
        for (name, scenario) in
            [("moderate", buck_scenario_moderate()), ("strong", buck_scenario_strong())]
        {
            let mut expert = ExpertPolicy::new(buck_plant, buck_mpc);
            let (m, d) = rollout_metrics(&scenario, &mut expert, &buck_plant, &buck_mpc)?;
            closed_loop.push(TransferLoopRow {
                scenario: name.into(),
                controller: "mpc".into(),
                diverged: d,
                metrics: m,
            });
            for (label, model) in [("scratch", &scratch), ("transfer", &transfer)] {
                let mut policy = NeuralPolicy::new(model.clone());
                let (m, d) = rollout_metrics(&scenario, &mut policy, &buck_plant, &buck_mpc)?;
                closed_loop.push(TransferLoopRow {
                    scenario: name.into(),
                    controller: label.into(),
                    diverged: d,
                    metrics: m,
                });
            }
        }

        runs.push(TransferSeedResult {
            seed,
            source_test_acc,
            scratch_acc,
            transfer_acc,
            closed_loop,
        });
    }
    Ok(TransferReport { runs })
}
