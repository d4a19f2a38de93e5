//! Experiment harness: scenario suites, ablations, sensitivity sweeps, the
//! decision-latency benchmark, the umbrella run configuration, and table
//! output.
//!
//! Fairness rules baked in here: every configuration inside one ablation or
//! sweep run is evaluated on the identical, pre-generated scenario set, and
//! every emitted table row carries the build id and the master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::buck::TransferConfig;
use crate::converter::{ConverterParams, SwitchedPlant};
use crate::dagger::{collect_mismatch, run_dagger, DaggerConfig};
use crate::dataset::{
    class_histogram, class_weights, collect_expert_dataset, collect_expert_dataset_with,
    collect_with, plan_boost_episodes, split, Dataset, PlantParams, SplitTag,
    SubsetEpisodes,
};
use crate::metrics::{compute_metrics, metric_columns, MetricsReport};
use crate::mpc::{greedy_decide, ExpertPolicy, FeatureVector, MpcConfig};
use crate::policy::{train, MlpModel, NeuralPolicy, Normalizer, TrainConfig};
use crate::scenario::{
    run_episode, sample_scenario, DrRanges, RandomModePolicy, ScenarioConfig, ScenarioKind,
    SwitchingPolicy,
};
use crate::seeding;
use crate::{Error, Result};

/// Crate version plus the commit the binary was built from.
pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("BUILD_GIT_HASH"))
}

/// Output directory layout and provenance columns for one experiment run.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pub build_id: String,
    pub master_seed: u64,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>, master_seed: u64) -> Result<Self> {
        let out_dir = out_dir.into();
        for sub in ["configs", "models", "datasets", "tables", "reports", "trajectories"] {
            std::fs::create_dir_all(out_dir.join(sub))?;
        }
        Ok(RunContext { out_dir, build_id: build_id(), master_seed })
    }

    pub fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.out_dir.join(sub).join(name)
    }

    /// Writes a CSV table; every row is suffixed with the build id and the
    /// master seed.
    pub fn write_table(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        use std::io::Write;
        let path = self.path("tables", name);
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(out, "{},build_id,master_seed", header.join(","))?;
        for row in rows {
            writeln!(out, "{},{},{}", row.join(","), self.build_id, self.master_seed)?;
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path("reports", name);
        std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
        Ok(path)
    }
}

/// Runs one episode and grades it; a diverged episode is graded on its
/// recorded prefix and flagged.
pub fn rollout_with_metrics<P, S>(
    cfg: &ScenarioConfig,
    policy: &mut S,
    plant: &P,
    mpc: &MpcConfig,
) -> Result<(MetricsReport, bool)>
where
    P: SwitchedPlant,
    S: SwitchingPolicy + ?Sized,
{
    let (traj, diverged) = match run_episode(cfg, policy, plant) {
        Ok(t) => (t, false),
        Err(Error::Diverged { partial, .. }) => (*partial, true),
        Err(other) => return Err(other),
    };
    let report = compute_metrics(&traj, cfg.v_ref, mpc, plant.i_safe())?;
    Ok((report, diverged))
}

/// A fixed evaluation scenario: its family, configuration, and plant.
pub type EvalScenario = (ScenarioKind, ScenarioConfig, PlantParams);

/// Pre-generates the shared evaluation set: `rollouts` scenarios per family,
/// deterministic in `seed`. Every configuration compared within a run must
/// consume exactly this set.
pub fn evaluation_scenarios(rollouts: usize, seed: u64) -> Vec<EvalScenario> {
    let mut set = Vec::with_capacity(3 * rollouts);
    for (k_idx, kind) in [ScenarioKind::S1, ScenarioKind::S2, ScenarioKind::S3]
        .into_iter()
        .enumerate()
    {
        for i in 0..rollouts {
            let mut rng = seeding::stream_rng(seed, (k_idx * 1009 + i) as u64);
            let (cfg, params) = sample_scenario(kind, &mut rng);
            set.push((kind, cfg, PlantParams::Boost(params)));
        }
    }
    set
}

// ---------------------------------------------------------------------------
// Scenario suite
// ---------------------------------------------------------------------------

/// Scenario-suite schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Rollouts per scenario family.
    pub rollouts: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { rollouts: 3, seed: 0 }
    }
}

/// One graded rollout of the suite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteRow {
    pub scenario: ScenarioKind,
    pub controller: String,
    pub rollout: usize,
    pub diverged: bool,
    pub metrics: MetricsReport,
}

/// Compares the expert and the student: both run the nominal family and the
/// operating-point family on identical scenarios; the component-perturbed
/// family grades the student alone (its purpose is mismatch robustness).
pub fn run_scenario_suite(
    model: &MlpModel,
    mpc: &MpcConfig,
    cfg: &SuiteConfig,
) -> Result<Vec<SuiteRow>> {
    let scenarios = evaluation_scenarios(cfg.rollouts, cfg.seed);
    let mut rows = Vec::new();
    for (i, (kind, scenario, plant)) in scenarios.iter().enumerate() {
        let rollout = i % cfg.rollouts.max(1);
        if *kind != ScenarioKind::S3 {
            let mut expert = ExpertPolicy::new(*plant, *mpc);
            let (metrics, diverged) = rollout_with_metrics(scenario, &mut expert, plant, mpc)?;
            rows.push(SuiteRow {
                scenario: *kind,
                controller: "mpc".into(),
                rollout,
                diverged,
                metrics,
            });
        }
        let mut student = NeuralPolicy::new(model.clone());
        let (metrics, diverged) = rollout_with_metrics(scenario, &mut student, plant, mpc)?;
        rows.push(SuiteRow {
            scenario: *kind,
            controller: "ann".into(),
            rollout,
            diverged,
            metrics,
        });
    }
    Ok(rows)
}

fn mean_metrics(rows: &[&SuiteRow]) -> Vec<(&'static str, f64)> {
    let mut acc: Vec<(&'static str, f64)> = Vec::new();
    for row in rows {
        let cols = metric_columns(&row.metrics);
        if acc.is_empty() {
            acc = cols.iter().map(|&(n, _)| (n, 0.0)).collect();
        }
        for (slot, (_, v)) in acc.iter_mut().zip(cols) {
            slot.1 += v / rows.len() as f64;
        }
    }
    acc
}

/// Writes the per-rollout table and the consolidated comparison (metric per
/// row; expert/student columns per scenario family, means over rollouts).
pub fn write_suite_outputs(ctx: &RunContext, rows: &[SuiteRow]) -> Result<()> {
    let header: Vec<&str> = ["scenario", "controller", "rollout", "diverged"]
        .into_iter()
        .chain(metric_columns(&rows[0].metrics).iter().map(|&(n, _)| n))
        .collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.scenario.label().to_string(),
                r.controller.clone(),
                r.rollout.to_string(),
                r.diverged.to_string(),
            ];
            row.extend(metric_columns(&r.metrics).iter().map(|(_, v)| v.to_string()));
            row
        })
        .collect();
    ctx.write_table("suite_rollouts.csv", &header, &table)?;

    let groups: [(&str, ScenarioKind, &str); 5] = [
        ("s1_mpc", ScenarioKind::S1, "mpc"),
        ("s1_ann", ScenarioKind::S1, "ann"),
        ("s2_mpc", ScenarioKind::S2, "mpc"),
        ("s2_ann", ScenarioKind::S2, "ann"),
        ("s3_ann", ScenarioKind::S3, "ann"),
    ];
    let mut columns = Vec::new();
    for (name, kind, controller) in groups {
        let selected: Vec<&SuiteRow> = rows
            .iter()
            .filter(|r| r.scenario == kind && r.controller == controller)
            .collect();
        columns.push((name, mean_metrics(&selected)));
    }
    let metric_names: Vec<&'static str> =
        columns[0].1.iter().map(|&(n, _)| n).collect();
    let mut table = Vec::new();
    for (m_idx, name) in metric_names.iter().enumerate() {
        let mut row = vec![name.to_string()];
        for (_, col) in &columns {
            row.push(col.get(m_idx).map(|(_, v)| v.to_string()).unwrap_or_default());
        }
        table.push(row);
    }
    let mut header = vec!["metric"];
    header.extend(groups.iter().map(|(n, _, _)| *n));
    ctx.write_table("suite_comparison.csv", &header, &table)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Training-pipeline ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationId {
    Full,
    NoDagger,
    NoDr,
    NoExpert,
}

/// Which pipeline components an arm enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub expert_labels: bool,
    pub dr: bool,
    pub dagger: bool,
}

impl AblationId {
    pub const ALL: [AblationId; 4] =
        [AblationId::Full, AblationId::NoDagger, AblationId::NoDr, AblationId::NoExpert];

    pub fn flags(self) -> AblationFlags {
        match self {
            AblationId::Full => AblationFlags { expert_labels: true, dr: true, dagger: true },
            AblationId::NoDagger => AblationFlags { expert_labels: true, dr: true, dagger: false },
            AblationId::NoDr => AblationFlags { expert_labels: true, dr: false, dagger: true },
            AblationId::NoExpert => {
                AblationFlags { expert_labels: false, dr: false, dagger: false }
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationId::Full => "FULL",
            AblationId::NoDagger => "NO_DAGGER",
            AblationId::NoDr => "NO_DR",
            AblationId::NoExpert => "NO_EXPERT",
        }
    }

    pub fn parse(s: &str) -> Option<AblationId> {
        AblationId::ALL.into_iter().find(|id| id.label().eq_ignore_ascii_case(s))
    }
}

/// Label source standing in when expert labels are disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// Uniformly random mode per step — supervision with zero control
    /// knowledge.
    Random,
    /// Single-step stage-cost argmin.
    Greedy,
}

struct GreedySurrogate {
    plant: PlantParams,
    mpc: MpcConfig,
}

impl SwitchingPolicy for GreedySurrogate {
    fn decide(&mut self, z: &FeatureVector) -> crate::converter::SwitchMode {
        greedy_decide(z, &self.plant, &self.mpc).0
    }
}

/// Shared schedule of one ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationRunConfig {
    /// Episode mix used for domain-randomized arms.
    pub episodes: SubsetEpisodes,
    /// Offline training schedule shared by every arm.
    pub train: TrainConfig,
    /// Refinement schedule for arms that enable it.
    pub dagger: DaggerConfig,
    pub eval_rollouts: usize,
    pub surrogate: SurrogateKind,
    pub seed: u64,
}

impl Default for AblationRunConfig {
    fn default() -> Self {
        AblationRunConfig {
            episodes: SubsetEpisodes { nom: 2, op: 4, par: 4 },
            train: TrainConfig::default(),
            dagger: DaggerConfig::default(),
            eval_rollouts: 3,
            surrogate: SurrogateKind::Random,
            seed: 0,
        }
    }
}

/// One graded rollout of one ablation arm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub scenario: ScenarioKind,
    pub rollout: usize,
    pub diverged: bool,
    pub metrics: MetricsReport,
}

fn train_policy_on(dataset: &Dataset, tc: &TrainConfig, init_seed: u64) -> Result<MlpModel> {
    let train_set = dataset.split_samples(SplitTag::Train);
    let val_set = dataset.split_samples(SplitTag::Val);
    let weights = class_weights(&class_histogram(&train_set))?;
    let mut model = MlpModel::standard(init_seed);
    model.normalizer =
        Normalizer::from_stats(&dataset.meta.feature_mean, &dataset.meta.feature_std);
    let tc = TrainConfig { class_weights: weights, ..*tc };
    train(&mut model, &train_set, &val_set, &tc)?;
    Ok(model)
}

/// Trains every requested arm under the shared schedule and grades all of
/// them on the identical evaluation set.
pub fn run_ablation(
    grid: &[AblationId],
    cfg: &AblationRunConfig,
    mpc: &MpcConfig,
    ctx: Option<&RunContext>,
) -> Result<Vec<AblationRow>> {
    let eval_set = evaluation_scenarios(cfg.eval_rollouts, seeding::derive_seed(cfg.seed, 0xe7a1));
    let data_seed = seeding::derive_seed(cfg.seed, 0xd474);
    let split_seed = seeding::derive_seed(cfg.seed, 0x59117);
    let init_seed = seeding::derive_seed(cfg.seed, 0x1217);
    let fractions = [0.8, 0.1, 0.1];

    let mut dr_dataset: Option<Dataset> = None;
    let mut rows = Vec::new();

    for &id in grid {
        let flags = id.flags();

        let dataset = if flags.expert_labels && flags.dr {
            if dr_dataset.is_none() {
                let mut ds = collect_expert_dataset(cfg.episodes, mpc, data_seed)?;
                split(&mut ds, fractions, split_seed)?;
                dr_dataset = Some(ds);
            }
            dr_dataset.clone().unwrap()
        } else if flags.expert_labels {
            // nominal-only: the same episode count, all from the nominal
            // family
            let episodes = SubsetEpisodes { nom: cfg.episodes.total(), op: 0, par: 0 };
            let mut ds = collect_expert_dataset(episodes, mpc, data_seed)?;
            split(&mut ds, fractions, split_seed)?;
            ds
        } else {
            // no expert: the surrogate both drives and labels; runaway
            // prefixes are kept because that is the data this arm gets
            let plans = plan_boost_episodes(cfg.episodes, &DrRanges::nominal(), data_seed);
            let mpc_copy = *mpc;
            let surrogate = cfg.surrogate;
            let mut ds = match surrogate {
                SurrogateKind::Random => collect_with(&plans, data_seed, true, |_, ep_seed| {
                    RandomModePolicy::new(ep_seed)
                })?,
                SurrogateKind::Greedy => collect_with(&plans, data_seed, true, move |plan, _| {
                    GreedySurrogate { plant: plan.plant, mpc: mpc_copy }
                })?,
            };
            split(&mut ds, fractions, split_seed)?;
            ds
        };

        let mut model = train_policy_on(&dataset, &cfg.train, init_seed)?;
        if flags.dagger {
            let (refined, _) = run_dagger(&model, &dataset, mpc, &cfg.dagger, &cfg.train)?;
            model = refined;
        }

        if let Some(ctx) = ctx {
            model.save_file(&ctx.path("models", &format!("ablation_{}.fcnn", id.label())))?;
            for (k, (kind, scenario, _)) in eval_set.iter().enumerate() {
                let rollout = k % cfg.eval_rollouts.max(1);
                scenario.save(&ctx.path(
                    "configs",
                    &format!("ablation_{}_eval_{}_{rollout}.toml", id.label(), kind.label()),
                ))?;
            }
        }

        for (i, (kind, scenario, plant)) in eval_set.iter().enumerate() {
            let mut policy = NeuralPolicy::new(model.clone());
            let (metrics, diverged) = rollout_with_metrics(scenario, &mut policy, plant, mpc)?;
            rows.push(AblationRow {
                config: id.label().into(),
                scenario: *kind,
                rollout: i % cfg.eval_rollouts.max(1),
                diverged,
                metrics,
            });
        }
    }

    if let Some(ctx) = ctx {
        let header: Vec<&str> = ["config", "scenario", "rollout", "diverged"]
            .into_iter()
            .chain(metric_columns(&rows[0].metrics).iter().map(|&(n, _)| n))
            .collect();
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.config.clone(),
                    r.scenario.label().to_string(),
                    r.rollout.to_string(),
                    r.diverged.to_string(),
                ];
                row.extend(metric_columns(&r.metrics).iter().map(|(_, v)| v.to_string()));
                row
            })
            .collect();
        ctx.write_table("ablation.csv", &header, &table)?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Sensitivity sweeps
// ---------------------------------------------------------------------------

/// Swept axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DaggerBudget,
    DrIntensity,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::DaggerBudget => "dagger_budget",
            SweepAxis::DrIntensity => "dr_intensity",
        }
    }

    /// Default grid for the axis.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepAxis::DaggerBudget => {
                vec![0.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0, 12000.0]
            }
            SweepAxis::DrIntensity => vec![0.1, 0.3, 0.5, 0.8, 1.0],
        }
    }
}

/// Sweep schedule: which axis, which grid points, and how each point is
/// retrained and evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Grid values; when empty, the axis default.
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Dataset scale per point (and for the shared pretrained base).
    pub episodes: SubsetEpisodes,
    /// Offline schedule for the shared base model.
    pub base_train: TrainConfig,
    /// Epochs for each grid point's retrain.
    pub retrain_epochs: usize,
    /// Student-driven episodes per mismatch collection.
    pub dagger_episodes: usize,
    pub eval_rollouts: usize,
    pub eval_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            axis: SweepAxis::DaggerBudget,
            grid: Vec::new(),
            seeds: vec![1, 2, 3],
            episodes: SubsetEpisodes { nom: 1, op: 2, par: 2 },
            base_train: TrainConfig::default(),
            retrain_epochs: 40,
            dagger_episodes: 2,
            eval_rollouts: 2,
            eval_seed: 99,
        }
    }
}

/// One graded rollout at one sweep point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub scenario: ScenarioKind,
    pub rollout: usize,
    pub diverged: bool,
    pub metrics: MetricsReport,
}

/// Evaluation scenarios for sweeps: the operating-point and perturbation
/// families only, fixed across every grid point.
fn sweep_eval_set(rollouts: usize, seed: u64) -> Vec<EvalScenario> {
    evaluation_scenarios(rollouts, seed)
        .into_iter()
        .filter(|(kind, _, _)| *kind != ScenarioKind::S1)
        .collect()
}

/// Runs the sweep. Budget axis: one shared pretrained base per seed, then
/// per point collect up to that many mismatch states and retrain. Intensity
/// axis: regenerate the dataset at the scaled randomization ranges and
/// retrain from scratch. Every point is graded on the same fixed
/// evaluation set.
pub fn run_sweep(
    spec: &SweepSpec,
    mpc: &MpcConfig,
    ctx: Option<&RunContext>,
) -> Result<Vec<SweepRow>> {
    let grid = if spec.grid.is_empty() { spec.axis.default_grid() } else { spec.grid.clone() };
    let eval_set = sweep_eval_set(spec.eval_rollouts, spec.eval_seed);
    let mut rows = Vec::new();

    for &seed in &spec.seeds {
        match spec.axis {
            SweepAxis::DaggerBudget => {
                let data_seed = seeding::derive_seed(seed, 0xd474);
                let mut base_ds = collect_expert_dataset(spec.episodes, mpc, data_seed)?;
                split(&mut base_ds, [0.8, 0.1, 0.1], seeding::derive_seed(seed, 0x5917))?;
                let base_tc =
                    TrainConfig { seed: seeding::derive_seed(seed, 0x7a1e), ..spec.base_train };
                let base = train_policy_on(&base_ds, &base_tc, seeding::derive_seed(seed, 0x1217))?;
                let base_train_set = base_ds.split_samples(SplitTag::Train);
                let val_set = base_ds.split_samples(SplitTag::Val);

                for &value in &grid {
                    let budget = value.round().max(0.0) as usize;
                    let model = if budget == 0 {
                        base.clone()
                    } else {
                        let mismatch = collect_mismatch(
                            &base,
                            spec.dagger_episodes,
                            budget,
                            mpc,
                            seeding::derive_seed(seed, 0xc0 + budget as u64),
                        )?;
                        let mut aggregate = base_train_set.clone();
                        aggregate.extend_from_slice(&mismatch.samples);
                        let weights = class_weights(&class_histogram(&aggregate))?;
                        let tc = TrainConfig {
                            epochs: spec.retrain_epochs,
                            class_weights: weights,
                            seed: seeding::derive_seed(seed, 0xf1 + budget as u64),
                            ..spec.base_train
                        };
                        let mut refined = base.clone();
                        train(&mut refined, &aggregate, &val_set, &tc)?;
                        refined
                    };
                    grade_sweep_point(&mut rows, spec, &eval_set, mpc, &model, value, seed)?;
                }
            }
            SweepAxis::DrIntensity => {
                let data_seed = seeding::derive_seed(seed, 0xd474);
                for &value in &grid {
                    let ranges = DrRanges::scaled(value);
                    let mut ds =
                        collect_expert_dataset_with(&ranges, spec.episodes, mpc, data_seed)?;
                    split(&mut ds, [0.8, 0.1, 0.1], seeding::derive_seed(seed, 0x5917))?;
                    let tc = TrainConfig {
                        epochs: spec.retrain_epochs,
                        seed: seeding::derive_seed(seed, 0x7a1e),
                        ..spec.base_train
                    };
                    let model = train_policy_on(&ds, &tc, seeding::derive_seed(seed, 0x1217))?;
                    grade_sweep_point(&mut rows, spec, &eval_set, mpc, &model, value, seed)?;
                }
            }
        }
    }

    if let Some(ctx) = ctx {
        write_sweep_outputs(ctx, &rows)?;
    }
    Ok(rows)
}

fn grade_sweep_point(
    rows: &mut Vec<SweepRow>,
    spec: &SweepSpec,
    eval_set: &[EvalScenario],
    mpc: &MpcConfig,
    model: &MlpModel,
    value: f64,
    seed: u64,
) -> Result<()> {
    for (i, (kind, scenario, plant)) in eval_set.iter().enumerate() {
        let mut policy = NeuralPolicy::new(model.clone());
        let (metrics, diverged) = rollout_with_metrics(scenario, &mut policy, plant, mpc)?;
        rows.push(SweepRow {
            axis: spec.axis.label().into(),
            value,
            seed,
            scenario: *kind,
            rollout: i % spec.eval_rollouts.max(1),
            diverged,
            metrics,
        });
    }
    Ok(())
}

/// Variance of each metric's per-point mean across the grid, per scenario,
/// sorted most-variable first. This is the ranking used to pick which
/// curves to look at.
pub fn sweep_variance_ranking(rows: &[SweepRow]) -> Vec<(ScenarioKind, String, f64)> {
    use std::collections::BTreeMap;
    // (scenario, metric) -> value -> (sum, count)
    let mut acc: BTreeMap<(String, String), BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for row in rows {
        for (name, v) in metric_columns(&row.metrics) {
            let entry = acc
                .entry((row.scenario.label().to_string(), name.to_string()))
                .or_default()
                .entry(row.value.to_bits())
                .or_insert((0.0, 0));
            entry.0 += v;
            entry.1 += 1;
        }
    }
    let mut ranking: Vec<(ScenarioKind, String, f64)> = acc
        .into_iter()
        .map(|((scenario, metric), points)| {
            let means: Vec<f64> = points.values().map(|(s, c)| s / *c as f64).collect();
            let mean = means.iter().sum::<f64>() / means.len() as f64;
            let var =
                means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / means.len() as f64;
            let kind = match scenario.as_str() {
                "S1" => ScenarioKind::S1,
                "S2" => ScenarioKind::S2,
                _ => ScenarioKind::S3,
            };
            (kind, metric, var)
        })
        .collect();
    ranking.sort_by(|a, b| b.2.total_cmp(&a.2));
    ranking
}

/// Writes the per-point metric table and the variance ranking.
pub fn write_sweep_outputs(ctx: &RunContext, rows: &[SweepRow]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let header: Vec<&str> = ["axis", "value", "seed", "scenario", "rollout", "diverged"]
        .into_iter()
        .chain(metric_columns(&rows[0].metrics).iter().map(|&(n, _)| n))
        .collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.axis.clone(),
                r.value.to_string(),
                r.seed.to_string(),
                r.scenario.label().to_string(),
                r.rollout.to_string(),
                r.diverged.to_string(),
            ];
            row.extend(metric_columns(&r.metrics).iter().map(|(_, v)| v.to_string()));
            row
        })
        .collect();
    ctx.write_table("sweep.csv", &header, &table)?;

    let ranking = sweep_variance_ranking(rows);
    let rank_rows: Vec<Vec<String>> = ranking
        .into_iter()
        .map(|(kind, metric, var)| vec![kind.label().to_string(), metric, var.to_string()])
        .collect();
    ctx.write_table("sweep_variance_ranking.csv", &["scenario", "metric", "variance"], &rank_rows)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Decision-latency benchmark
// ---------------------------------------------------------------------------

/// Per-decision latency comparison.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub expert_us: f64,
    pub ann_us: f64,
    pub speedup: f64,
}

/// Times both controllers on the same pool of recorded feature vectors
/// within one process: median per-decision latency over `n` draws after a
/// warm-up, expert first, student second.
pub fn bench_decision_time(
    mpc: &MpcConfig,
    model: &MlpModel,
    n: usize,
    seed: u64,
) -> Result<BenchReport> {
    use std::hint::black_box;
    use std::time::Instant;

    if n < 1000 {
        return Err(Error::InvalidConfig("benchmark needs at least 1000 decisions".into()));
    }
    let plant = ConverterParams::nominal();
    let mut cfg = ScenarioConfig::canonical_s1();
    cfg.duration = 0.1;
    cfg.events.truncate(0);
    let mut expert = ExpertPolicy::new(plant, *mpc);
    let traj = run_episode(&cfg, &mut expert, &plant)?;
    let pool: Vec<FeatureVector> = traj
        .records
        .iter()
        .map(|r| FeatureVector::from_parts(&r.state, &r.w, r.i_ref).quantize())
        .collect();

    use rand::Rng;
    let mut rng = seeding::stream_rng(seed, 0xbe7c);
    let draws: Vec<FeatureVector> =
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();

    let mut expert = ExpertPolicy::new(plant, *mpc);
    let mut student = NeuralPolicy::new(model.clone());
    for z in draws.iter().take(256) {
        black_box(expert.decide(black_box(z)));
        black_box(student.decide(black_box(z)));
    }

    let mut expert_times = Vec::with_capacity(n);
    for z in &draws {
        let t0 = Instant::now();
        black_box(expert.decide(black_box(z)));
        expert_times.push(t0.elapsed().as_nanos() as f64);
    }
    let mut ann_times = Vec::with_capacity(n);
    for z in &draws {
        let t0 = Instant::now();
        black_box(student.decide(black_box(z)));
        ann_times.push(t0.elapsed().as_nanos() as f64);
    }

    let median = |times: &mut Vec<f64>| -> f64 {
        times.sort_by(f64::total_cmp);
        times[times.len() / 2] / 1000.0
    };
    let expert_us = median(&mut expert_times);
    let ann_us = median(&mut ann_times);
    Ok(BenchReport { n, expert_us, ann_us, speedup: expert_us / ann_us })
}

// ---------------------------------------------------------------------------
// Umbrella run configuration
// ---------------------------------------------------------------------------

/// Dataset-generation options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub episodes: SubsetEpisodes,
    pub split: [f64; 3],
    pub seed: u64,
    /// Randomization-range intensity (1.0 = full ranges).
    pub dr_intensity: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            episodes: SubsetEpisodes { nom: 2, op: 4, par: 4 },
            split: [0.8, 0.1, 0.1],
            seed: 1,
            dr_intensity: 1.0,
        }
    }
}

/// Benchmark options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub n: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { n: 5000, seed: 0 }
    }
}

/// The single structured configuration file behind the command-line tools;
/// every section has defaults, so an empty file is a valid configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub converter: ConverterParams,
    pub mpc: MpcConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub dagger: DaggerConfig,
    pub suite: SuiteConfig,
    pub ablation: AblationRunConfig,
    pub sweep: SweepSpec,
    pub transfer: TransferConfig,
    pub bench: BenchOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flags_match_the_arm_definitions() {
        assert_eq!(
            AblationId::Full.flags(),
            AblationFlags { expert_labels: true, dr: true, dagger: true }
        );
        assert_eq!(
            AblationId::NoDagger.flags(),
            AblationFlags { expert_labels: true, dr: true, dagger: false }
        );
        assert_eq!(
            AblationId::NoDr.flags(),
            AblationFlags { expert_labels: true, dr: false, dagger: true }
        );
        assert_eq!(
            AblationId::NoExpert.flags(),
            AblationFlags { expert_labels: false, dr: false, dagger: false }
        );
        assert_eq!(AblationId::parse("no_dagger"), Some(AblationId::NoDagger));
        assert_eq!(AblationId::parse("bogus"), None);
    }

    #[test]
    fn evaluation_scenarios_are_reproducible_and_shared() {
        let a = evaluation_scenarios(2, 7);
        let b = evaluation_scenarios(2, 7);
        assert_eq!(a.len(), 6);
        for ((ka, ca, _), (kb, cb, _)) in a.iter().zip(b.iter()) {
            assert_eq!(ka, kb);
            // byte-identical serialized scenario configs
            assert_eq!(ca.to_toml().unwrap(), cb.to_toml().unwrap());
        }
        let c = evaluation_scenarios(2, 8);
        assert_ne!(
            a[2].1.to_toml().unwrap(),
            c[2].1.to_toml().unwrap(),
            "different master seeds draw different evaluation scenarios"
        );
    }

    #[test]
    fn sweep_axis_default_grids() {
        assert_eq!(
            SweepAxis::DaggerBudget.default_grid(),
            vec![0.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0, 12000.0]
        );
        assert_eq!(SweepAxis::DrIntensity.default_grid(), vec![0.1, 0.3, 0.5, 0.8, 1.0]);
    }

    #[test]
    fn run_config_round_trips_and_accepts_an_empty_file() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let empty: RunConfig = toml::from_str("").unwrap();
        assert_eq!(empty, cfg);
    }

    #[test]
    fn tables_carry_build_id_and_master_seed() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(dir.path().join("run"), 41).unwrap();
        let path = ctx
            .write_table("t.csv", &["a", "b"], &[vec!["1".into(), "2".into()]])
            .unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "a,b,build_id,master_seed");
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,2,"));
        assert!(row.ends_with(",41"));
        assert!(row.contains(&build_id()));
    }
}
