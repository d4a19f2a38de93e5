//! Disagreement-filtered on-policy refinement.
//!
//! The student drives the closed loop; the expert is evaluated at every
//! state the student visits. Only the states where the two disagree are
//! kept, labeled by the expert, merged into the aggregate training set, and
//! the student is fine-tuned on the result. Filtering keeps the aggregation
//! compact while still concentrating supervision on the regions the student
//! actually reaches and gets wrong.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::converter::SwitchMode;
use crate::dataset::{
    class_histogram, class_weights, Dataset, EpisodePlan, PlantParams, Sample, SplitTag,
};
use crate::mpc::{beam_decide_reusing, BeamWorkspace, FeatureVector, MpcConfig};
use crate::policy::{evaluate, train, MlpModel, NeuralPolicy, TrainConfig};
use crate::scenario::{run_episode, sample_scenario, ScenarioKind, SwitchingPolicy};
use crate::seeding;
use crate::{Error, Result};

/// Refinement schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaggerConfig {
    /// Collect–aggregate–fine-tune cycles.
    pub iterations: usize,
    /// Student-driven episodes per cycle, cycling through the three
    /// scenario families.
    pub episodes_per_iter: usize,
    /// Total mismatch-sample budget, split evenly across cycles.
    pub budget: usize,
    /// Epochs per fine-tune.
    pub fine_tune_epochs: usize,
    pub seed: u64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig {
            iterations: 3,
            episodes_per_iter: 2,
            budget: 6000,
            fine_tune_epochs: 280,
            seed: 0,
        }
    }
}

/// Result of one mismatch-collection pass.
#[derive(Clone, Debug, Default)]
pub struct MismatchSet {
    /// Expert-labeled disagreement samples, in visit order, truncated at
    /// the budget.
    pub samples: Vec<Sample>,
    /// States visited (expert queries made).
    pub visited: usize,
    /// Disagreements observed before budget truncation.
    pub disagreements: usize,
    /// Episodes that left the operating region early.
    pub diverged_episodes: usize,
}

impl MismatchSet {
    pub fn disagreement_rate(&self) -> f64 {
        if self.visited == 0 {
            0.0
        } else {
            self.disagreements as f64 / self.visited as f64
        }
    }
}

/// Wraps a student policy so that while it drives the loop, the expert is
/// queried on every visited state and disagreements are recorded with the
/// expert's label. The student is never mutated beyond its own scratch.
struct DisagreementProbe<'a, S> {
    student: &'a mut S,
    plant: PlantParams,
    mpc: MpcConfig,
    ws: BeamWorkspace,
    mismatches: Vec<Sample>,
    visited: usize,
    disagreements: usize,
}

impl<S: SwitchingPolicy> SwitchingPolicy for DisagreementProbe<'_, S> {
    fn decide(&mut self, z: &FeatureVector) -> SwitchMode {
        let student_mode = self.student.decide(z);
        let expert_mode = beam_decide_reusing(&mut self.ws, z, &self.plant, &self.mpc).mode;
        self.visited += 1;
        if student_mode != expert_mode {
            self.disagreements += 1;
            self.mismatches.push(Sample { z: z.to_f32(), label: expert_mode });
        }
        student_mode
    }
}

/// Mismatch collection for an arbitrary student policy; runs the plans
/// sequentially. The expert predicts with each episode's own plant, so
/// relabeling stays consistent with the world the student acted in.
pub fn collect_mismatch_sequential<S: SwitchingPolicy>(
    student: &mut S,
    plans: &[EpisodePlan],
    mpc: &MpcConfig,
    budget: usize,
) -> Result<MismatchSet> {
    let mut set = MismatchSet::default();
    for plan in plans {
        if set.samples.len() >= budget {
            break;
        }
        let mut probe = DisagreementProbe {
            student,
            plant: plan.plant,
            mpc: *mpc,
            ws: BeamWorkspace::new(),
            mismatches: Vec::new(),
            visited: 0,
            disagreements: 0,
        };
        match run_episode(&plan.scenario, &mut probe, &plan.plant) {
            Ok(_) => {}
            Err(Error::Diverged { .. }) => set.diverged_episodes += 1,
            Err(other) => return Err(other),
        }
        set.visited += probe.visited;
        set.disagreements += probe.disagreements;
        set.samples.extend(probe.mismatches);
    }
    set.samples.truncate(budget);
    Ok(set)
}

/// Parallel mismatch collection for a trained student model. Episodes run
/// concurrently on clones of the student; results are merged in plan order
/// and truncated at the budget, so the outcome is schedule-independent.
pub fn collect_mismatch_from_plans(
    student: &MlpModel,
    plans: &[EpisodePlan],
    mpc: &MpcConfig,
    budget: usize,
) -> Result<MismatchSet> {
    let outcomes: Vec<Result<MismatchSet>> = plans
        .par_iter()
        .map(|plan| {
            let mut policy = NeuralPolicy::new(student.clone());
            collect_mismatch_sequential(&mut policy, std::slice::from_ref(plan), mpc, usize::MAX)
        })
        .collect();
    let mut set = MismatchSet::default();
    for outcome in outcomes {
        let part = outcome?;
        set.visited += part.visited;
        set.disagreements += part.disagreements;
        set.diverged_episodes += part.diverged_episodes;
        set.samples.extend(part.samples);
    }
    set.samples.truncate(budget);
    Ok(set)
}

fn mixed_plans(n_episodes: usize, master_seed: u64, stream_base: u64) -> Vec<EpisodePlan> {
    const MIX: [ScenarioKind; 3] = [ScenarioKind::S1, ScenarioKind::S2, ScenarioKind::S3];
    (0..n_episodes)
        .map(|e| {
            let mut rng = seeding::stream_rng(master_seed, stream_base + e as u64);
            let kind = MIX[e % MIX.len()];
            let (scenario, params) = sample_scenario(kind, &mut rng);
            EpisodePlan { kind, scenario, plant: PlantParams::Boost(params) }
        })
        .collect()
}

/// Rolls the student through freshly sampled scenarios (cycling the three
/// families) and returns the expert-labeled disagreement set, capped at
/// `budget`.
pub fn collect_mismatch(
    student: &MlpModel,
    n_episodes: usize,
    budget: usize,
    mpc: &MpcConfig,
    seed: u64,
) -> Result<MismatchSet> {
    let plans = mixed_plans(n_episodes, seed, 0);
    collect_mismatch_from_plans(student, &plans, mpc, budget)
}

/// Per-iteration refinement statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaggerIterStats {
    pub iteration: usize,
    pub visited: usize,
    pub disagreements: usize,
    pub disagreement_rate: f64,
    /// Mismatch samples actually aggregated this iteration.
    pub kept: usize,
    pub aggregate_train_size: usize,
    pub diverged_episodes: usize,
    pub val_acc: f64,
}

/// Writes per-iteration statistics as CSV.
pub fn write_dagger_stats_csv<W: std::io::Write>(
    stats: &[DaggerIterStats],
    mut out: W,
) -> Result<()> {
    writeln!(
        out,
        "iteration,visited,disagreements,disagreement_rate,kept,aggregate_train_size,diverged_episodes,val_acc"
    )?;
    for s in stats {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.iteration,
            s.visited,
            s.disagreements,
            s.disagreement_rate,
            s.kept,
            s.aggregate_train_size,
            s.diverged_episodes,
            s.val_acc
        )?;
    }
    Ok(())
}

/// Full refinement: per iteration, collect disagreements on student-driven
/// rollouts, union them into the aggregate training set, recompute class
/// weights on the aggregate, and fine-tune.
///
/// The base dataset's training partition seeds the aggregate (the whole
/// dataset if no split is assigned); its validation partition is reused for
/// per-epoch validation. The student's feature normalizer is kept from
/// offline training — mismatch states are standardized with the same input
/// map the network was trained under.
pub fn run_dagger(
    student: &MlpModel,
    base: &Dataset,
    mpc: &MpcConfig,
    cfg: &DaggerConfig,
    train_template: &TrainConfig,
) -> Result<(MlpModel, Vec<DaggerIterStats>)> {
    if base.is_empty() {
        return Err(Error::Dataset("refinement needs a non-empty base dataset".into()));
    }
    let mut aggregate = base.split_samples(SplitTag::Train);
    if aggregate.is_empty() {
        aggregate = base.samples.clone();
    }
    let val = base.split_samples(SplitTag::Val);

    let mut model = student.clone();
    let mut stats = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let iter_budget =
            cfg.budget / cfg.iterations.max(1) + usize::from(iter < cfg.budget % cfg.iterations.max(1));
        let plans = mixed_plans(
            cfg.episodes_per_iter,
            cfg.seed,
            (iter * cfg.episodes_per_iter) as u64,
        );
        let mismatch = collect_mismatch_from_plans(&model, &plans, mpc, iter_budget)?;
        let kept = mismatch.samples.len();
        aggregate.extend_from_slice(&mismatch.samples);

        let weights = class_weights(&class_histogram(&aggregate))?;
        let tc = TrainConfig {
            epochs: cfg.fine_tune_epochs,
            class_weights: weights,
            seed: seeding::derive_seed(cfg.seed, 0xf17e + iter as u64),
            ..*train_template
        };
        train(&mut model, &aggregate, &val, &tc)?;
        let (_, val_acc) = evaluate(&model, &val, &[1.0; 4]);

        stats.push(DaggerIterStats {
            iteration: iter,
            visited: mismatch.visited,
            disagreements: mismatch.disagreements,
            disagreement_rate: mismatch.disagreement_rate(),
            kept,
            aggregate_train_size: aggregate.len(),
            diverged_episodes: mismatch.diverged_episodes,
            val_acc,
        });
    }
    Ok((model, stats))
}

/// On-policy disagreement rate of a student over a fixed evaluation set of
/// rollouts: the student drives, the expert grades every visited state.
pub fn disagreement_rate(
    student: &MlpModel,
    plans: &[EpisodePlan],
    mpc: &MpcConfig,
) -> Result<f64> {
    let set = collect_mismatch_from_plans(student, plans, mpc, usize::MAX)?;
    Ok(set.disagreement_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::converter::ConverterParams;
    use crate::dataset::{collect_with, split};
    use crate::mpc::ExpertPolicy;
    use crate::scenario::ScenarioConfig;

    fn mpc() -> MpcConfig {
        MpcConfig::for_output_ref(180.0)
    }

    fn tiny_plans(n: usize) -> Vec<EpisodePlan> {
        use crate::converter::PlantState;
        (0..n)
            .map(|i| {
                let mut scenario = ScenarioConfig::canonical_s1();
                scenario.duration = 0.004;
                scenario.events.clear();
                scenario.v_in0 = 110.0 + 5.0 * i as f64;
                // start below the operating point so the expert exercises
                // the fast-ramp mode as well as the balancing pair
                scenario.initial_state = Some(PlantState::new(2.0, 90.0, 170.0));
                EpisodePlan {
                    kind: ScenarioKind::S1,
                    scenario,
                    plant: PlantParams::Boost(ConverterParams::nominal()),
                }
            })
            .collect()
    }

    fn tiny_base_dataset() -> Dataset {
        let cfg = mpc();
        let mut ds =
            collect_with(&tiny_plans(4), 3, false, move |plan, _| ExpertPolicy::new(plan.plant, cfg))
                .unwrap();
        split(&mut ds, [0.5, 0.25, 0.25], 1).unwrap();
        ds
    }

    #[test]
    fn expert_as_student_produces_no_mismatches() {
        let plans = tiny_plans(2);
        let cfg = mpc();
        let mut expert = ExpertPolicy::new(plans[0].plant, cfg);
        let set = collect_mismatch_sequential(&mut expert, &plans, &cfg, usize::MAX).unwrap();
        assert!(set.samples.is_empty());
        assert_eq!(set.disagreements, 0);
        assert!(set.visited > 0);
    }

    #[test]
    fn zero_budget_collects_nothing() {
        let student = MlpModel::init(6, 8, 1);
        let set = collect_mismatch_from_plans(&student, &tiny_plans(2), &mpc(), 0).unwrap();
        assert!(set.samples.is_empty());
        // disagreements are still observed, just not kept
        assert!(set.visited > 0);
    }

    #[test]
    fn every_kept_sample_is_a_true_disagreement() {
        let student = MlpModel::init(6, 8, 5);
        let set = collect_mismatch_from_plans(&student, &tiny_plans(3), &mpc(), usize::MAX).unwrap();
        assert!(!set.samples.is_empty(), "an untrained student should disagree somewhere");
        for s in &set.samples {
            assert_ne!(student.predict_mode(&s.feature_vector()), s.label);
        }
    }

    #[test]
    fn parallel_collection_is_deterministic() {
        let student = MlpModel::init(6, 8, 5);
        let a = collect_mismatch_from_plans(&student, &tiny_plans(3), &mpc(), 50).unwrap();
        let b = collect_mismatch_from_plans(&student, &tiny_plans(3), &mpc(), 50).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.visited, b.visited);
    }

    #[test]
    fn zero_iterations_return_the_student_unchanged() {
        let base = tiny_base_dataset();
        let student = MlpModel::init(6, 8, 2);
        let cfg = DaggerConfig { iterations: 0, ..DaggerConfig::default() };
        let (out, stats) =
            run_dagger(&student, &base, &mpc(), &cfg, &TrainConfig::default()).unwrap();
        assert_eq!(out, student);
        assert!(stats.is_empty());
    }

    #[test]
    fn aggregate_grows_by_exactly_the_kept_mismatches() {
        let base = tiny_base_dataset();
        let student = MlpModel::init(6, 8, 2);
        let cfg = DaggerConfig {
            iterations: 2,
            episodes_per_iter: 1,
            budget: 40,
            fine_tune_epochs: 1,
            seed: 9,
        };
        let template = TrainConfig { batch_size: 64, learning_rate: 1e-3, ..TrainConfig::default() };
        let (_, stats) = run_dagger(&student, &base, &mpc(), &cfg, &template).unwrap();
        assert_eq!(stats.len(), 2);
        let base_train = base.split_samples(SplitTag::Train).len();
        let mut expected = base_train;
        for s in &stats {
            expected += s.kept;
            assert_eq!(s.aggregate_train_size, expected);
            assert!(s.kept <= 20, "per-iteration budget is half the total");
            assert!((0.0..=1.0).contains(&s.disagreement_rate));
        }
    }
}
