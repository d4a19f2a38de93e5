//! Expert-labeled dataset generation, splits, class statistics, and the
//! binary dataset container.
//!
//! A dataset is the concatenation of closed-loop episodes: every control
//! period contributes one `(z, mode)` pair. Episodes keep their scenario
//! configuration and plant parameters in the metadata so any stored sample
//! can be relabeled by the expert under the exact plant it was generated
//! with — that replay is the label-consistency audit.
//!
//! On disk a dataset is a single file: a versioned header, a JSON metadata
//! blob, then fixed-width little-endian records of six `f32` features and
//! one label byte.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buck::BuckParams;
use crate::converter::{ConverterParams, Exogenous, PlantState, SwitchMode, SwitchedPlant};
use crate::mpc::{beam_decide, ExpertPolicy, FeatureVector, MpcConfig};
use crate::scenario::{
    run_episode, sample_scenario_with, DrRanges, ScenarioConfig, ScenarioKind, SwitchingPolicy,
    Trajectory,
};
use crate::seeding;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FCDS";
const FORMAT_VERSION: u32 = 1;
const RECORD_BYTES: usize = 6 * 4 + 1;

/// One labeled sample: the quantized feature vector and the mode the
/// labeling policy chose there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub z: [f32; 6],
    pub label: SwitchMode,
}

impl Sample {
    pub fn feature_vector(&self) -> FeatureVector {
        FeatureVector::from_f32(self.z)
    }
}

/// Plant parameters of either supported topology; episodes record which
/// plant produced them so replay uses matching dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PlantParams {
    Boost(ConverterParams),
    Buck(BuckParams),
}

impl SwitchedPlant for PlantParams {
    fn step_mode(&self, x: &PlantState, w: &Exogenous, m: SwitchMode) -> PlantState {
        match self {
            PlantParams::Boost(p) => p.step_mode(x, w, m),
            PlantParams::Buck(p) => p.step_mode(x, w, m),
        }
    }

    fn ts(&self) -> f64 {
        match self {
            PlantParams::Boost(p) => p.ts(),
            PlantParams::Buck(p) => p.ts(),
        }
    }

    fn i_safe(&self) -> (f64, f64) {
        match self {
            PlantParams::Boost(p) => p.i_safe(),
            PlantParams::Buck(p) => p.i_safe(),
        }
    }

    fn steady_state(&self, v_ref: f64, v_in: f64, r: f64) -> PlantState {
        match self {
            PlantParams::Boost(p) => p.steady_state(v_ref, v_in, r),
            PlantParams::Buck(p) => p.steady_state(v_ref, v_in, r),
        }
    }
}

/// Partition tag assigned by [`split`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
}

/// Provenance of one episode inside a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub index: usize,
    pub kind: ScenarioKind,
    /// Seed stream the episode's scenario and labeler were derived from.
    pub seed: u64,
    pub plant: PlantParams,
    pub scenario: ScenarioConfig,
    pub sample_start: usize,
    pub sample_len: usize,
    pub split: Option<SplitTag>,
    /// Step at which the episode was cut short, if it diverged.
    pub diverged_at: Option<usize>,
}

/// Sample counts per scenario subset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub nom: usize,
    pub op: usize,
    pub par: usize,
}

impl SubsetCounts {
    pub fn total(&self) -> usize {
        self.nom + self.op + self.par
    }
}

/// Dataset-level statistics and per-episode provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub master_seed: u64,
    pub subset_counts: SubsetCounts,
    pub class_hist: [u64; 4],
    /// Per-feature mean of the training partition (whole set before a
    /// split is assigned).
    pub feature_mean: [f64; 6],
    /// Per-feature standard deviation; degenerate features are clamped to
    /// one so normalization never divides by zero.
    pub feature_std: [f64; 6],
    pub split_sizes: [usize; 3],
    pub dropped_episodes: usize,
    pub episodes: Vec<EpisodeMeta>,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            master_seed: 0,
            subset_counts: SubsetCounts::default(),
            class_hist: [0; 4],
            feature_mean: [0.0; 6],
            feature_std: [1.0; 6],
            split_sizes: [0; 3],
            dropped_episodes: 0,
            episodes: Vec::new(),
        }
    }
}

/// In-memory dataset: flat sample array plus metadata.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

/// Class histogram over the four modes.
pub fn class_histogram(samples: &[Sample]) -> [u64; 4] {
    let mut hist = [0u64; 4];
    for s in samples {
        hist[s.label.index()] += 1;
    }
    hist
}

/// Inverse-frequency class weights `α_c = total / (4·count_c)`. The
/// frequency-weighted mean of the weights is one by construction.
pub fn class_weights(hist: &[u64; 4]) -> Result<[f64; 4]> {
    let total: u64 = hist.iter().sum();
    let mut weights = [0.0; 4];
    for (c, (&count, w)) in hist.iter().zip(weights.iter_mut()).enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass { class: c });
        }
        *w = total as f64 / (4.0 * count as f64);
    }
    Ok(weights)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices of one partition, in storage order.
    pub fn split_indices(&self, tag: SplitTag) -> Vec<usize> {
        let mut idx = Vec::new();
        for ep in &self.meta.episodes {
            if ep.split == Some(tag) {
                idx.extend(ep.sample_start..ep.sample_start + ep.sample_len);
            }
        }
        idx
    }

    /// Copies of one partition's samples, in storage order.
    pub fn split_samples(&self, tag: SplitTag) -> Vec<Sample> {
        self.split_indices(tag).into_iter().map(|i| self.samples[i]).collect()
    }

    /// Episode owning a sample index.
    pub fn episode_of(&self, sample_idx: usize) -> Option<&EpisodeMeta> {
        self.meta
            .episodes
            .iter()
            .find(|ep| sample_idx >= ep.sample_start && sample_idx < ep.sample_start + ep.sample_len)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        let meta = serde_json::to_vec(&self.meta)?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        for s in &self.samples {
            for v in s.z {
                out.write_all(&v.to_le_bytes())?;
            }
            out.write_all(&[s.label.index() as u8])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        let mut input = BufReader::new(file);

        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Dataset(format!("{}: not a dataset file", path.display())));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let n_samples = u64::from_le_bytes(u64buf) as usize;
        input.read_exact(&mut u64buf)?;
        let meta_len = u64::from_le_bytes(u64buf) as usize;

        let mut meta_bytes = vec![0u8; meta_len];
        input.read_exact(&mut meta_bytes)?;
        let meta: DatasetMeta = serde_json::from_slice(&meta_bytes)?;

        let mut samples = Vec::with_capacity(n_samples);
        let mut record = [0u8; RECORD_BYTES];
        for i in 0..n_samples {
            input.read_exact(&mut record)?;
            let mut z = [0f32; 6];
            for (j, v) in z.iter_mut().enumerate() {
                *v = f32::from_le_bytes(record[4 * j..4 * j + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Dataset(format!("non-finite feature in record {i}")));
                }
            }
            let label = SwitchMode::from_index(record[24] as usize)
                .ok_or_else(|| Error::Dataset(format!("invalid label byte in record {i}")))?;
            samples.push(Sample { z, label });
        }
        Ok(Dataset { samples, meta })
    }

    /// Plain-text export for inspection.
    pub fn export_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i_L,v_Cf,v_o,i_ref,V_in,i_o,label")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.z[0], s.z[1], s.z[2], s.z[3], s.z[4], s.z[5], s.label
            )?;
        }
        Ok(())
    }
}

/// One planned episode: scenario plus the plant it runs on.
#[derive(Clone, Debug)]
pub struct EpisodePlan {
    pub kind: ScenarioKind,
    pub scenario: ScenarioConfig,
    pub plant: PlantParams,
}

fn trajectory_samples(traj: &Trajectory) -> Vec<Sample> {
    traj.records
        .iter()
        .map(|r| Sample {
            z: FeatureVector::from_parts(&r.state, &r.w, r.i_ref).to_f32(),
            label: r.mode,
        })
        .collect()
}

/// Runs every planned episode under a per-episode policy and assembles the
/// dataset. Episodes execute in parallel with seeds derived per index, so
/// the result is independent of scheduling.
///
/// When `keep_diverged_prefix` is false, diverged episodes are dropped and
/// only counted; when true their recorded prefix is kept (used for
/// deliberately unstable labelers).
pub fn collect_with<S, F>(
    plans: &[EpisodePlan],
    master_seed: u64,
    keep_diverged_prefix: bool,
    make_policy: F,
) -> Result<Dataset>
where
    S: SwitchingPolicy,
    F: Fn(&EpisodePlan, u64) -> S + Sync,
{
    struct EpisodeOutcome {
        samples: Vec<Sample>,
        kind: ScenarioKind,
        seed: u64,
        plant: PlantParams,
        scenario: ScenarioConfig,
        diverged_at: Option<usize>,
    }

    let outcomes: Vec<Result<EpisodeOutcome>> = plans
        .par_iter()
        .enumerate()
        .map(|(idx, plan)| {
            let episode_seed = seeding::derive_seed(master_seed, idx as u64);
            let mut policy = make_policy(plan, episode_seed);
            let (traj, diverged_at) = match run_episode(&plan.scenario, &mut policy, &plan.plant) {
                Ok(traj) => (traj, None),
                Err(Error::Diverged { step, partial }) => (*partial, Some(step)),
                Err(other) => return Err(other),
            };
            Ok(EpisodeOutcome {
                samples: trajectory_samples(&traj),
                kind: plan.kind,
                seed: episode_seed,
                plant: plan.plant,
                scenario: plan.scenario.clone(),
                diverged_at,
            })
        })
        .collect();

    let mut dataset = Dataset { meta: DatasetMeta { master_seed, ..Default::default() }, ..Default::default() };
    let mut episode_index = 0usize;
    for outcome in outcomes {
        let ep = outcome?;
        if ep.diverged_at.is_some() && !keep_diverged_prefix {
            dataset.meta.dropped_episodes += 1;
            continue;
        }
        let start = dataset.samples.len();
        dataset.samples.extend_from_slice(&ep.samples);
        match ep.kind {
            ScenarioKind::S1 => dataset.meta.subset_counts.nom += ep.samples.len(),
            ScenarioKind::S2 => dataset.meta.subset_counts.op += ep.samples.len(),
            ScenarioKind::S3 => dataset.meta.subset_counts.par += ep.samples.len(),
        }
        dataset.meta.episodes.push(EpisodeMeta {
            index: episode_index,
            kind: ep.kind,
            seed: ep.seed,
            plant: ep.plant,
            scenario: ep.scenario,
            sample_start: start,
            sample_len: ep.samples.len(),
            split: None,
            diverged_at: ep.diverged_at,
        });
        episode_index += 1;
    }
    dataset.meta.class_hist = class_histogram(&dataset.samples);
    Ok(dataset)
}

/// Episode counts per scenario subset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetEpisodes {
    pub nom: usize,
    pub op: usize,
    pub par: usize,
}

impl SubsetEpisodes {
    pub fn total(&self) -> usize {
        self.nom + self.op + self.par
    }
}

/// Builds the episode plans for a boost-converter collection run: `nom`
/// nominal episodes, then `op` operating-point-randomized, then `par`
/// component-perturbed ones, each sampled from its own derived seed stream.
pub fn plan_boost_episodes(
    episodes: SubsetEpisodes,
    ranges: &DrRanges,
    master_seed: u64,
) -> Vec<EpisodePlan> {
    let kinds = [
        (ScenarioKind::S1, episodes.nom),
        (ScenarioKind::S2, episodes.op),
        (ScenarioKind::S3, episodes.par),
    ];
    let mut plans = Vec::new();
    let mut stream = 0u64;
    for (kind, count) in kinds {
        for _ in 0..count {
            let mut rng = seeding::stream_rng(master_seed, stream);
            stream += 1;
            let (scenario, params) = sample_scenario_with(kind, ranges, &mut rng);
            plans.push(EpisodePlan { kind, scenario, plant: PlantParams::Boost(params) });
        }
    }
    plans
}

/// Collects an expert-labeled, domain-randomized dataset: the requested
/// number of closed-loop episodes per subset, each driven and labeled by the
/// beam-search expert.
pub fn collect_expert_dataset(
    episodes: SubsetEpisodes,
    mpc: &MpcConfig,
    seed: u64,
) -> Result<Dataset> {
    collect_expert_dataset_with(&DrRanges::nominal(), episodes, mpc, seed)
}

/// [`collect_expert_dataset`] with explicit randomization ranges.
pub fn collect_expert_dataset_with(
    ranges: &DrRanges,
    episodes: SubsetEpisodes,
    mpc: &MpcConfig,
    seed: u64,
) -> Result<Dataset> {
    let plans = plan_boost_episodes(episodes, ranges, seed);
    let mpc = *mpc;
    collect_with(&plans, seed, false, move |plan, _| ExpertPolicy::new(plan.plant, mpc))
}

/// Assigns an episode-disjoint split. Whole episodes go to one partition so
/// that temporally adjacent samples never leak across partitions; episodes
/// are dealt greedily (largest remaining sample deficit first) after a
/// seeded shuffle. Also fixes the dataset's normalization statistics from
/// the training partition.
pub fn split(dataset: &mut Dataset, fractions: [f64; 3], seed: u64) -> Result<()> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::InvalidConfig("split fractions must be non-negative".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions must sum to 1, got {sum}")));
    }
    if dataset.len() < 3 {
        return Err(Error::Dataset(format!(
            "{} samples is too small to split; need at least 3",
            dataset.len()
        )));
    }

    let total = dataset.len() as f64;
    let mut order: Vec<usize> = (0..dataset.meta.episodes.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut seeding::stream_rng(seed, 0x5117));

    let mut assigned = [0usize; 3];
    for ep_idx in order {
        let len = dataset.meta.episodes[ep_idx].sample_len;
        let mut best: Option<(usize, f64)> = None;
        for (slot, &frac) in fractions.iter().enumerate() {
            if frac == 0.0 {
                continue;
            }
            let deficit = frac * total - assigned[slot] as f64;
            if best.map_or(true, |(_, d)| deficit > d) {
                best = Some((slot, deficit));
            }
        }
        let (slot, _) = best.expect("fractions sum to 1, so at least one is positive");
        assigned[slot] += len;
        dataset.meta.episodes[ep_idx].split = Some(SplitTag::ALL[slot]);
    }
    dataset.meta.split_sizes = assigned;

    // Normalization statistics come from the training partition so held-out
    // data never influences the input map.
    let train_idx = dataset.split_indices(SplitTag::Train);
    let stats_over: Vec<usize> =
        if train_idx.is_empty() { (0..dataset.len()).collect() } else { train_idx };
    let n = stats_over.len() as f64;
    let mut mean = [0.0f64; 6];
    for &i in &stats_over {
        for (m, &v) in mean.iter_mut().zip(dataset.samples[i].z.iter()) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = [0.0f64; 6];
    for &i in &stats_over {
        for (j, &v) in dataset.samples[i].z.iter().enumerate() {
            let d = v as f64 - mean[j];
            var[j] += d * d;
        }
    }
    let mut std = [0.0f64; 6];
    for (s, v) in std.iter_mut().zip(var.iter()) {
        let raw = (v / n).sqrt();
        *s = if raw < 1e-9 { 1.0 } else { raw };
    }
    dataset.meta.feature_mean = mean;
    dataset.meta.feature_std = std;
    Ok(())
}

/// Shortens a dataset to at most `n` samples, trimming or dropping trailing
/// episodes and refreshing the derived statistics. Splits are cleared.
pub fn truncate(dataset: &mut Dataset, n: usize) {
    if dataset.len() <= n {
        return;
    }
    dataset.samples.truncate(n);
    dataset.meta.episodes.retain_mut(|ep| {
        if ep.sample_start >= n {
            return false;
        }
        ep.sample_len = ep.sample_len.min(n - ep.sample_start);
        ep.split = None;
        true
    });
    let mut counts = SubsetCounts::default();
    for ep in &dataset.meta.episodes {
        match ep.kind {
            ScenarioKind::S1 => counts.nom += ep.sample_len,
            ScenarioKind::S2 => counts.op += ep.sample_len,
            ScenarioKind::S3 => counts.par += ep.sample_len,
        }
    }
    dataset.meta.subset_counts = counts;
    dataset.meta.class_hist = class_histogram(&dataset.samples);
    dataset.meta.split_sizes = [0; 3];
}

/// Result of a label-consistency audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    pub mismatches: usize,
}

/// Replays a random subsample of stored features through the expert under
/// each sample's recorded plant and compares the decision to the stored
/// label. Expert-labeled datasets must come back clean.
pub fn label_audit(
    dataset: &Dataset,
    fraction: f64,
    mpc: &MpcConfig,
    seed: u64,
) -> Result<AuditReport> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig("audit fraction must be in [0, 1]".into()));
    }
    let mut rng = seeding::stream_rng(seed, 0xa0d1);
    let n_check = ((dataset.len() as f64 * fraction).ceil() as usize).min(dataset.len());
    let mut mismatches = 0usize;
    use rand::Rng;
    for _ in 0..n_check {
        let idx = rng.random_range(0..dataset.len());
        let sample = &dataset.samples[idx];
        let ep = dataset
            .episode_of(idx)
            .ok_or_else(|| Error::Dataset("sample without episode metadata".into()))?;
        let (mode, _) = beam_decide(&sample.feature_vector(), &ep.plant, mpc);
        if mode != sample.label {
            mismatches += 1;
        }
    }
    Ok(AuditReport { checked: n_check, mismatches })
}
