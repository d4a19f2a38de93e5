//! Command-line harness: dataset generation, training, refinement,
//! evaluation, ablations, sweeps, latency benchmarking, and the
//! cross-topology transfer experiment.
//!
//! Every subcommand reads the structured run configuration (TOML, all
//! sections optional) and applies the flags given on the command line on
//! top of it. Outputs land in a run directory: configs, models, datasets,
//! CSV tables, JSON reports, and trajectory dumps.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fcdistill::buck::run_transfer_experiment;
use fcdistill::dagger::{run_dagger, write_dagger_stats_csv};
use fcdistill::dataset::{
    class_histogram, class_weights, collect_expert_dataset_with, label_audit, split, Dataset,
    SplitTag,
};
use fcdistill::experiments::{
    bench_decision_time, build_id, run_ablation, run_scenario_suite, run_sweep,
    write_suite_outputs, AblationId, RunConfig, RunContext, SweepAxis,
};
use fcdistill::policy::{train, write_history_csv, MlpModel, Normalizer};
use fcdistill::scenario::DrRanges;

#[derive(Parser)]
#[command(
    name = "fcdistill",
    version,
    about = "Converter simulation, predictive switching control, and neural policy distillation"
)]
struct Cli {
    /// Structured run configuration (TOML). Missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory for outputs.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert-labeled, domain-randomized dataset.
    GenData(GenDataArgs),
    /// Train the switching classifier on a dataset.
    Train(TrainArgs),
    /// Refine a trained model with disagreement-filtered relabeling.
    Dagger(DaggerArgs),
    /// Run the closed-loop scenario suite for a trained model.
    Eval(EvalArgs),
    /// Run the training-pipeline ablation grid.
    Ablate(AblateArgs),
    /// Run a sensitivity sweep over a refinement or randomization axis.
    Sweep(SweepArgs),
    /// Benchmark per-decision latency of the expert and the model.
    Bench(BenchArgs),
    /// Run the cross-topology transfer experiment.
    Transfer(TransferArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset path.
    #[arg(long, default_value = "dataset.fcds")]
    data: PathBuf,
    /// Nominal episodes.
    #[arg(long)]
    nom: Option<usize>,
    /// Operating-point-randomized episodes.
    #[arg(long)]
    op: Option<usize>,
    /// Component-perturbed episodes.
    #[arg(long)]
    par: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Randomization-range intensity (1.0 = full ranges).
    #[arg(long)]
    dr_intensity: Option<f64>,
    /// Also export the samples as CSV next to the dataset.
    #[arg(long)]
    csv: bool,
    /// Replay this fraction of samples through the expert as an audit.
    #[arg(long)]
    audit: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output model path.
    #[arg(long, default_value = "policy.fcnn")]
    model: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training-history CSV path.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct DaggerArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output model path.
    #[arg(long, default_value = "policy_refined.fcnn")]
    out_model: PathBuf,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    episodes_per_iter: Option<usize>,
    #[arg(long)]
    fine_tune_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-iteration statistics CSV path.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    /// Arms to run (default: all four).
    #[arg(long, value_delimiter = ',')]
    configs: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_rollouts: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Swept axis: dagger_budget or dr_intensity.
    #[arg(long)]
    axis: Option<String>,
    /// Grid values (default: the axis default grid).
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Seeds (default: from the run configuration).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Model to time; a freshly initialized one is used when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TransferArgs {
    /// Seeds for the repeated protocol runs.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long)]
    target_epochs: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;

    match &cli.command {
        Command::GenData(args) => {
            if let Some(v) = args.nom {
                cfg.gen.episodes.nom = v;
            }
            if let Some(v) = args.op {
                cfg.gen.episodes.op = v;
            }
            if let Some(v) = args.par {
                cfg.gen.episodes.par = v;
            }
            if let Some(v) = args.seed {
                cfg.gen.seed = v;
            }
            if let Some(v) = args.dr_intensity {
                cfg.gen.dr_intensity = v;
            }
            let ranges = DrRanges::scaled(cfg.gen.dr_intensity);
            let mut ds =
                collect_expert_dataset_with(&ranges, cfg.gen.episodes, &cfg.mpc, cfg.gen.seed)?;
            split(&mut ds, cfg.gen.split, cfg.gen.seed)?;
            ds.write_file(&args.data)?;
            println!(
                "wrote {} samples ({} episodes, {} dropped) to {}",
                ds.len(),
                ds.meta.episodes.len(),
                ds.meta.dropped_episodes,
                args.data.display()
            );
            println!("class histogram: {:?}", ds.meta.class_hist);
            if args.csv {
                let csv_path = args.data.with_extension("csv");
                let file = std::fs::File::create(&csv_path)?;
                ds.export_csv(std::io::BufWriter::new(file))?;
                println!("csv export: {}", csv_path.display());
            }
            if let Some(fraction) = args.audit {
                let report = label_audit(&ds, fraction, &cfg.mpc, cfg.gen.seed)?;
                println!("label audit: {}/{} mismatches", report.mismatches, report.checked);
            }
        }

        Command::Train(args) => {
            let ds = Dataset::read_file(&args.data)?;
            let mut tc = cfg.train;
            if let Some(v) = args.epochs {
                tc.epochs = v;
            }
            if let Some(v) = args.batch_size {
                tc.batch_size = v;
            }
            if let Some(v) = args.learning_rate {
                tc.learning_rate = v;
            }
            if let Some(v) = args.seed {
                tc.seed = v;
            }
            let train_set = ds.split_samples(SplitTag::Train);
            let val_set = ds.split_samples(SplitTag::Val);
            tc.class_weights = class_weights(&class_histogram(&train_set))?;
            let mut model = MlpModel::standard(tc.seed);
            model.normalizer =
                Normalizer::from_stats(&ds.meta.feature_mean, &ds.meta.feature_std);
            let history = train(&mut model, &train_set, &val_set, &tc)?;
            model.save_file(&args.model)?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} epochs: train acc {:.4}, val acc {:.4}",
                    history.len(),
                    last.train_acc,
                    last.val_acc
                );
            }
            println!("model: {}", args.model.display());
            if let Some(path) = &args.history {
                let file = std::fs::File::create(path)?;
                write_history_csv(&history, std::io::BufWriter::new(file))?;
                println!("history: {}", path.display());
            }
        }

        Command::Dagger(args) => {
            let model = MlpModel::load_file(&args.model)?;
            let ds = Dataset::read_file(&args.data)?;
            let mut dc = cfg.dagger;
            if let Some(v) = args.budget {
                dc.budget = v;
            }
            if let Some(v) = args.iterations {
                dc.iterations = v;
            }
            if let Some(v) = args.episodes_per_iter {
                dc.episodes_per_iter = v;
            }
            if let Some(v) = args.fine_tune_epochs {
                dc.fine_tune_epochs = v;
            }
            if let Some(v) = args.seed {
                dc.seed = v;
            }
            let (refined, stats) = run_dagger(&model, &ds, &cfg.mpc, &dc, &cfg.train)?;
            refined.save_file(&args.out_model)?;
            for s in &stats {
                println!(
                    "iteration {}: {}/{} disagreements ({:.2}%), kept {}, aggregate {}",
                    s.iteration,
                    s.disagreements,
                    s.visited,
                    100.0 * s.disagreement_rate,
                    s.kept,
                    s.aggregate_train_size
                );
            }
            println!("refined model: {}", args.out_model.display());
            if let Some(path) = &args.stats {
                let file = std::fs::File::create(path)?;
                write_dagger_stats_csv(&stats, std::io::BufWriter::new(file))?;
            }
        }

        Command::Eval(args) => {
            let model = MlpModel::load_file(&args.model)?;
            let mut sc = cfg.suite;
            if let Some(v) = args.rollouts {
                sc.rollouts = v;
            }
            if let Some(v) = args.seed {
                sc.seed = v;
            }
            let ctx = RunContext::new(&cli.out, sc.seed)?;
            cfg.save(&ctx.path("configs", "run.toml"))?;
            let rows = run_scenario_suite(&model, &cfg.mpc, &sc)?;
            for row in &rows {
                ctx.write_json(
                    &format!("eval_{}_{}_{}.json", row.scenario.label(), row.controller, row.rollout),
                    &row.metrics,
                )?;
            }
            write_suite_outputs(&ctx, &rows)?;

            // representative nominal-timeline trajectory dumps for both
            // controllers; a diverged rollout still dumps its prefix
            use fcdistill::mpc::ExpertPolicy;
            use fcdistill::policy::NeuralPolicy;
            use fcdistill::scenario::{run_episode, ScenarioConfig, SwitchingPolicy};
            let plant = cfg.converter;
            let s1 = ScenarioConfig::canonical_s1();
            s1.save(&ctx.path("configs", "s1_canonical.toml"))?;
            let dump = |policy: &mut dyn SwitchingPolicy, name: &str| -> Result<()> {
                let traj = match run_episode(&s1, policy, &plant) {
                    Ok(t) => t,
                    Err(fcdistill::Error::Diverged { step, partial }) => {
                        eprintln!("note: {name} rollout diverged at step {step}; dumping prefix");
                        *partial
                    }
                    Err(e) => return Err(e.into()),
                };
                traj.save_csv(&ctx.path("trajectories", &format!("{name}.csv")))?;
                Ok(())
            };
            dump(&mut ExpertPolicy::new(plant, cfg.mpc), "s1_mpc")?;
            dump(&mut NeuralPolicy::new(model), "s1_ann")?;
            println!("{} rollouts graded; outputs under {}", rows.len(), ctx.out_dir.display());
        }

        Command::Ablate(args) => {
            let mut ac = cfg.ablation.clone();
            ac.train = cfg.train;
            ac.dagger = cfg.dagger;
            if let Some(v) = args.seed {
                ac.seed = v;
            }
            if let Some(v) = args.eval_rollouts {
                ac.eval_rollouts = v;
            }
            let grid: Vec<AblationId> = if args.configs.is_empty() {
                AblationId::ALL.to_vec()
            } else {
                args.configs
                    .iter()
                    .map(|s| {
                        AblationId::parse(s)
                            .with_context(|| format!("unknown ablation config {s:?}"))
                    })
                    .collect::<Result<_>>()?
            };
            let ctx = RunContext::new(&cli.out, ac.seed)?;
            cfg.save(&ctx.path("configs", "run.toml"))?;
            let rows = run_ablation(&grid, &ac, &cfg.mpc, Some(&ctx))?;
            for id in &grid {
                let label = id.label();
                let vo: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.config == label)
                    .map(|r| r.metrics.mse_vo)
                    .collect();
                let viol: u64 = rows
                    .iter()
                    .filter(|r| r.config == label)
                    .map(|r| r.metrics.n_il_viol)
                    .sum();
                let mean_vo = vo.iter().sum::<f64>() / vo.len().max(1) as f64;
                println!("{label}: mean mse_vo {mean_vo:.4}, total violations {viol}");
            }
            println!("tables under {}", ctx.out_dir.display());
        }

        Command::Sweep(args) => {
            let mut spec = cfg.sweep.clone();
            spec.base_train = cfg.train;
            if let Some(axis) = &args.axis {
                spec.axis = match axis.as_str() {
                    "dagger_budget" => SweepAxis::DaggerBudget,
                    "dr_intensity" => SweepAxis::DrIntensity,
                    other => anyhow::bail!("unknown sweep axis {other:?}"),
                };
            }
            if !args.grid.is_empty() {
                spec.grid = args.grid.clone();
            }
            if !args.seeds.is_empty() {
                spec.seeds = args.seeds.clone();
            }
            let ctx = RunContext::new(&cli.out, spec.eval_seed)?;
            cfg.save(&ctx.path("configs", "run.toml"))?;
            let rows = run_sweep(&spec, &cfg.mpc, Some(&ctx))?;
            println!("{} graded rollouts across the grid; tables under {}", rows.len(), ctx.out_dir.display());
        }

        Command::Bench(args) => {
            let model = match &args.model {
                Some(path) => MlpModel::load_file(path)?,
                None => MlpModel::standard(0),
            };
            let n = args.n.unwrap_or(cfg.bench.n);
            let seed = args.seed.unwrap_or(cfg.bench.seed);
            let report = bench_decision_time(&cfg.mpc, &model, n, seed)?;
            println!(
                "expert {:.2} µs/decision, ann {:.2} µs/decision, speedup {:.1}x (n = {}, build {})",
                report.expert_us,
                report.ann_us,
                report.speedup,
                report.n,
                build_id()
            );
        }

        Command::Transfer(args) => {
            let mut tc = cfg.transfer;
            if let Some(v) = args.target_epochs {
                tc.target_epochs = v;
            }
            let ctx = RunContext::new(&cli.out, tc.seed)?;
            cfg.save(&ctx.path("configs", "run.toml"))?;
            let report = run_transfer_experiment(&tc, &args.seeds)?;
            ctx.write_json("transfer.json", &report)?;
            for run in &report.runs {
                println!(
                    "seed {}: source acc {:.4}, scratch acc {:.4}, transfer acc {:.4}",
                    run.seed, run.source_test_acc, run.scratch_acc, run.transfer_acc
                );
            }
            println!("report under {}", ctx.out_dir.display());
        }
    }
    Ok(())
}
