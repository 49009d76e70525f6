use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use groupface::group_margin::GROUP_COUNT;
use groupface::harness::report::{ensure_dir, read_text, METRICS_FILE, POLICY_FILE};
use groupface::harness::{
    emit_report, evaluate, generate_synthetic_dataset, prepare, run_margin_phase, stream_rng, write_atomic, AgeModel,
    Checkpoint, Dataset, FeatureMode, PolicyGrid, RunConfig, RunReport, Stream, Trainer, REPORT_SCHEMA,
};
use groupface::optim::OptimizerKind;
use groupface::rl_margin::{
    policy_agreement, tabular_q_iteration, train_agent, AgentConfig, DeviationSimulator, InterStatistic, MarginSpace,
};

const DATASET_FILE: &str = "dataset.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const LAST_GOOD_FILE: &str = "checkpoint_last_good.json";

#[derive(Parser, Debug)]
#[command(name = "groupface", version, about = "Imbalanced age estimation on synthetic patch graphs")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test dataset.
    GenData,
    /// Train the network, with margin phases unless disabled.
    Train {
        /// Use this dataset instead of generating one.
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Run one margin phase on a checkpoint (its config plus any flags), or
    /// train the agent on the deviation simulator when none is given.
    RlTrain {
        #[arg(long, value_name = "FILE", requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Re-emit the CSV files of a saved report and print its summary.
    Report {
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    train_samples: Option<usize>,
    #[arg(long, global = true)]
    test_samples: Option<usize>,
    #[arg(long, global = true)]
    min_age: Option<u32>,
    #[arg(long, global = true)]
    max_age: Option<u32>,
    /// Four comma-separated group shares.
    #[arg(long, global = true, value_parser = parse_four)]
    proportions: Option<[f64; GROUP_COUNT]>,
    #[arg(long, global = true, value_parser = parse_four)]
    test_proportions: Option<[f64; GROUP_COUNT]>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<FeatureMode>,
    #[arg(long, global = true)]
    nodes: Option<usize>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    grid_size: Option<usize>,
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    #[arg(long, global = true)]
    knn: Option<usize>,
    #[arg(long, global = true)]
    separation: Option<f64>,
    #[arg(long, global = true)]
    age_gradient: Option<f64>,
    #[arg(long, global = true)]
    noise: Option<f64>,

    #[arg(long, global = true)]
    hops: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    drop_ratio: Option<f64>,
    #[arg(long, global = true)]
    power_iteration: Option<bool>,
    #[arg(long, global = true)]
    power_iters: Option<usize>,
    #[arg(long, global = true)]
    power_theta: Option<f64>,
    #[arg(long, global = true)]
    ffn_mult: Option<usize>,
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Four comma-separated initial margins.
    #[arg(long, global = true, value_parser = parse_four)]
    margins: Option<[f64; GROUP_COUNT]>,
    #[arg(long, global = true)]
    lambda: Option<f64>,

    #[arg(long, global = true)]
    rl: Option<bool>,
    #[arg(long, global = true)]
    rl_every: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    margin_space: Option<Vec<f64>>,
    #[arg(long, global = true)]
    deviation_buckets: Option<usize>,
    #[arg(long, global = true, value_parser = parse_inter)]
    inter_statistic: Option<InterStatistic>,
    #[arg(long, global = true)]
    rl_episodes: Option<usize>,
    #[arg(long, global = true)]
    rl_episode_steps: Option<usize>,
    #[arg(long, global = true)]
    rl_hidden: Option<usize>,
    #[arg(long, global = true)]
    rl_learning_rate: Option<f64>,
    #[arg(long, global = true)]
    rollout_steps: Option<usize>,
    #[arg(long, global = true)]
    probe_steps: Option<usize>,
    #[arg(long, global = true)]
    probe_learning_rate: Option<f64>,
    #[arg(long, global = true)]
    probe_min_anchor: Option<usize>,

    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, global = true)]
    momentum: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    /// Gradient-norm clip; 0 disables clipping.
    #[arg(long, global = true)]
    clip_norm: Option<f64>,
}

fn parse_mode(s: &str) -> Result<FeatureMode, String> {
    match s {
        "vector" => Ok(FeatureMode::Vector),
        "grid" => Ok(FeatureMode::Grid),
        _ => Err(format!("expected vector or grid, got `{s}`")),
    }
}

fn parse_inter(s: &str) -> Result<InterStatistic, String> {
    match s {
        "literal" => Ok(InterStatistic::Literal),
        "center_distance" | "center-distance" => Ok(InterStatistic::CenterDistance),
        _ => Err(format!("expected literal or center-distance, got `{s}`")),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("expected sgd or adam, got `{s}`")),
    }
}

fn parse_four(text: &str) -> Result<[f64; GROUP_COUNT], String> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected {GROUP_COUNT} comma-separated values, got {}", v.len()))
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        let d = &mut c.data;
        set!(self.train_samples => d.train_samples);
        set!(self.test_samples => d.test_samples);
        set!(self.min_age => d.min_age);
        set!(self.max_age => d.max_age);
        set!(self.proportions => d.proportions);
        set!(self.test_proportions => d.test_proportions);
        set!(self.mode => d.mode);
        set!(self.nodes => d.nodes);
        set!(self.dim => d.dim);
        set!(self.grid_size => d.grid_size);
        set!(self.patch_size => d.patch_size);
        set!(self.knn => d.knn);
        set!(self.separation => d.separation);
        set!(self.age_gradient => d.age_gradient);
        set!(self.noise => d.noise);

        let m = &mut c.model;
        set!(self.hops => m.diffusion.hops);
        set!(self.heads => m.diffusion.heads);
        set!(self.layers => m.diffusion.layers);
        set!(self.drop_ratio => m.diffusion.drop_ratio);
        set!(self.power_iteration => m.diffusion.use_power_iteration);
        set!(self.power_iters => m.diffusion.power_iters);
        set!(self.power_theta => m.diffusion.power_theta);
        set!(self.ffn_mult => m.diffusion.ffn_mult);
        set!(self.scale => m.margins.scale);
        set!(self.margins => m.margins.margins);
        set!(self.lambda => m.lambda);

        let r = &mut c.rl;
        set!(self.rl => r.enabled);
        set!(self.rl_every => r.every);
        set!(self.gamma => r.gamma);
        set!(self.margin_space.clone().map(|values| MarginSpace { values }) => r.margin_space);
        set!(self.deviation_buckets => r.deviation_buckets);
        set!(self.inter_statistic => r.inter_statistic);
        set!(self.rl_episodes => r.episodes);
        set!(self.rl_episode_steps => r.episode_steps);
        set!(self.rl_hidden => r.hidden);
        set!(self.rl_learning_rate => r.learning_rate);
        set!(self.rollout_steps => r.rollout_steps);
        set!(self.probe_steps => r.probe_steps);
        set!(self.probe_learning_rate => r.probe_learning_rate);
        set!(self.probe_min_anchor => r.probe_min_anchor);

        let t = &mut c.train;
        set!(self.epochs => t.epochs);
        set!(self.batch_size => t.batch_size);
        set!(self.learning_rate => t.learning_rate);
        set!(self.optimizer => t.optimizer);
        set!(self.momentum => t.momentum);
        set!(self.weight_decay => t.weight_decay);
        set!(self.clip_norm.map(|v| (v > 0.0).then_some(v)) => t.clip_norm);
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_json(&read_text(path)?).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    set!(cli.seed => config.seed);
    cli.overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_json(&read_text(path)?).with_context(|| format!("loading {}", path.display()))
}

fn generate(config: &RunConfig) -> Result<Dataset> {
    Ok(generate_synthetic_dataset(&config.data, config.seed, &mut stream_rng(config.seed, Stream::Data))?)
}

fn counts_line(d: &Dataset) -> String {
    let c = Dataset::group_counts(&d.train);
    format!("{},{},{},{}", c[0], c[1], c[2], c[3])
}

fn print_metrics(prefix: &str, m: &groupface::metrics::MetricsReport) {
    let groups: Vec<String> = m
        .group_mae
        .iter()
        .map(|g| g.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()))
        .collect();
    println!(
        "{prefix} mae={:.4} sigma={:.4} aar={:.4} group_mae={}",
        m.mae,
        m.sigma,
        m.aar,
        groups.join(",")
    );
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out_dir.clone();
    match &cli.command {
        Command::GenData => {
            let config = load_config(&cli)?;
            let data = generate(&config)?;
            ensure_dir(&out)?;
            write_atomic(&out.join(DATASET_FILE), data.to_json().as_bytes())?;
            println!(
                "dataset digest={} train={} test={} counts={}",
                data.digest(),
                data.train.len(),
                data.test.len(),
                counts_line(&data)
            );
        }
        Command::Train { data } => {
            let config = load_config(&cli)?;
            let dataset = match data {
                Some(p) => load_dataset(p)?,
                None => generate(&config)?,
            };
            ensure_dir(&out)?;
            let mut trainer = Trainer::new(config, &dataset)?;
            let outcome = match trainer.run() {
                Ok(o) => o,
                Err(e) => {
                    if let Some(ck) = trainer.last_good() {
                        write_atomic(&out.join(LAST_GOOD_FILE), ck.to_json().as_bytes())?;
                        eprintln!("saved last good checkpoint at epoch {} to {}", ck.epoch, out.join(LAST_GOOD_FILE).display());
                    }
                    return Err(e.into());
                }
            };
            for e in &outcome.report.epochs {
                let groups: Vec<String> = e
                    .group_mae
                    .iter()
                    .map(|g| g.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()))
                    .collect();
                println!("epoch {} loss={:.4} mae={:.4} group_mae={}", e.epoch, e.loss, e.mae, groups.join(","));
            }
            write_atomic(&out.join(CHECKPOINT_FILE), outcome.checkpoint.to_json().as_bytes())?;
            emit_report(&outcome.report, &out)?;
            print_metrics("final", &outcome.report.metrics);
            println!("margins={:?}", outcome.report.final_margins);
        }
        Command::Eval { checkpoint, data } => {
            let ck = Checkpoint::from_json(&read_text(checkpoint)?)?;
            let dataset = match data {
                Some(p) => load_dataset(p)?,
                None => generate(&ck.config)?,
            };
            let model = AgeModel::new(&ck.config)?;
            let test = prepare(&dataset.test, &ck.config.data)?;
            let metrics = evaluate(&model, &ck.store()?, &test)?;
            ensure_dir(&out)?;
            let body = serde_json::to_string_pretty(&json!({ "schema": REPORT_SCHEMA, "metrics": metrics }))?;
            write_atomic(&out.join("eval.json"), body.as_bytes())?;
            write_atomic(&out.join(METRICS_FILE), metrics.to_csv(REPORT_SCHEMA).as_bytes())?;
            print_metrics("eval", &metrics);
        }
        Command::RlTrain { checkpoint, data } => {
            ensure_dir(&out)?;
            match (checkpoint, data) {
                (Some(ck_path), Some(data_path)) => {
                    let ck = Checkpoint::from_json(&read_text(ck_path)?)?;
                    let dataset = load_dataset(data_path)?;
                    // the checkpoint's config, with flags on top
                    let mut config = ck.config.clone();
                    set!(cli.seed => config.seed);
                    cli.overrides.apply(&mut config);
                    config.validate()?;
                    let model = AgeModel::new(&ck.config)?;
                    let store = ck.store()?;
                    let train = prepare(&dataset.train, &ck.config.data)?;
                    let embeddings = model.embed_all(&store, &train, 64)?;
                    let ages: Vec<u32> = train.iter().map(|s| s.age).collect();
                    let groups: Vec<usize> = train.iter().map(|s| s.group).collect();
                    let mut rng = stream_rng(config.seed, Stream::Agent);
                    let phase =
                        run_margin_phase(&model, &store, &ck.margins, &embeddings, &ages, &groups, &config.rl, ck.epoch, &mut rng)?;
                    let grid = PolicyGrid::new(&phase.space, &phase.policy)?;
                    let body = serde_json::to_string_pretty(&json!({ "schema": REPORT_SCHEMA, "phase": phase.log, "policy": grid }))?;
                    write_atomic(&out.join("rl_phase.json"), body.as_bytes())?;
                    write_atomic(&out.join(POLICY_FILE), grid.to_csv(REPORT_SCHEMA).as_bytes())?;
                    println!(
                        "margins_before={:?} margins_after={:?} oracle_agreement={:.4}",
                        phase.log.margins_before, phase.log.margins_after, phase.log.oracle_agreement
                    );
                }
                (None, _) => {
                    let config = load_config(&cli)?;
                    let mut sim = DeviationSimulator::default();
                    let agent_config = AgentConfig {
                        gamma: config.rl.gamma,
                        ..AgentConfig::default()
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    let agent = train_agent(&mut sim, &agent_config, &mut rng)?;
                    let oracle = tabular_q_iteration(&sim.to_tabular()?, config.rl.gamma, 1e-10, 100_000)?;
                    let agreement = policy_agreement(&agent.policy, &oracle, 1e-6)?;
                    let grid = PolicyGrid::new(&sim.space, &agent.policy)?;
                    write_atomic(&out.join(POLICY_FILE), grid.to_csv(REPORT_SCHEMA).as_bytes())?;
                    println!("simulator oracle_agreement={agreement:.4} updates={}", agent.updates);
                }
                (Some(_), None) => unreachable!("clap requires --data with --checkpoint"),
            }
        }
        Command::Report { report } => {
            let r = RunReport::from_json(&read_text(report)?)?;
            let written = emit_report(&r, &out)?;
            print_metrics("report", &r.metrics);
            println!("epochs={} phases={} margins={:?}", r.epochs.len(), r.phases.len(), r.final_margins);
            for p in written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

/// The error chain joined by `: `, skipping causes a message already
/// spells out.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(g) = e.downcast_ref::<groupface::Error>() {
        return g.kind();
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return "format";
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "internal"
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), &message(&e)),
    }
}
