use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uplift_rank::config::{Policy, RunConfig};
use uplift_rank::data::write_interactions;
use uplift_rank::pipeline::{run_pipeline, sweep, Pipeline, PipelineOutcome};
use uplift_rank::synth::{simulate_logs, to_records, LoggingPolicy, SyntheticWorld};
use uplift_rank::Result;

/// Treatment-aware re-planning of top-N recommendation lists.
#[derive(Parser)]
#[command(name = "uplift-rank", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus command-line overrides mirroring its keys.
#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file
    #[arg(long, short)]
    config: PathBuf,
    /// Reuse persisted artifacts; refuse if their config hash changed
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "C")]
    c: Option<f64>,
    #[arg(long = "K")]
    k: Option<f64>,
    #[arg(long = "K_p")]
    k_p: Option<f64>,
    #[arg(long = "K_s")]
    k_s: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    v_p: Option<f64>,
    #[arg(long)]
    v_a: Option<f64>,
    #[arg(long)]
    v_m: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta_t: Option<f64>,
    #[arg(long = "N")]
    n: Option<f64>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Accept hyperparameters outside the documented search ranges
    #[arg(long)]
    allow_out_of_range: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if self.allow_out_of_range {
            config.run.allow_out_of_range = true;
        }
        let overrides: [(&str, Option<f64>); 13] = [
            ("lambda", self.lambda),
            ("C", self.c),
            ("K", self.k),
            ("K_p", self.k_p),
            ("K_s", self.k_s),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
            ("v_p", self.v_p),
            ("v_a", self.v_a),
            ("v_m", self.v_m),
            ("alpha", self.alpha),
            ("delta_t", self.delta_t),
            ("N", self.n),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config.set_hyper(key, v)?;
            }
        }
        if let Some(policy) = self.policy {
            config.run.policy = policy;
        }
        if let Some(seed) = self.seed {
            config.run.seed = seed;
        }
        if let Some(out_dir) = &self.out_dir {
            config.run.out_dir = out_dir.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write the metric report
    Pipeline(ConfigArgs),
    /// Train the factorization backend (and its pseudo-users)
    Train(ConfigArgs),
    /// Cluster item embeddings into treatment categories
    Cluster(ConfigArgs),
    /// Carve (history, treatment, outcome) samples from the training trails
    Augment(ConfigArgs),
    /// Estimate per-user propensity, dose-response, and marginal effects
    Estimate {
        #[command(flatten)]
        args: ConfigArgs,
        /// Print this user's matrices to stdout
        #[arg(long)]
        show_user: Option<u64>,
    },
    /// Build recommendation lists under the configured policy
    Plan(ConfigArgs),
    /// Score persisted recommendations against the held-out split
    Evaluate(ConfigArgs),
    /// Run one pipeline per value of a single hyperparameter
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        /// Hyperparameter to sweep (config key name, e.g. gamma or K_s)
        #[arg(long)]
        param: String,
        /// Comma-separated grid values
        #[arg(long)]
        values: String,
    },
    /// Generate a synthetic dataset with known dose-response curves
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for the dataset files
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 290)]
    users: usize,
    #[arg(long, default_value_t = 3)]
    categories: usize,
    #[arg(long, default_value_t = 100)]
    items_per_category: usize,
    /// Confounding strength of the training log in [0,1); 0 logs uniformly
    #[arg(long, default_value_t = 0.7)]
    strength: f64,
    /// Windows per user in the biased training log
    #[arg(long, default_value_t = 6)]
    train_windows: usize,
    /// Uniformly-logged windows per user in the unbiased part
    #[arg(long, default_value_t = 2)]
    test_windows: usize,
    #[arg(long, default_value_t = 10)]
    window_len: usize,
    /// Slot grid the logging policy draws compositions on
    #[arg(long, default_value_t = 5)]
    slots: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// World shape: `hidden-interest` (confounded feedback loop) or `homogeneous`
    #[arg(long, default_value = "hidden-interest")]
    world: String,
}

fn print_outcome(outcome: &PipelineOutcome, cutoffs: &[usize]) {
    print!("{}", outcome.report.render_table(cutoffs));
    let cached: Vec<&str> = outcome
        .stages
        .iter()
        .filter(|s| s.cached)
        .map(|s| s.name.as_str())
        .collect();
    if !cached.is_empty() {
        println!("stages loaded from cache: {}", cached.join(", "));
    }
    println!("artifacts in {}", outcome.out_dir.display());
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let world = match args.world.as_str() {
        "homogeneous" => SyntheticWorld::homogeneous(
            args.categories,
            args.items_per_category,
            args.users,
            0.5,
            0.7,
            1.0,
            args.seed,
        ),
        "hidden-interest" => SyntheticWorld::hidden_interest(
            args.categories,
            args.items_per_category,
            args.users,
            args.seed,
        ),
        other => {
            return Err(uplift_rank::Error::Config(format!(
                "unknown world `{other}` (expected hidden-interest or homogeneous)"
            )))
        }
    };
    std::fs::create_dir_all(&args.out)?;
    let policy = if args.strength == 0.0 {
        LoggingPolicy::Uniform
    } else {
        LoggingPolicy::Confounded { strength: args.strength }
    };
    let train = simulate_logs(&world, policy, args.train_windows, args.window_len, args.slots, args.seed)?;
    let unbiased = simulate_logs(
        &world,
        LoggingPolicy::Uniform,
        args.test_windows,
        args.window_len,
        args.slots,
        args.seed.wrapping_add(1),
    )?;
    let file = |name: &str| -> Result<BufWriter<std::fs::File>> {
        Ok(BufWriter::new(std::fs::File::create(args.out.join(name))?))
    };
    write_interactions(&to_records(&train), true, file("train.tsv")?)?;
    write_interactions(&to_records(&unbiased), true, file("unbiased.tsv")?)?;
    world.category_map().write_to(file("categories.tsv")?)?;
    world.write_truth(file("truth.tsv")?)?;

    let config = RunConfig {
        data: uplift_rank::config::DataConfig {
            train: args.out.join("train.tsv"),
            unbiased: args.out.join("unbiased.tsv"),
            categories: None,
            has_position: true,
            split_ratio: 0.5,
            split_seed: args.seed,
        },
        train: uplift_rank::backend::TrainConfig {
            seed: args.seed,
            ..Default::default()
        },
        hyper: uplift_rank::causal::HyperParams {
            c: args.categories,
            k: 4,
            n: 10,
            k_p: (args.users / 4).clamp(10, 80),
            k_s: (args.users / 4).clamp(10, 80),
            ..Default::default()
        },
        run: uplift_rank::config::RunSection {
            policy: Policy::Mtef,
            cutoffs: vec![10],
            seed: args.seed,
            out_dir: args.out.join("run"),
            allow_out_of_range: ![2, 3, 5, 10, 15].contains(&args.categories),
            epsilon_aggregate: false,
            eval_on_valid: false,
        },
    };
    std::fs::write(args.out.join("config.toml"), config.to_toml())?;
    println!(
        "wrote train.tsv, unbiased.tsv, categories.tsv, truth.tsv, config.toml to {}",
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pipeline(args) => {
            let config = args.load()?;
            let cutoffs = config.run.cutoffs.clone();
            let outcome = run_pipeline(config, args.resume)?;
            print_outcome(&outcome, &cutoffs);
        }
        Command::Train(args) => {
            let config = args.load()?;
            let mut pipeline = Pipeline::new(config, args.resume)?;
            let model = pipeline.stage_train()?;
            println!(
                "trained {} user and {} item embeddings (dim {})",
                model.num_users(),
                model.num_items(),
                model.dim()
            );
        }
        Command::Cluster(args) => {
            let config = args.load()?;
            let mut pipeline = Pipeline::new(config, args.resume)?;
            let model = pipeline.stage_train()?;
            let map = pipeline.stage_cluster(&model)?;
            println!("clustered {} items into {} categories", map.len(), map.num_categories());
        }
        Command::Augment(args) => {
            let config = args.load()?;
            let mut pipeline = Pipeline::new(config, args.resume)?;
            let model = pipeline.stage_train()?;
            let map = pipeline.stage_cluster(&model)?;
            let samples = pipeline.stage_augment(&map)?;
            println!("carved {} augmented samples", samples.len());
        }
        Command::Estimate { args, show_user } => {
            let config = args.load()?;
            let mut pipeline = Pipeline::new(config, args.resume)?;
            let model = pipeline.stage_train()?;
            let map = pipeline.stage_cluster(&model)?;
            let samples = pipeline.stage_augment(&map)?;
            let estimates = pipeline.stage_estimate(&model, &map, &samples)?;
            println!("estimated matrices for {} users", estimates.len());
            if let Some(user) = show_user {
                let est = estimates.get(&user).ok_or(uplift_rank::Error::UnknownUser(user))?;
                println!("backend allocation: {:?}", est.t0.slots());
                println!("propensity:");
                est.propensity.write_to(std::io::stdout())?;
                println!("dose-response (unfilled cells marked *):");
                est.adrf.write_to(std::io::stdout())?;
                println!("marginal effects: {:?}", est.mtef.values());
            }
        }
        Command::Plan(args) => {
            let config = args.load()?;
            let mut pipeline = Pipeline::new(config, args.resume)?;
            let model = pipeline.stage_train()?;
            let map = pipeline.stage_cluster(&model)?;
            let estimates = if pipeline.config().run.policy.needs_estimates() {
                let samples = pipeline.stage_augment(&map)?;
                Some(pipeline.stage_estimate(&model, &map, &samples)?)
            } else {
                None
            };
            let recs = pipeline.stage_plan(&model, &map, estimates.as_ref())?;
            println!("planned lists for {} users", recs.len());
        }
        Command::Evaluate(args) => {
            let config = args.load()?;
            let cutoffs = config.run.cutoffs.clone();
            let outcome = run_pipeline(config, args.resume)?;
            print_outcome(&outcome, &cutoffs);
        }
        Command::Sweep { args, param, values } => {
            let config = args.load()?;
            let grid: Vec<f64> = values
                .split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        uplift_rank::Error::Config(format!("bad sweep value `{v}`"))
                    })
                })
                .collect::<Result<_>>()?;
            let cutoffs = config.run.cutoffs.clone();
            let results = sweep(&config, &param, &grid, args.resume)?;
            for (value, outcome) in &results {
                println!("== {param} = {value}");
                print_outcome(outcome, &cutoffs);
            }
        }
        Command::Simulate(args) => simulate(&args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}
