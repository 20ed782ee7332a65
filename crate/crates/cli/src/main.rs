//! `kig`: command-line driver for court-view generation with knowledge
//! injection and guidance.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kig_core::config::RunConfig;
use kig_core::navigator::{GuidanceSpace, Objective};
use kig_core::run::{markdown_table, Run, SweepParam};
use kig_core::{Error, Result};

#[derive(Parser)]
#[command(name = "kig", version, about = "Knowledge-injected, guided court-view generation")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding corpus/, ckpt/, gen/ and reports/.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Accept artifacts produced under a different config hash.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, split and tokenize the synthetic corpus.
    GenData,
    /// Pretrain the language model that later stays frozen.
    PretrainLm,
    /// Train the knowledge-injected prompt encoder.
    TrainPrompt(PromptArgs),
    /// Train the all-prefix claim classifier used for guidance.
    TrainNavigator,
    /// Train the full-view claim classifier used for scoring.
    TrainEvalClassifier,
    /// Decode views for the test split.
    Generate(GenerateArgs),
    /// Score a generation run.
    Evaluate {
        /// Name of the generation run under gen/.
        #[arg(long, default_value = "kig")]
        name: String,
    },
    /// Run the full method and its three ablations.
    Ablate(ScheduleArgs),
    /// Sweep the guidance strength or the schedule midpoint.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepArg,
        /// Comma-separated values (defaults: λ 0,2,…,10; k 0,25,…,100).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
}

#[derive(Args, Clone, Copy)]
struct PromptArgs {
    /// Initialize the prefix slots randomly instead of from keywords.
    #[arg(long)]
    no_keyword_init: bool,
    /// Drop label attention over the definition encodings.
    #[arg(long)]
    no_label_attention: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    prompt: PromptArgs,
    /// Decode without the navigator.
    #[arg(long)]
    no_navigator: bool,
    /// Name of the output under gen/ (default: the ablation label).
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    /// Guidance strength λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Schedule midpoint k (generated tokens).
    #[arg(long)]
    k: Option<f64>,
    /// Schedule temperature μ.
    #[arg(long)]
    mu: Option<f64>,
    /// Candidate tokens re-scored by the navigator.
    #[arg(long)]
    top_n: Option<usize>,
    /// Add the navigator score to log-probabilities instead of probabilities.
    #[arg(long)]
    logit_space: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Lambda,
    K,
}

impl ScheduleArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.schedule;
        if let Some(v) = self.lambda {
            s.lambda = v;
        }
        if let Some(v) = self.k {
            s.k = v;
        }
        if let Some(v) = self.mu {
            s.mu = v;
        }
        if let Some(v) = self.top_n {
            s.top_n = v;
        }
        if self.logit_space {
            s.space = GuidanceSpace::Logit;
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::TrainPrompt(p) => {
            cfg.ablation.no_keyword_init |= p.no_keyword_init;
            cfg.ablation.no_label_attention |= p.no_label_attention;
        }
        Command::Generate(g) => {
            cfg.ablation.no_keyword_init |= g.prompt.no_keyword_init;
            cfg.ablation.no_label_attention |= g.prompt.no_label_attention;
            cfg.ablation.no_navigator |= g.no_navigator;
            g.schedule.apply(&mut cfg);
        }
        Command::Ablate(s) | Command::Sweep { schedule: s, .. } => s.apply(&mut cfg),
        _ => {}
    }
    cfg.validate()?;
    let mut run = Run::new(&cli.run_dir, cfg);
    run.force = cli.force;
    log::info!("run directory {}, config hash {}", run.dir.display(), run.hash);

    match &cli.command {
        Command::GenData => {
            run.gen_data()?;
        }
        Command::PretrainLm => {
            let ds = run.load_data()?;
            run.pretrain_lm(&ds)?;
        }
        Command::TrainPrompt(_) => {
            let ds = run.load_data()?;
            let lm = run.load_lm()?;
            run.train_prompt(&ds, &lm, run.cfg.ablation.prompt())?;
        }
        Command::TrainNavigator => {
            let ds = run.load_data()?;
            run.train_classifier(&ds, Objective::AllPrefixes)?;
        }
        Command::TrainEvalClassifier => {
            let ds = run.load_data()?;
            run.train_classifier(&ds, Objective::FullView)?;
        }
        Command::Generate(g) => {
            let name = g.name.clone().unwrap_or_else(|| run.cfg.ablation.label());
            run.generate(&name)?;
            println!("{}", run.gen_path(&name).display());
        }
        Command::Evaluate { name } => {
            let report = run.evaluate(name)?;
            println!("{}", kig_core::eval::CSV_HEADER);
            println!("{}", report.csv_row());
        }
        Command::Ablate(_) => {
            let rows = run.ablate()?;
            print!("{}", markdown_table(&rows));
        }
        Command::Sweep { param, values, .. } => {
            let param = match param {
                SweepArg::Lambda => SweepParam::Lambda,
                SweepArg::K => SweepParam::K,
            };
            let values = values.clone().unwrap_or_else(|| param.default_values());
            let rows = run.sweep(param, &values)?;
            let titled: Vec<_> = rows.into_iter().map(|(v, r)| (format!("{}={v}", param.name()), r)).collect();
            print!("{}", markdown_table(&titled));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
