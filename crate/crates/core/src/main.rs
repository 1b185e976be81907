use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use incner::corpus::{synthesize_corpus, write_conll, DevMode, SynthConfig};
use incner::harness::{self, BuildTasks, ClassOrder, SweepParameter};
use incner::protocol::Arm;
use incner::{Error, Result};

#[derive(Parser)]
#[command(name = "incner", version, about = "Class-incremental NER experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `dotted.key=value` configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus and its input lexicon.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        tokens_per_class: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Split a corpus into a class-incremental task stream.
    BuildTasks {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, required_unless_present = "class_order")]
        tasks: Option<usize>,
        #[arg(long)]
        classes_per_task: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File with one class per line, replacing the seeded class order.
        #[arg(long)]
        class_order: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "new-classes")]
        dev_mode: DevModeArg,
        /// Input lexicon copied alongside the manifest.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the full incremental protocol over a manifest.
    Train(RunArgs),
    /// Run several ablation arms with shared seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated arms, or `all`.
        #[arg(long, default_value = "all")]
        arms: String,
    },
    /// One run per parameter value.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// beta, entityThresholdIndex or tau.
        #[arg(long)]
        param: String,
        /// Values; beta accepts `0.9` (fixed) or `0.95,-0.05` (base,slope).
        values: Vec<String>,
    },
    /// Re-derive the relabeling table of a saved run.
    RelabelStats {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DevModeArg {
    NewClasses,
    Cumulative,
}

impl From<DevModeArg> for DevMode {
    fn from(m: DevModeArg) -> Self {
        match m {
            DevModeArg::NewClasses => DevMode::NewClasses,
            DevModeArg::Cumulative => DevMode::Cumulative,
        }
    }
}

fn parse_arms(spec: &str) -> Result<Vec<Arm>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(Arm::ALL.to_vec());
    }
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            classes,
            tokens_per_class,
            separation,
            noise,
            dim,
            seed,
            force,
        } => {
            let synth = synthesize_corpus(&SynthConfig {
                class_count: classes,
                tokens_per_class,
                cluster_separation: separation,
                noise,
                dim,
                seed,
                ..SynthConfig::default()
            })?;
            harness::prepare_out_dir(&out, force)?;
            let corpus_path = out.join("corpus.tsv");
            std::fs::write(&corpus_path, write_conll(&synth.corpus))
                .map_err(|e| Error::Io { path: corpus_path.clone(), source: e })?;
            synth.lexicon.save(&out.join("lexicon.json"))?;
            println!(
                "{} sentences, {} classes -> {}",
                synth.corpus.len(),
                synth.corpus.label_inventory.len(),
                out.display()
            );
        }
        Command::BuildTasks {
            corpus,
            tasks,
            classes_per_task,
            seed,
            class_order,
            dev_mode,
            lexicon,
            out,
            force,
        } => {
            let order = match class_order {
                Some(path) => ClassOrder::File(path),
                None => ClassOrder::Seeded {
                    task_count: tasks.unwrap_or_default(),
                },
            };
            let manifest = harness::build_tasks(&BuildTasks {
                corpus,
                order,
                classes_per_task,
                seed,
                dev_mode: dev_mode.into(),
                lexicon,
                out_dir: out,
                force,
            })?;
            print!("{}", manifest.stats_table());
        }
        Command::Train(args) => {
            let cfg = harness::load_config(args.config.as_deref(), &args.overrides)?;
            let report = harness::train(&cfg, &args.manifest, &args.out, args.force)?;
            print!("{}", harness::metrics_table(&report));
        }
        Command::Ablate { run, arms } => {
            let arms = parse_arms(&arms)?;
            let cfg = harness::load_config(run.config.as_deref(), &run.overrides)?;
            let table = harness::ablate(&cfg, &run.manifest, &arms, &run.out, run.force)?;
            println!("{} arms, {} rows -> {}", table.series.len(), table.rows.len(), run.out.display());
        }
        Command::Sweep { run, param, values } => {
            let parameter: SweepParameter = param.parse()?;
            let cfg = harness::load_config(run.config.as_deref(), &run.overrides)?;
            let table = harness::sweep(&cfg, &run.manifest, parameter, &values, &run.out, run.force)?;
            println!("{} series -> {}", table.series.len(), run.out.display());
        }
        Command::RelabelStats { run } => {
            let rows = harness::relabel_stats(&run)?;
            print!("{}", harness::relabel_stats_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
