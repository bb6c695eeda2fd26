//! Command-line harness for evolving-ontology experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use leco::harness::{
    emit_report, run_experiment, sweep, ExperimentConfig, ReportFormat, ResultTable, SweepGrid,
};
use leco::hierinfer::{infer_parent_map, masked_fraction, mismatch_mask, PairedLabeling};
use leco::ontology::Taxonomy;
use leco::synthdata::{generate_pool, HierarchicalGaussianSpec};
use leco::Result;

#[derive(Parser)]
#[command(
    name = "leco",
    about = "Train classifiers under evolving class ontologies on synthetic hierarchical data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full multi-TP experiment from a JSON config.
    Run(RunArgs),
    /// Grid-search learning rate and weight decay, selecting on
    /// validation mAcc.
    Sweep(SweepArgs),
    /// Generate a synthetic data pool and test split.
    GenData(GenDataArgs),
    /// Infer an old->new parent map from doubly-labeled pairs.
    InferHierarchy(InferArgs),
    /// Re-emit a previously produced result table.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Grid file (JSON: {"lr": [...], "weight_decay": [...]}). Defaults
    /// to the grids declared in the config's train section.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Data spec (JSON: HierarchicalGaussianSpec plus taxonomy shape).
    #[arg(long)]
    spec: PathBuf,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Text file of `<old_id> <new_id> <weight>` lines.
    #[arg(long)]
    pairs: PathBuf,
    /// Where to write the inferred two-level taxonomy.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding results.csv from a previous run.
    #[arg(long, name = "in")]
    input: PathBuf,
    #[arg(long, default_value = "text")]
    format: String,
    /// Output directory (defaults to the input directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Standalone gen-data description: the taxonomy shape, the Gaussian
/// spec, per-TP pool sizes, and the test size.
#[derive(serde::Serialize, serde::Deserialize)]
struct GenDataSpec {
    level_sizes: Vec<usize>,
    data: HierarchicalGaussianSpec,
    sizes: Vec<usize>,
    test_size: usize,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::read_file(&args.config)?;
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    config.validate()?;
    let output = run_experiment(&config, true)?;
    println!("{}", output.table.summary_text());
    if let Some(dir) = output.output_dir {
        println!("artifacts: {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut config = ExperimentConfig::read_file(&args.config)?;
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    config.validate()?;
    let grid = match args.grid {
        Some(path) => SweepGrid::read_file(&path)?,
        None => SweepGrid::from_train_config(&config.train),
    };
    let output = sweep(&config, &grid, true)?;
    for cell in &output.cells {
        println!(
            "cell lr={} wd={} val_macc={:.4}",
            cell.lr, cell.weight_decay, cell.val_macc
        );
    }
    println!(
        "selected lr={} wd={} (val_macc={:.4})",
        output.selected.lr, output.selected.weight_decay, output.selected.val_macc
    );
    println!("{}", output.table.summary_text());
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)?;
    let mut spec: GenDataSpec = serde_json::from_str(&text)?;
    if let Some(seed) = args.seed {
        spec.data.seed = seed;
    }
    let taxonomy = Taxonomy::from_level_sizes(&spec.level_sizes)?;
    let pool = generate_pool(&spec.data, &taxonomy, &spec.sizes, spec.test_size)?;
    std::fs::create_dir_all(&args.out)?;
    pool.export(&args.out)?;
    taxonomy.write_file(&args.out.join("taxonomy.txt"))?;
    println!(
        "wrote {} pool samples, {} test samples to {}",
        pool.samples.len(),
        pool.test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_infer_hierarchy(args: InferArgs) -> Result<()> {
    let paired = PairedLabeling::read_file(&args.pairs)?;
    let (num_old, num_new) = paired.label_counts();
    let parents = infer_parent_map(&paired, num_new, num_old)?;
    let mask = mismatch_mask(&paired, &parents)?;
    let fraction = masked_fraction(&paired, &mask);

    let names = vec![
        (0..num_old).map(|i| format!("old_{i}")).collect(),
        (0..num_new).map(|i| format!("new_{i}")).collect(),
    ];
    let taxonomy = Taxonomy::new(names, vec![vec![], parents])?;
    taxonomy.write_file(&args.out)?;
    println!(
        "inferred {num_new} parents over {num_old} old labels; mismatched weight fraction {:.4}",
        fraction
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    let table = ResultTable::from_csv(&std::fs::read_to_string(
        args.input.join("results.csv"),
    )?)?;
    let out = args.out.unwrap_or_else(|| args.input.clone());
    let files = emit_report(&table, format, &out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    if format == ReportFormat::Text {
        print!("{}", table.summary_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::InferHierarchy(args) => cmd_infer_hierarchy(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string() })
            );
            ExitCode::FAILURE
        }
    }
}
