use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fsdet::report::{self, Layout};
use fsdet::simulation::{self, Design, EstimatorSet, GridConfig};

/// Factor score determinacy simulations.
#[derive(Parser)]
#[command(name = "fsdet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run population cells (one large draw per cell).
    Population(RunArgs),
    /// Run sample cells with replications.
    Sample(RunArgs),
    /// Render a summary table from results files.
    Report {
        /// One or more results.csv files.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Table layout.
        #[arg(long, default_value = "sample", value_parser = clap::builder::PossibleValuesParser::new(Layout::NAMES))]
        layout: String,
        /// Write the table here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare results against a target set.
    Verify {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Embedded target set name (or `all`), or a path to a targets CSV.
        #[arg(long, default_value = "acceptance")]
        targets: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// The 32 population cells.
    Paper32,
    /// The 256 sample cells.
    Paper256,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replications per sample cell.
    #[arg(long)]
    reps: Option<usize>,
    /// Replications per cell that also run the Bayes estimator.
    #[arg(long)]
    bayes_reps: Option<usize>,
    /// Cell filter such as "q=3,ppf=5,sl=.4,cl=0,phi=0,c=2,n=300"; repeatable.
    #[arg(long)]
    cells: Vec<String>,
    /// Comma-separated estimators: ml, wlsmv, bayes.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Cases per population cell.
    #[arg(long)]
    population_size: Option<usize>,
    /// Also write per-replication values.
    #[arg(long)]
    write_replications: bool,
    /// Output directory.
    #[arg(long, env = "FSDET_OUTPUT_DIR")]
    out: Option<PathBuf>,
}

/// Usage and configuration problems exit with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn build_config(design: Design, args: &RunArgs) -> anyhow::Result<GridConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = GridConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if cfg.design != design {
                return Err(usage(format!("{} describes a {:?} design", path.display(), cfg.design)));
            }
            cfg
        }
        None => GridConfig::new(design),
    };
    match (args.preset, design) {
        (Some(Preset::Paper32), Design::Sample) => return Err(usage("preset paper32 is a population preset")),
        (Some(Preset::Paper256), Design::Population) => return Err(usage("preset paper256 is a sample preset")),
        (Some(_), _) => cfg.grid = None,
        (None, _) => {}
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = args.reps {
        cfg.replications = reps;
    }
    if let Some(k) = args.bayes_reps {
        cfg.bayes_replications = Some(k);
    }
    if let Some(size) = args.population_size {
        cfg.population_size = size;
    }
    if !args.cells.is_empty() {
        cfg.cells = args.cells.clone();
    }
    if let Some(list) = &args.estimators {
        let mut set = EstimatorSet { ml: false, wlsmv: false, bayes: false };
        for e in list {
            match e.trim().to_ascii_lowercase().as_str() {
                "ml" => set.ml = true,
                "wlsmv" => set.wlsmv = true,
                "bayes" | "ba" => set.bayes = true,
                other => return Err(usage(format!("unknown estimator `{other}`"))),
            }
        }
        cfg.estimators = Some(set);
    }
    cfg.write_replications |= args.write_replications;
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn run(design: Design, args: &RunArgs) -> anyhow::Result<ExitCode> {
    let cfg = build_config(design, args)?;
    let cells = cfg.cells().map_err(|e| usage(e.to_string()))?;
    if cells.is_empty() {
        return Err(usage("no cells match the filters"));
    }
    let out_dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(match design {
        Design::Population => "fsdet-output/population",
        Design::Sample => "fsdet-output/sample",
    }));
    eprintln!("running {} cells (seed {}) into {}", cells.len(), cfg.seed, out_dir.display());
    let result = simulation::run_grid(&cfg, &|line| eprintln!("{line}"))?;
    simulation::write_outputs(&result, &out_dir)?;
    eprintln!("wrote {}", out_dir.join("results.csv").display());
    if result.any_failed() {
        eprintln!("{} cell(s) exceeded the exclusion limit", result.manifest.failed_cells.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_rows(paths: &[PathBuf]) -> anyhow::Result<Vec<report::ResultRow>> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(report::read_results_file(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(rows)
}

fn load_targets(spec: &str) -> anyhow::Result<Vec<report::Target>> {
    let path = Path::new(spec);
    if path.is_file() {
        let f = std::fs::File::open(path)?;
        return report::parse_targets(f).map_err(|e| usage(format!("{}: {e}", path.display())));
    }
    report::embedded_targets(spec).map_err(|e| usage(e.to_string()))
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Population(args) => run(Design::Population, &args),
        Command::Sample(args) => run(Design::Sample, &args),
        Command::Report { results, layout, output } => {
            let rows = load_rows(&results)?;
            let layout = Layout::parse(&layout).map_err(|e| usage(e.to_string()))?;
            let table = report::render_table(&rows, layout);
            match output {
                Some(p) => std::fs::write(&p, table).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{table}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { results, targets } => {
            let rows = load_rows(&results)?;
            let targets = load_targets(&targets)?;
            if targets.is_empty() {
                bail!("target set is empty");
            }
            let rep = report::verify(&rows, &targets);
            println!("{rep}");
            Ok(if rep.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
