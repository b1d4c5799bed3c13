use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gcvae::harness::{self, DatasetKind, RunConfig};
use gcvae::model::Arch;

#[derive(Parser)]
#[command(name = "gcvae", version, about = "Train and evaluate controllable-weight VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Decode a sweep along one latent dimension into a PGM grid.
    Traverse(TraverseArgs),
    /// Merge the metric reports of several run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enable (true) or disable (false) the convergence stopping rule.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    stopping: Option<bool>,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    #[arg(long)]
    subsample_n: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: DatasetKind,
    #[arg(long)]
    subsample_n: Option<usize>,
    /// Directory for report.txt / report.csv; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraverseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    range: f64,
    #[arg(long, default_value_t = 11)]
    steps: usize,
    /// Row 0 keeps the other coordinates at zero; later rows use random codes.
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "traversal.pgm")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Also write the merged table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown arch {s:?} (conv64, conv64_caption, mlp)"))
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.variant {
            cfg.variant = v.clone();
        }
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if let Some(k) = self.latent_dim {
            cfg.latent_dim = k;
        }
        if let Some(s) = self.steps {
            cfg.max_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.stopping {
            cfg.stopping = s;
        }
        if let Some(a) = self.arch {
            cfg.arch = a;
        }
        if let Some(n) = self.subsample_n {
            cfg.subsample_n = Some(n);
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

/// The run configuration saved next to a checkpoint, if any.
fn sibling_config(checkpoint: &Path) -> Result<Option<RunConfig>> {
    let path = checkpoint.with_file_name(harness::CONFIG_FILE);
    if path.is_file() {
        Ok(Some(RunConfig::load(&path)?))
    } else {
        Ok(None)
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let log = harness::train(&cfg)?;
    println!("{} steps{} -> {}", log.steps, if log.stopped_early { " (stopped early)" } else { "" }, log.out_dir.display());
    if let Some(r) = &log.report {
        print_report(r);
    }
    Ok(())
}

fn print_report(r: &harness::MetricReport) {
    let m = r.modularity.map_or_else(|| "undefined".to_string(), |m| format!("{m:.4}"));
    println!("mig={:.4} modularity={m} jemmig={:.4} recon={:.4} kl={:.4}", r.mig, r.jemmig, r.recon, r.kl);
}

fn eval(args: EvalArgs) -> Result<()> {
    let params = harness::load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut cfg = sibling_config(&args.checkpoint)?.unwrap_or_default();
    cfg.dataset = args.dataset;
    if let Some(n) = args.subsample_n {
        cfg.subsample_n = Some(n);
    }
    let ds = cfg.load_dataset()?;
    let report = harness::eval_metrics(&params, &ds, &cfg.variant, cfg.bins, cfg.mig_normalization, cfg.data_seed)?;
    let out = match args.out {
        Some(o) => o,
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out)?;
    harness::write_report(&out, &report)?;
    print_report(&report);
    Ok(())
}

fn traverse(args: TraverseArgs) -> Result<()> {
    let params = harness::load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let img = harness::traverse(&params, args.dim, args.range, args.steps, args.rows, args.seed)?;
    img.write_pgm(BufWriter::new(File::create(&args.out)?))?;
    println!("{}×{} grid -> {}", img.width, img.height, args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let cmp = harness::compare_runs(&args.dirs);
    print!("{}", cmp.to_table());
    if let Some(path) = &args.csv {
        fs::write(path, cmp.to_csv()?)?;
    }
    if !cmp.missing.is_empty() {
        let names: Vec<String> = cmp.missing.iter().map(|d| d.display().to_string()).collect();
        bail!("no metric report in: {}", names.join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Traverse(a) => traverse(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
