use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsvr_core::pipeline::{self, RunConfig};
use tsvr_core::{Error, ErrorKind};

/// Visual time-series representations: render, extract, train, evaluate.
#[derive(Parser, Debug)]
#[command(name = "tsvr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize every series of the configured datasets into the cache.
    Render(Common),
    /// Build the shift pool and triplets; writes pool.csv and triplets.csv.
    Pool(Common),
    /// Compute (or reuse) backbone features for the pool.
    Extract(Common),
    /// Train the head; writes the head container and loss.csv.
    Train(Common),
    /// Cluster each dataset and write score tables.
    Evaluate(Common),
    /// Write one PGM per head filter for selected samples.
    DumpActivations(DumpArgs),
}

/// Every option may also be given in the `--config` file under the same
/// name; flags win.
#[derive(Args, Debug, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<String>,
    /// Comma-separated dataset names.
    #[arg(long)]
    datasets: Option<String>,
    /// Datasets feeding the triplet pool (default: --datasets).
    #[arg(long)]
    pool_datasets: Option<String>,
    /// `tiny`, `resnet50` or a backbone config file.
    #[arg(long)]
    backbone: Option<String>,
    /// TSV1 weight container; seeded random weights when absent.
    #[arg(long)]
    backbone_weights: Option<String>,
    /// Head container path (default: <output-dir>/head.tsv1).
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    cache_dir: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    height: Option<String>,
    #[arg(long)]
    line_thickness: Option<String>,
    #[arg(long)]
    pad_fraction: Option<String>,
    #[arg(long)]
    antialias: Option<String>,
    #[arg(long)]
    filters: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    restarts: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    samples_per_dataset: Option<String>,
    #[arg(long)]
    shifts_per_sample: Option<String>,
    /// `low,high` fractions of the series length.
    #[arg(long)]
    eps_range: Option<String>,
    #[arg(long)]
    triplets_per_anchor: Option<String>,
    /// `same` or `any`.
    #[arg(long)]
    negatives: Option<String>,
    /// Comma-separated subset of `ldvr,pdvr,ed`.
    #[arg(long)]
    mode: Option<String>,
    /// `test` or `all`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    znorm: Option<String>,
    /// `geometric`, `arithmetic`, `min` or `max`.
    #[arg(long)]
    nmi_norm: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset holding the samples.
    #[arg(long)]
    dataset: String,
    /// Comma-separated sample ids.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    /// Circularly shift each sample by this many steps first.
    #[arg(long)]
    shift: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("data-root", &self.data_root),
            ("datasets", &self.datasets),
            ("pool-datasets", &self.pool_datasets),
            ("backbone", &self.backbone),
            ("backbone-weights", &self.backbone_weights),
            ("head", &self.head),
            ("cache-dir", &self.cache_dir),
            ("output-dir", &self.output_dir),
            ("width", &self.width),
            ("height", &self.height),
            ("line-thickness", &self.line_thickness),
            ("pad-fraction", &self.pad_fraction),
            ("antialias", &self.antialias),
            ("filters", &self.filters),
            ("margin", &self.margin),
            ("lr", &self.lr),
            ("batch-size", &self.batch_size),
            ("epochs", &self.epochs),
            ("restarts", &self.restarts),
            ("max-iters", &self.max_iters),
            ("tol", &self.tol),
            ("samples-per-dataset", &self.samples_per_dataset),
            ("shifts-per-sample", &self.shifts_per_sample),
            ("eps-range", &self.eps_range),
            ("triplets-per-anchor", &self.triplets_per_anchor),
            ("negatives", &self.negatives),
            ("mode", &self.mode),
            ("split", &self.split),
            ("znorm", &self.znorm),
            ("nmi-norm", &self.nmi_norm),
            ("seed", &self.seed),
        ]
    }

    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).map_err(|e| match e {
                Error::Io { .. } => Error::Config(e.to_string()),
                e => e,
            })?,
            None => RunConfig::default(),
        };
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Render(c) => {
            let stats = pipeline::render(&c.resolve()?)?;
            println!("rendered {} images, {} already cached", stats.computed, stats.reused);
        }
        Command::Pool(c) => {
            let cfg = c.resolve()?;
            let r = pipeline::pool_command(&cfg)?;
            println!(
                "pool: {} originals, {} shifted, {} triplets",
                r.counts.originals,
                r.counts.shifted,
                r.triplets.len()
            );
            for v in &r.violations {
                eprintln!("violation: {v}");
            }
            if let Some(v) = r.violations.first() {
                return Err(Error::Pool(v.to_string()));
            }
        }
        Command::Extract(c) => {
            let (feats, stats) = pipeline::extract(&c.resolve()?)?;
            println!(
                "features for {} pool entries ({} computed, {} reused)",
                feats.len(),
                stats.computed,
                stats.reused
            );
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let out = pipeline::train(&cfg)?;
            if let (Some(first), Some(last)) = (out.loss_history.first(), out.loss_history.last()) {
                println!("epoch 1 loss {first:.6}, epoch {} loss {last:.6}", out.loss_history.len());
            }
            println!("head written to {}", cfg.head_path().display());
        }
        Command::Evaluate(c) => {
            let report = pipeline::evaluate(&c.resolve()?)?;
            print!("NMI\n{}", report.nmi.to_csv());
            print!("RI\n{}", report.ri.to_csv());
        }
        Command::DumpActivations(d) => {
            let files = pipeline::dump_activations(&d.common.resolve()?, &d.dataset, &d.samples, d.shift)?;
            println!("wrote {} activation maps", files.len());
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
