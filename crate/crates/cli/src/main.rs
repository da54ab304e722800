use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnpool::alloc_track::TrackingAlloc;
use attnpool::bench::{self, BenchKind, Dims};
use attnpool::config::RunConfig;
use attnpool::heads::LossKind;
use attnpool::heatmap::{export_pgm, HeatmapImage};
use attnpool::parallel::map_indexed;
use attnpool::selftest::{self, Group, SelftestOptions};
use attnpool::synth::{self, Dataset, LabeledExample};
use attnpool::train::{self, uniform_attention_scores};
use attnpool::{checkpoint, Error, Execution};
use clap::{Parser, Subcommand, ValueEnum};

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc;

/// Attentional pooling experiments on a planted-signal task.
#[derive(Debug, Parser)]
#[command(name = "attnpool", version)]
struct Cli {
    /// Worker threads for data-parallel work (1 runs everything sequentially).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Config file of `key = value` lines under `[task]`, `[train]`,
    /// `[sketch]` and `[bench]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one setting, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-signal dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a head on a generated dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Directory for `metrics.txt`, `scores.atnp` and `ranking.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export bottom-up, top-down and combined attention maps as PGM images.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Number of leading examples to export.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time and count operations of the scoring routes; writes CSV.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Run the full `{1,7,49} × {8,64,512} × {1,10,100} × {1,2,5}` grid.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 196)]
        n: usize,
        #[arg(long, default_value_t = 512)]
        f: usize,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        p: usize,
    },
    /// Run the built-in verification suite.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
    Selftest,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Run(Error::Config(_)) => 1,
            Failure::Run(Error::Io { .. }) => 2,
            Failure::Run(_) => 3,
            Failure::Selftest => 4,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Run(e) => eprintln!("error: {e}"),
                Failure::Selftest => eprintln!("selftest failed"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn execution(threads: usize) -> Result<Execution, Failure> {
    if threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    if threads == 1 {
        return Ok(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start {threads} threads: {e}")))?;
        Ok(Execution::Parallel)
    }
    #[cfg(not(feature = "parallel"))]
    {
        log::warn!("built without the `parallel` feature; running on one thread");
        Ok(Execution::Sequential)
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let text = match &cli.config {
        Some(path) => Some(fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?),
        None => None,
    };
    let cfg = RunConfig::resolve(text.as_deref(), &cli.overrides)?;
    log::info!("resolved config:\n{}", cfg.to_text());
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| {
        Failure::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| {
        Failure::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    let path = dir.join("dataset.cfg");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
    let task = RunConfig::parse(&text)?.task;
    Ok(synth::load_dataset(dir, task)?)
}

fn split(ds: &Dataset, which: Split) -> &[LabeledExample] {
    match which {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exec = execution(cli.threads)?;
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Gen { out } => {
            let ds = selftest::generate_into(&cfg, out, exec)?;
            println!(
                "wrote {} train and {} val examples to {}",
                ds.train.len(),
                ds.val.len(),
                out.display()
            );
        }
        Command::Train { data, out } => {
            let ds = load_dataset(data)?;
            let report = selftest::train_into(&cfg, &ds, out, exec)?;
            print!("{}", report.summary());
            log::info!("wall-clock {:.2?}", report.wall_clock);
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split: which,
            out,
        } => {
            let (model, _) = checkpoint::load(ckpt)?;
            let ds = load_dataset(data)?;
            let examples = split(&ds, *which);
            let eval = train::evaluate(&model, examples, cfg.train.loss, exec)?;
            create_dir(out)?;
            let mut metrics = format!("{} = {}\n", eval.metric_name, eval.metric);
            if cfg.train.loss == LossKind::Softmax && ds.config.multi_label {
                log::warn!("softmax accuracy on a multi-label split uses the first label only");
            }
            if let Some(l) = eval.localization {
                metrics.push_str(&format!("localization_rate = {l}\n"));
            }
            metrics.push_str(&format!("examples = {}\n", examples.len()));
            write(&out.join("metrics.txt"), &metrics)?;
            attnpool::atnp::Tensor::from_matrix(&eval.scores).save(out.join("scores.atnp"))?;
            if let Some(baseline) = uniform_attention_scores(&eval) {
                let ranking = eval.improvement_ranking(&baseline, examples)?;
                let mut text = String::from("# example\tgain\n");
                for (i, g) in ranking {
                    text.push_str(&format!("{i}\t{g}\n"));
                }
                write(&out.join("ranking.tsv"), text)?;
            }
            print!("{metrics}");
        }
        Command::Heatmap {
            checkpoint: ckpt,
            data,
            split: which,
            count,
            out,
        } => {
            let (model, _) = checkpoint::load(ckpt)?;
            let ds = load_dataset(data)?;
            let examples = split(&ds, *which);
            let (n1, n2) = (ds.config.n1, ds.config.n2);
            create_dir(out)?;
            let count = (*count).min(examples.len());
            let written: Result<Vec<usize>, Failure> = map_indexed(count, exec, |i| {
                let ex = &examples[i];
                let input = model.prepare(&ex.x)?;
                let (_, maps) = model.score(&input)?;
                let maps =
                    maps.ok_or_else(|| Failure::Usage(format!("{} head has no attention maps", model.kind())))?;
                let grids = maps.to_grids(n1, n2)?;
                let k = ex.label();
                let images = [
                    HeatmapImage::from_grid(&grids.combined[k])?,
                    HeatmapImage::from_grid(&grids.top_down[k])?,
                    HeatmapImage::from_grid(&grids.bottom_up[k.min(grids.bottom_up.len() - 1)])?,
                ];
                for (name, im) in ["combined", "top_down", "bottom_up"].iter().zip(&images) {
                    export_pgm(im, &out.join(format!("{i:04}_{name}.pgm")))?;
                }
                export_pgm(
                    &HeatmapImage::montage(&images)?,
                    &out.join(format!("{i:04}_montage.pgm")),
                )?;
                Ok(i)
            })
            .into_iter()
            .collect();
            println!("wrote maps for {} examples to {}", written?.len(), out.display());
        }
        Command::Bench { out, sweep, n, f, k, p } => {
            let points: Vec<Dims> = if *sweep {
                bench::sweep_grid()
            } else {
                vec![Dims::new(*n, *f, *k, *p)]
            };
            let mut results = Vec::new();
            let mut seen = std::collections::HashSet::new();
            for dims in points {
                let dims = Dims {
                    d: cfg.bench.sketch_dim,
                    ..dims
                };
                for kind in BenchKind::ALL {
                    let key = (
                        kind,
                        dims.n,
                        dims.f,
                        dims.k,
                        if kind == BenchKind::RankP { dims.p } else { 0 },
                    );
                    if !seen.insert(key) {
                        continue;
                    }
                    let r = bench::bench_wallclock(kind, dims, cfg.bench.repetitions)?;
                    if r.alloc_ok == Some(false) {
                        log::warn!("{kind} {dims:?}: allocations exceed the linear budget");
                    }
                    results.push(r);
                }
            }
            write(out, bench::to_csv(&results))?;
            println!("wrote {} rows to {}", results.len(), out.display());
        }
        Command::Selftest => {
            let opts = SelftestOptions {
                exec,
                ..SelftestOptions::default()
            };
            let checks = selftest::run(opts, |c| println!("{c}"));
            println!(
                "{}",
                selftest::summary_line(&checks, &[Group::Equivalence, Group::Gradients, Group::Sketch])
            );
            println!(
                "{}",
                selftest::summary_line(&checks, &[Group::Flops, Group::Determinism])
            );
            if checks.iter().any(|c| !c.passed) {
                return Err(Failure::Selftest);
            }
        }
    }
    Ok(())
}
