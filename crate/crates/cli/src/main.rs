use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gram_cli::commands::{self, GenTask};
use gram_cli::config::{RunConfig, Weights};
use gram_cli::exit_code;
use gram_core::inference::{DecoderMode, Selector, Z0Mode};
use gram_core::numerics::{exec::configure_threads, Exec};
use gram_core::{GramError, Result};

#[derive(Parser)]
#[command(name = "gram", version, about = "Generative recursive reasoning: data, training, sampling and sweeps")]
struct Cli {
    /// Worker threads (falls back to GRAM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run sequentially, without the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset directory.
    GenData(GenArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Sample and report metrics as JSON.
    Eval(InferArgs),
    /// Sample, write predictions and metrics.
    Sample {
        #[command(flatten)]
        infer: InferArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth x width grid as CSV.
    Sweep {
        #[command(flatten)]
        infer: InferArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        depths: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step latent trajectories as CSV.
    Dump {
        #[command(flatten)]
        infer: InferArgs,
        /// Number of inputs to dump.
        #[arg(long, default_value_t = 8)]
        inputs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Nqueens,
    Coloring,
    Sudoku,
    SudokuUncond,
}

#[derive(Args)]
struct GenArgs {
    family: Family,
    /// Board size or graph size.
    #[arg(long)]
    n: Option<usize>,
    /// Queens removed per input, comma separated.
    #[arg(long, value_delimiter = ',')]
    remove: Vec<usize>,
    /// Instances to generate (graphs, puzzles or boards).
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long)]
    edge_prob: Option<f64>,
    #[arg(long, default_value_t = 30)]
    min_givens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint other than the run's final one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    weights: Option<WeightsArg>,
    #[arg(long)]
    selector: Option<SelectorArg>,
    #[arg(long)]
    decoder: Option<DecoderArg>,
    #[arg(long)]
    z0: Option<Z0Arg>,
    /// Supervision steps per rollout.
    #[arg(long)]
    n_sup_max: Option<usize>,
    /// Enable ACT halting.
    #[arg(long)]
    act: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Ema,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorArg {
    Vote,
    Lprm,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Argmax,
    Sampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Z0Arg {
    Fixed,
    Random,
}

impl InferArgs {
    fn load(&self) -> Result<commands::Loaded> {
        let snapshot = std::fs::read_to_string(self.run.join(commands::CONFIG_SNAPSHOT))?;
        let mut cfg = gram_cli::config::parse_json(&snapshot)?;
        let inf = &mut cfg.inference;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.width {
            inf.width = w;
        }
        if let Some(s) = &self.split {
            inf.split = s.clone();
        }
        if let Some(w) = self.weights {
            inf.weights = match w {
                WeightsArg::Ema => Weights::Ema,
                WeightsArg::Raw => Weights::Raw,
            };
        }
        if let Some(s) = self.selector {
            inf.selector = selector(s);
        }
        if let Some(d) = self.decoder {
            inf.decoder = match d {
                DecoderArg::Argmax => DecoderMode::Argmax,
                DecoderArg::Sampled => DecoderMode::Sampled,
            };
        }
        if let Some(z) = self.z0 {
            inf.z0 = match z {
                Z0Arg::Fixed => Z0Mode::Fixed,
                Z0Arg::Random => Z0Mode::Random,
            };
        }
        if self.n_sup_max.is_some() {
            inf.n_sup_max = self.n_sup_max;
        }
        if self.act {
            inf.act = true;
        }
        let cfg = cfg.finalize()?;
        commands::load_run(&self.run, self.checkpoint.as_deref(), &self.data, Some(cfg))
    }
}

fn selector(s: SelectorArg) -> Selector {
    match s {
        SelectorArg::Vote => Selector::Vote,
        SelectorArg::Lprm => Selector::Lprm,
        SelectorArg::Oracle => Selector::Oracle,
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serialises")
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var("GRAM_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| GramError::config(format!("GRAM_THREADS=`{v}` is not a thread count")))?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        configure_threads(t)?;
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.cmd {
        Cmd::GenData(a) => {
            let need_n = || a.n.ok_or_else(|| GramError::config("--n is required for this task"));
            let task = match a.family {
                Family::Nqueens => {
                    if a.remove.is_empty() {
                        return Err(GramError::config("--remove is required for n-queens"));
                    }
                    GenTask::NQueens { n: need_n()?, removals: a.remove.clone() }
                }
                Family::Coloring => GenTask::Coloring { n: need_n()?, edge_prob: a.edge_prob, count: a.count },
                Family::Sudoku => GenTask::Sudoku { count: a.count, min_givens: a.min_givens },
                Family::SudokuUncond => GenTask::SudokuUnconditional { count: a.count },
            };
            let ds = commands::gen_data(&task, a.seed, &a.out)?;
            eprintln!("wrote {}: {} train / {} test records over {} inputs", a.out.display(), ds.train.len(), ds.test.len(), ds.solution_sets.len());
        }
        Cmd::Train(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let cfg = cfg.finalize()?;
            let path = commands::train(&cfg, &a.data, &a.out, a.resume.as_deref(), exec)?;
            eprintln!("wrote {}", path.display());
        }
        Cmd::Eval(a) => {
            let run = a.load()?;
            println!("{}", json(&commands::eval(&run, exec)?));
        }
        Cmd::Sample { infer, out } => {
            let run = infer.load()?;
            println!("{}", json(&commands::sample(&run, &out, exec)?));
        }
        Cmd::Sweep { infer, widths, depths, out } => {
            let run = infer.load()?;
            let csv = commands::sweep(&run, &depths, &widths, run.cfg.inference.selector, exec)?;
            write_or_print(out.as_deref(), &csv)?;
        }
        Cmd::Dump { infer, inputs, out } => {
            let run = infer.load()?;
            let rows = commands::dump(&run, inputs, &out, exec)?;
            eprintln!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gram: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
