//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{out_root, resolve_paths, ConfigTable};
use crate::error::{Result, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "routegan", version, about = "Style-controlled adversarial route generation and planner evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; changes wall time only.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; for render, the SVG file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write scenes, a labelled episode dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        safe: Option<usize>,
        #[arg(long)]
        critical: Option<usize>,
    },
    /// Train the generator, discriminator and auxiliary network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        /// Render a sample rollout every N steps.
        #[arg(long, value_name = "N")]
        sample_every: Option<usize>,
    },
    /// Collision rates of the tested planners against the trained adversary.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Comma-separated planners: data, idm, astar.
        #[arg(long)]
        planners: Option<String>,
    },
    /// 5x5 grid of rollouts over two style dimensions.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// The two swept style dimensions, e.g. `0,1`.
        #[arg(long)]
        dims: Option<String>,
        /// Held-out evaluation episode used as the scenario.
        #[arg(long)]
        episode: Option<usize>,
        /// Drive both vehicles with the generator and sweep each one's q1.
        #[arg(long)]
        joint: bool,
    },
    /// Draw one episode record of a JSONL file as SVG.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        /// 1-based record number.
        #[arg(long)]
        line: Option<usize>,
    },
}

fn path_str(p: PathBuf) -> String {
    p.to_string_lossy().into_owned()
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Render { .. } => "render",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common, .. }
            | Command::Render { common, .. } => common,
        }
    }

    /// Dedicated flags as config assignments.
    fn flag_pairs(&self) -> Vec<(&'static str, String)> {
        let c = self.common();
        let mut v: Vec<(&'static str, Option<String>)> = vec![
            ("seed", c.seed.map(|x| x.to_string())),
            ("workers", c.workers.map(|x| x.to_string())),
            ("out", c.out.clone().map(path_str)),
        ];
        match self {
            Command::GenData { safe, critical, .. } => {
                v.push(("data.safe", safe.map(|x| x.to_string())));
                v.push(("data.critical", critical.map(|x| x.to_string())));
            }
            Command::Train {
                data,
                steps,
                alpha,
                lambda1,
                lambda2,
                sample_every,
                ..
            } => {
                v.push(("data.dir", data.clone().map(path_str)));
                v.push(("routegan.steps", steps.map(|x| x.to_string())));
                v.push(("routegan.alpha", alpha.map(|x| x.to_string())));
                v.push(("routegan.lambda1", lambda1.map(|x| x.to_string())));
                v.push(("routegan.lambda2", lambda2.map(|x| x.to_string())));
                v.push(("train.sample_every", sample_every.map(|x| x.to_string())));
            }
            Command::Eval {
                checkpoint,
                episodes,
                planners,
                ..
            } => {
                v.push(("checkpoint", checkpoint.clone().map(path_str)));
                v.push(("eval.episodes", episodes.map(|x| x.to_string())));
                v.push(("planner.kind", planners.clone()));
            }
            Command::Sweep {
                checkpoint,
                dims,
                episode,
                joint,
                ..
            } => {
                v.push(("checkpoint", checkpoint.clone().map(path_str)));
                v.push(("sweep.dims", dims.clone()));
                v.push(("sweep.episode", episode.map(|x| x.to_string())));
                v.push(("sweep.joint", joint.then(|| "true".to_string())));
            }
            Command::Render { input, line, .. } => {
                v.push(("render.input", input.clone().map(path_str)));
                v.push(("render.line", line.map(|x| x.to_string())));
            }
        }
        v.into_iter().filter_map(|(k, x)| x.map(|x| (k, x))).collect()
    }

    /// Defaults, then the config file, then `--set`, then dedicated flags,
    /// with empty paths filled from the output root.
    pub fn resolve(&self) -> Result<ConfigTable> {
        let c = self.common();
        let mut table = ConfigTable::default();
        if let Some(path) = &c.config {
            table.apply_file(path)?;
        }
        for pair in &c.set {
            table.set_pair(pair)?;
        }
        for (k, v) in self.flag_pairs() {
            table.set(k, &v)?;
        }
        let root = out_root();
        let default_out = match self {
            Command::Render { .. } => {
                let line = table.get("render.line").unwrap_or_default();
                root.join("render").join(format!("episode_{line}.svg"))
            }
            other => root.join(other.name()),
        };
        resolve_paths(&mut table, default_out)?;
        Ok(table)
    }

    pub fn execute(&self) -> Result<()> {
        let table = self.resolve()?;
        match self {
            Command::GenData { .. } => commands::gen_data(&table),
            Command::Train { .. } => commands::train(&table),
            Command::Eval { .. } => commands::eval(&table),
            Command::Sweep { .. } => commands::sweep(&table),
            Command::Render { .. } => commands::render(&table),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match cli.command.execute() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
