//! `shadefuse` command-line driver.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shadefuse_core::config::Config;

#[derive(Parser, Debug)]
#[command(name = "shadefuse", version, about = "RGB-D fusion with shading-based refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fuse a dataset into a TSDF snapshot and mesh.
    Fuse {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fuse and refine a dataset.
    Refine {
        dataset: PathBuf,
        /// Runs once per value, e.g. `refine.t_sv=0.5,0.2,0.1`, each into its own subdirectory.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        sweep: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a mesh against a reference and optionally score shading and poses.
    Eval {
        #[arg(long, value_name = "PLY")]
        mesh: PathBuf,
        /// Reference mesh; defaults to the noise-free fusion of `--scene`.
        #[arg(long, value_name = "PLY")]
        reference: Option<PathBuf>,
        /// Synthetic dataset directory with `scene.json`.
        #[arg(long, value_name = "DIR")]
        scene: Option<PathBuf>,
        /// SDF snapshot for the shading error; needs `--lighting`.
        #[arg(long, value_name = "PATH", requires = "lighting")]
        sdf: Option<PathBuf>,
        #[arg(long, value_name = "PATH", requires = "sdf")]
        lighting: Option<PathBuf>,
        /// Estimated trajectory for pose errors; needs `--scene`.
        #[arg(long, value_name = "PATH", requires = "scene")]
        trajectory: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(shadefuse_core::Error),
}

impl From<shadefuse_core::Error> for CliError {
    fn from(e: shadefuse_core::Error) -> Self {
        match e {
            shadefuse_core::Error::Config(m) => CliError::Usage(format!("config: {m}")),
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// File config, then `--set` overrides, then `--seed` and `--threads`.
fn load_config(c: &Common) -> Result<Config, CliError> {
    let mut cfg = match &c.config {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    for kv in &c.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Synth { common }
        | Command::Fuse { common, .. }
        | Command::Refine { common, .. }
        | Command::Eval { common, .. } => common.clone(),
    };
    let cfg = load_config(&common)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let out = &common.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
    match cli.command {
        Command::Synth { .. } => commands::synth(&cfg, out),
        Command::Fuse { dataset, .. } => commands::fuse(&cfg, &dataset, out),
        Command::Refine { dataset, sweep, .. } => match sweep {
            Some(s) => commands::sweep(&cfg, &dataset, &s, out),
            None => commands::refine(&cfg, &dataset, out),
        },
        Command::Eval {
            mesh,
            reference,
            scene,
            sdf,
            lighting,
            trajectory,
            ..
        } => commands::eval(
            &cfg,
            &commands::EvalInputs {
                mesh,
                reference,
                scene,
                sdf,
                lighting,
                trajectory,
            },
            out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
