use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use shapeopt_cli::commands::{cmd_genmesh, cmd_info, cmd_run, cmd_taylor, MeshKind};
use shapeopt_cli::config::RunConfig;
use shapeopt_cli::{CliError, EXIT_ERROR, EXIT_OK};

#[derive(Parser)]
#[command(name = "shapeopt", version, about = "Moving-mesh shape optimization in 2D")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Channel,
    Cantilever,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the design described by a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output` in the configuration.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check derivatives by finite differences along random directions.
    Taylor {
        #[arg(long)]
        config: PathBuf,
        /// Writes the resolved configuration and report here when given.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        directions: Option<usize>,
        /// Largest step; halved `halvings` times.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        halvings: Option<usize>,
    },
    /// Generate a structured mesh.
    Genmesh {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 1.0)]
        length: f64,
        #[arg(long, default_value_t = 1.0)]
        height: f64,
        #[arg(long, default_value_t = 8)]
        nx: usize,
        #[arg(long, default_value_t = 8)]
        ny: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print counts, markers and element quality of a mesh file.
    Info { path: PathBuf },
}

fn load(config: &Path, seed: Option<u64>) -> Result<(RunConfig, PathBuf), CliError> {
    let mut c = RunConfig::load(config)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    let dir = config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((c, dir))
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { config, output, seed } => {
            let (c, dir) = load(&config, seed)?;
            let out = output.unwrap_or_else(|| dir.join(&c.output));
            let outcome = cmd_run(&c, &dir, &out)?;
            print!("{}", outcome.summary());
            Ok(outcome.exit_code)
        }
        Command::Taylor {
            config,
            output,
            seed,
            directions,
            epsilon,
            halvings,
        } => {
            let (mut c, dir) = load(&config, seed)?;
            if let Some(d) = directions {
                c.taylor.directions = d;
            }
            if let Some(e) = epsilon {
                c.taylor.epsilon0 = e;
            }
            if let Some(h) = halvings {
                c.taylor.halvings = h;
            }
            c.validate()?;
            let outcome = cmd_taylor(&c, &dir)?;
            let report = outcome.render();
            print!("{report}");
            if let Some(out) = output {
                std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
                for (name, text) in [("config.toml", c.to_toml()), ("taylor.txt", report)] {
                    let p = out.join(name);
                    std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                }
            }
            Ok(outcome.exit_code())
        }
        Command::Genmesh {
            kind,
            length,
            height,
            nx,
            ny,
            output,
        } => {
            let kind = match kind {
                Kind::Channel => MeshKind::Channel,
                Kind::Cantilever => MeshKind::Cantilever,
            };
            let mesh = cmd_genmesh(kind, length, height, nx, ny, &output)?;
            println!(
                "wrote {} ({} vertices, {} triangles)",
                output.join("mesh.mesh").display(),
                mesh.num_vertices(),
                mesh.num_triangles()
            );
            Ok(EXIT_OK)
        }
        Command::Info { path } => {
            print!("{}", cmd_info(&path)?);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    };
    ExitCode::from(code as u8)
}
