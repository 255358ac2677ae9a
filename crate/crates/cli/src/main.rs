use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ellperc_cli::{execute, parse_config, resolve, validate_text, Format, Overrides, OUT_ENV, SCHEMA};

#[derive(Parser)]
#[command(name = "ellperc", version, about = "Random ellipse percolation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment named in a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Also write long-format plot data.
        #[arg(long)]
        plot_data: bool,
    },
    /// Check a config file and print diagnostics as JSON.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the config JSON schema.
    Schema,
}

fn read(path: &PathBuf) -> Result<String, ExitCode> {
    std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Schema => {
            print!("{SCHEMA}");
            ExitCode::SUCCESS
        }
        Cmd::Validate { config } => {
            let text = match read(&config) {
                Ok(t) => t,
                Err(c) => return c,
            };
            let d = validate_text(&text);
            println!("{}", serde_json::to_string_pretty(&d).expect("json"));
            if d.is_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Cmd::Run { config, seed, threads, out, format, plot_data } => {
            let text = match read(&config) {
                Ok(t) => t,
                Err(c) => return c,
            };
            let (cfg, params) = match parse_config(&text) {
                Ok(x) => x,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let diag = ellperc_cli::validate_params(&params);
            for w in &diag.warnings {
                eprintln!("warning: {w}");
            }
            if !diag.is_ok() {
                for e in &diag.errors {
                    eprintln!("error: {e}");
                }
                return ExitCode::from(2);
            }
            let resolved = resolve(cfg, &Overrides { seed, threads, out, format, plot_data });
            let (manifest, result) = execute(&resolved, &params);
            match result {
                Ok(()) => {
                    eprintln!("wrote {} files to {} in {:.2}s", manifest.files.len() + 1, resolved.out.display(), manifest.wall_time_s);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
