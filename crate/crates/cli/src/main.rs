mod commands;
mod manifest;
mod overlay;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use livseg::error::Error;

use crate::commands::*;
use crate::manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "livseg", version, about = "Cascaded liver and lesion segmentation with CRF refinement")]
struct Cli {
    /// Worker threads; results are identical for every setting
    #[arg(long, global = true, value_parser = parse_threads)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Window and equalize a CT volume
    Preprocess(PreprocessArgs),
    /// Run the two-stage cascade with optional CRF refinement
    Infer(InferArgs),
    /// Score a segmentation against a reference
    Eval(EvalArgs),
    /// Render one slice as a colour-coded PNG
    Overlay(OverlayArgs),
    /// Random search over CRF parameters
    Tune(TuneArgs),
    /// Generate a synthetic phantom and an oracle unary
    Phantom(PhantomArgs),
    /// Train the toy unary net on a phantom
    TrainToy(TrainToyArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Preprocess(_) => "preprocess",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Overlay(_) => "overlay",
            Command::Tune(_) => "tune",
            Command::Phantom(_) => "phantom",
            Command::TrainToy(_) => "train-toy",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::Preprocess(a) => &a.out,
            Command::Infer(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Overlay(a) => &a.out,
            Command::Tune(a) => &a.out,
            Command::Phantom(a) => &a.out,
            Command::TrainToy(a) => &a.out,
        }
    }

    fn run(&self, m: &mut Manifest) -> Result<(), CliError> {
        match self {
            Command::Preprocess(a) => preprocess(a, m),
            Command::Infer(a) => infer(a, m),
            Command::Eval(a) => eval(a, m),
            Command::Overlay(a) => overlay(a, m),
            Command::Tune(a) => tune(a, m),
            Command::Phantom(a) => phantom(a, m),
            Command::TrainToy(a) => train_toy(a, m),
        }
    }
}

fn parse_threads(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("{s:?}: expected an integer >= 1")),
    }
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    Data(String),
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(s) => write!(f, "usage: {s}"),
            CliError::Data(s) => write!(f, "data: {s}"),
            CliError::Io(s) => write!(f, "I/O: {s}"),
        }
    }
}

impl CliError {
    /// 1 tool or I/O failure, 2 usage, 3 data or format, 4 numerical.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) | CliError::Core(Error::Io { .. }) => 1,
            CliError::Usage(_) | CliError::Core(Error::InvalidParameter(_)) => 2,
            CliError::Core(Error::Numerical(_)) => 4,
            CliError::Data(_) | CliError::Core(_) => 3,
        }
    }
}

/// Quotes arguments with whitespace so the recorded command line can be
/// pasted back into a shell.
fn shell_join(args: &[String]) -> String {
    args.iter()
        .map(|a| {
            if a.is_empty() || a.contains(|c: char| c.is_whitespace() || c == '\'') {
                format!("'{}'", a.replace('\'', r"'\''"))
            } else {
                a.clone()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let started = Instant::now();

    let mut m = Manifest::default();
    m.set("tool_version", env!("CARGO_PKG_VERSION"));
    m.set("command", cli.cmd.name());
    m.set("argv", shell_join(&argv));
    m.set("config", "none");
    m.set("out", cli.cmd.out().display());
    m.set("seed", "none");

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    m.set("threads", pool.current_num_threads());
    let result = pool.install(|| cli.cmd.run(&mut m));

    m.set("time.total_s", started.elapsed().as_secs_f64());
    let mut code = match &result {
        Ok(()) => 0,
        Err(e) => e.exit_code(),
    };
    m.set("status", if code == 0 { "ok" } else { "error" });
    m.set("exit_code", code);
    if let Err(e) = &result {
        eprintln!("error: {e}");
        m.set("error", e);
    }
    debug_assert!(manifest::REQUIRED_KEYS.iter().all(|k| m.get(k).is_some()));
    if let Err(e) = m.write_atomic(cli.cmd.out()) {
        eprintln!("error: cannot write manifest in {}: {e}", cli.cmd.out().display());
        if code == 0 {
            code = 1;
        }
    }
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Core(Error::InvalidParameter("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::NoLiverFound).exit_code(), 3);
        assert_eq!(CliError::Core(Error::Numerical("nan".into())).exit_code(), 4);
        assert_eq!(CliError::Io("x".into()).exit_code(), 1);
        assert_eq!(CliError::Data("x".into()).exit_code(), 3);
    }

    #[test]
    fn quoting() {
        let args = vec!["a".to_string(), "b c".into(), "it's".into()];
        assert_eq!(shell_join(&args), r"a 'b c' 'it'\''s'");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
