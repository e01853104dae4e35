use std::path::Path;
use std::process::ExitCode;

use clap::{Arg, ArgMatches};
use dgcw_cli::alloc::TrackingAlloc;
use dgcw_cli::commands::{self, Command};
use dgcw_cli::config::{RunConfig, KEYS};
use dgcw_cli::CliError;

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc;

fn cli() -> clap::Command {
    let key_args: Vec<Arg> = KEYS
        .iter()
        .map(|k| {
            let help = if k.default.is_empty() {
                k.help.to_string()
            } else {
                format!("{} [default: {}]", k.help, k.default)
            };
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .help(help)
        })
        .collect();
    let config = Arg::new("config")
        .long("config")
        .value_name("PATH")
        .help("flat key = value file applied before the flags");
    clap::Command::new("dgcw")
        .about("Distance guided channel weighting: data, training, evaluation and diagnostics")
        .subcommand_required(true)
        .args_override_self(true)
        .arg_required_else_help(true)
        .subcommands(Command::ALL.map(|c| {
            clap::Command::new(c.name())
                .about(c.about())
                .args_override_self(true)
                .arg(config.clone())
                .args(key_args.clone())
        }))
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(path))?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = name
        .parse::<Command>()
        .and_then(|cmd| Ok((cmd, resolve(sub)?)))
        .and_then(|(cmd, cfg)| commands::run(cmd, &cfg, &mut std::io::stdout()));
    match result {
        Ok(dir) => {
            println!("run directory {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
