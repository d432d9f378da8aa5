mod args;
mod manifest;
mod report;
mod run;

use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Cmd};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("."));
    let argv: Vec<String> = strip_out_dir(std::env::args().skip(1).collect());
    let outcome = panic::catch_unwind(move || match cli.cmd {
        Cmd::Replay(a) => manifest::replay(&a.manifest).map(|k| println!("replay identical: {k} outputs")),
        cmd => manifest::run_recorded(cmd, &out_dir, argv),
    });
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(3),
    }
}

/// Command line without the output directory, which does not affect results.
fn strip_out_dir(args: Vec<String>) -> Vec<String> {
    let mut kept = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--out-dir" {
            it.next();
        } else if !a.starts_with("--out-dir=") {
            kept.push(a);
        }
    }
    kept
}
