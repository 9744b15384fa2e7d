// SPDX-License-Identifier: Apache-2.0

use std::process::ExitCode;

use clap::Parser;
use stiffsim::cli::{parse_config, run, CliArgs};

fn main() -> ExitCode {
    let args = CliArgs::parse();
    let result = parse_config(&args).and_then(|cfg| run(&cfg).map(|s| (cfg, s)));
    match result {
        Ok((cfg, summary)) => {
            for (name, flag) in &summary.flags {
                let state = match flag {
                    Some(true) => "pass",
                    Some(false) => "FAIL",
                    None => "n/a",
                };
                println!("{name}: {state}");
            }
            println!("artifacts in {}", cfg.out.display());
            if summary.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
