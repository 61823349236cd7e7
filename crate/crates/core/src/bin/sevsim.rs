// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use sevsim::guest::GuestProfile;
use sevsim::harness::{campaign_ok, emit_report, run_campaign, ReportFormat, RunConfig};

fn parse_hex(s: &str) -> Result<u32, String> {
    let t = s.trim_start_matches("0x").trim_start_matches("0X");
    u32::from_str_radix(t, 16).map_err(|e| format!("{s:?}: {e}"))
}

/// Run seeded attack campaigns against simulated guests.
#[derive(Debug, Parser)]
#[command(name = "sevsim", version)]
struct Cli {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    runs: u32,
    /// Built-in profile name (repeatable).
    #[arg(long = "profile")]
    profiles: Vec<String>,
    /// Additional profile loaded from a TOML file (repeatable).
    #[arg(long = "profile-file")]
    profile_files: Vec<PathBuf>,
    /// Run every built-in profile.
    #[arg(long)]
    all_profiles: bool,
    #[arg(long, default_value_t = 64)]
    warmup_max: u32,
    #[arg(long, default_value_t = 10)]
    confirmations: u32,
    /// Enable reverse-map checks in every guest.
    #[arg(long)]
    rmp: bool,
    /// Initial fragment size, in hex.
    #[arg(long, default_value = "0x600", value_parser = parse_hex)]
    fragment_size: u32,
    /// Use a jump-chained two-fragment payload.
    #[arg(long)]
    multi_fragment: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// table or machine.
    #[arg(long, default_value = "machine")]
    format: ReportFormat,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut profiles = Vec::new();
    if cli.all_profiles || (cli.profiles.is_empty() && cli.profile_files.is_empty()) {
        profiles = GuestProfile::all_builtin();
    }
    for name in &cli.profiles {
        match GuestProfile::by_name(name) {
            Ok(p) if !profiles.contains(&p) => profiles.push(p),
            Ok(_) => {}
            Err(e) => {
                eprintln!("sevsim: {e}");
                return ExitCode::from(2);
            }
        }
    }
    for path in &cli.profile_files {
        match GuestProfile::load(path) {
            Ok(p) => profiles.push(p),
            Err(e) => {
                eprintln!("sevsim: {}: {e}", path.display());
                return ExitCode::from(2);
            }
        }
    }

    let config = RunConfig {
        seed: cli.seed,
        runs: cli.runs,
        warmup_max: cli.warmup_max,
        rmp: cli.rmp,
        profiles,
        confirmations: cli.confirmations,
        fragment_size: cli.fragment_size,
        multi_fragment: cli.multi_fragment,
        ..RunConfig::default()
    };

    let started = Instant::now();
    let report = match run_campaign(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("sevsim: {e}");
            return ExitCode::from(2);
        }
    };
    let elapsed = started.elapsed();

    match emit_report(&report, cli.format, cli.out.as_deref()) {
        Ok(text) if cli.out.is_none() => print!("{text}"),
        Ok(_) => {}
        Err(e) => {
            eprintln!("sevsim: {e}");
            return ExitCode::from(2);
        }
    }
    eprintln!(
        "sevsim: {} runs in {:.2} s wall",
        report.runs.len(),
        elapsed.as_secs_f64()
    );
    if campaign_ok(&report) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
