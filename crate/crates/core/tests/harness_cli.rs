// SPDX-License-Identifier: Apache-2.0

use std::process::Command;

use sevsim::guest::{Distro, GuestProfile};
use sevsim::harness::{campaign_ok, emit_report, parse_machine_report, run_campaign, ReportFormat, RunConfig, Stage};

fn small(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        runs: 6,
        ..RunConfig::default()
    }
}

fn sevsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sevsim"))
}

#[test]
fn campaign_is_deterministic_and_byte_identical() {
    let a = run_campaign(&small(3)).unwrap();
    let b = run_campaign(&small(3)).unwrap();
    let ta = emit_report(&a, ReportFormat::Machine, None).unwrap();
    let tb = emit_report(&b, ReportFormat::Machine, None).unwrap();
    assert_eq!(ta, tb);
    assert!(!ta.contains("wall_ms"));
    assert_ne!(ta, emit_report(&run_campaign(&small(4)).unwrap(), ReportFormat::Machine, None).unwrap());
}

#[test]
fn machine_report_round_trips() {
    let r = run_campaign(&small(1)).unwrap();
    let text = emit_report(&r, ReportFormat::Machine, None).unwrap();
    let back = parse_machine_report(&text).unwrap();
    assert_eq!(back.profiles, r.profiles);
    assert_eq!(back.config, r.config);
    assert_eq!(back.runs.len(), 30);
    assert!(campaign_ok(&back));
}

#[test]
fn table_lists_every_profile() {
    let r = run_campaign(&small(2)).unwrap();
    let t = emit_report(&r, ReportFormat::Table, None).unwrap();
    assert!(t.starts_with("VM image"));
    for d in Distro::ALL {
        assert!(t.contains(d.name()), "{t}");
    }
    assert_eq!(t.lines().count(), 2 + 5);
}

#[test]
fn default_format_is_machine() {
    assert_eq!(ReportFormat::default(), ReportFormat::Machine);
    assert_eq!("TABLE".parse::<ReportFormat>().unwrap(), ReportFormat::Table);
    assert!("xml".parse::<ReportFormat>().is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(run_campaign(&RunConfig { runs: 0, ..small(0) }).is_err());
    assert!(run_campaign(&RunConfig { profiles: vec![], ..small(0) }).is_err());
    assert!(run_campaign(&RunConfig { fragment_size: 0x40, ..small(0) }).is_err());
    let mut bad = GuestProfile::builtin(Distro::Rhel);
    bad.do_nmi_offset = bad.nmi_handler_offset + 8;
    assert!(run_campaign(&RunConfig { profiles: vec![bad], ..small(0) }).is_err());
}

#[test]
fn rmp_campaign_stops_every_run_at_remap() {
    let r = run_campaign(&RunConfig { rmp: true, ..small(5) }).unwrap();
    assert!(r.runs.iter().all(|s| !s.success && s.failure_stage == Some(Stage::Remap) && s.rmp_violation));
    assert!(campaign_ok(&r));
    assert!(r.profiles.iter().all(|p| p.failures.get("remap") == Some(&6)));
}

#[test]
fn cli_machine_output_and_exit_code() {
    let out = sevsim().args(["--runs", "2", "--seed", "9", "--profile", "rhel"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = parse_machine_report(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(r.config.profiles, vec!["RHEL".to_string()]);
    assert_eq!(r.runs.len(), 2);
}

#[test]
fn cli_writes_table_and_loads_profile_files() {
    let dir = tempfile::tempdir().unwrap();
    let prof = dir.path().join("custom.toml");
    std::fs::write(
        &prof,
        "name = \"Custom\"\nnoise_write_mean = 10.0\nvirtio_mode = \"modern\"\nnmi_handler_offset = 0xa01000\ndo_nmi_offset = 0x40000\nfragment_tiers = [0x600, 0xc00, 0x1800]\n",
    )
    .unwrap();
    let report = dir.path().join("out.txt");
    let status = sevsim()
        .args(["--runs", "2", "--format", "table", "--profile-file"])
        .arg(&prof)
        .arg("--out")
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success());
    let t = std::fs::read_to_string(&report).unwrap();
    assert!(t.contains("Custom"));
}

#[test]
fn cli_exit_codes() {
    let bad = sevsim().args(["--profile", "plan9"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let rmp = sevsim().args(["--runs", "1", "--rmp", "--profile", "sles"]).output().unwrap();
    assert_eq!(rmp.status.code(), Some(0));
    let starved = sevsim().args(["--runs", "1", "--confirmations", "0"]).output().unwrap();
    assert_eq!(starved.status.code(), Some(2));
}
