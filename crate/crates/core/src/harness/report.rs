// SPDX-License-Identifier: Apache-2.0

//! Campaign aggregation and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RunConfig;
use crate::attack::{ExperimentStats, PhaseOrder, Stage};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown report format {0:?} (expected table or machine)")]
    Format(String),
    #[error("report has no runs")]
    Empty,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    #[default]
    Machine,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(ReportFormat::Table),
            "" | "machine" | "json" => Ok(ReportFormat::Machine),
            other => Err(ReportError::Format(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub seed: u64,
    pub runs: u32,
    pub warmup_max: u32,
    pub rmp: bool,
    pub confirmations: u32,
    pub fragment_size: u32,
    pub phase_order: PhaseOrder,
    pub multi_fragment: bool,
    pub profiles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub profile: String,
    pub runs: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub write_accesses_mean: f64,
    pub write_accesses_std: f64,
    pub packets_sent_mean: f64,
    pub packets_sent_std: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
    /// Failed runs per stage name.
    pub failures: BTreeMap<String, u32>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stage_name(s: Stage) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl ProfileSummary {
    pub fn from_runs(profile: &str, runs: &[&ExperimentStats]) -> Self {
        let identified: Vec<&&ExperimentStats> = runs.iter().filter(|s| s.packets_sent > 0).collect();
        let (wm, ws) = mean_std(&identified.iter().map(|s| s.write_accesses).collect::<Vec<_>>());
        let (pm, ps) = mean_std(&identified.iter().map(|s| f64::from(s.packets_sent)).collect::<Vec<_>>());
        let (sm, ss) = mean_std(&runs.iter().map(|s| s.steps as f64).collect::<Vec<_>>());
        let successes = runs.iter().filter(|s| s.success).count() as u32;
        let mut failures = BTreeMap::new();
        for s in runs {
            if let Some(stage) = s.failure_stage {
                *failures.entry(stage_name(stage)).or_insert(0) += 1;
            }
        }
        Self {
            profile: profile.to_string(),
            runs: runs.len() as u32,
            successes,
            success_rate: if runs.is_empty() { 0.0 } else { f64::from(successes) / runs.len() as f64 },
            write_accesses_mean: wm,
            write_accesses_std: ws,
            packets_sent_mean: pm,
            packets_sent_std: ps,
            steps_mean: sm,
            steps_std: ss,
            failures,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: ReportConfig,
    pub profiles: Vec<ProfileSummary>,
    pub runs: Vec<ExperimentStats>,
}

impl CampaignReport {
    pub fn new(config: &RunConfig, runs: Vec<ExperimentStats>) -> Self {
        let names: Vec<String> = config.profiles.iter().map(|p| p.name.clone()).collect();
        let profiles = names
            .iter()
            .map(|n| {
                let mine: Vec<&ExperimentStats> = runs.iter().filter(|s| &s.profile == n).collect();
                ProfileSummary::from_runs(n, &mine)
            })
            .collect();
        Self {
            config: ReportConfig {
                seed: config.seed,
                runs: config.runs,
                warmup_max: config.warmup_max,
                rmp: config.rmp,
                confirmations: config.confirmations,
                fragment_size: config.fragment_size,
                phase_order: config.phase_order,
                multi_fragment: config.multi_fragment,
                profiles: names,
            },
            profiles,
            runs,
        }
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.runs.iter().map(|s| s.wall_ms).sum()
    }
}

/// Aligned text table, one row per profile.
pub fn render_table(report: &CampaignReport) -> String {
    let header = ["VM image", "# Write Accesses", "# Sent Packets", "Steps", "Success"];
    let rows: Vec<[String; 5]> = report
        .profiles
        .iter()
        .map(|p| {
            [
                p.profile.clone(),
                format!("{:.2}", p.write_accesses_mean),
                format!("{:.2}", p.packets_sent_mean),
                format!("{:.0}", p.steps_mean),
                format!("{:.1} %", p.success_rate * 100.0),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let mut parts = Vec::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                parts.push(format!("{:<w$}", c, w = widths[i]));
            } else {
                parts.push(format!("{:>w$}", c, w = widths[i]));
            }
        }
        let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    let _ = writeln!(
        out,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
    );
    for r in &rows {
        line(&mut out, r);
    }
    out
}

/// Renders `report` and, if `out` is given, writes it there.
pub fn emit_report(report: &CampaignReport, format: ReportFormat, out: Option<&Path>) -> Result<String, ReportError> {
    if report.runs.is_empty() {
        return Err(ReportError::Empty);
    }
    let text = match format {
        ReportFormat::Table => render_table(report),
        ReportFormat::Machine => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
    };
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    Ok(text)
}

pub fn parse_machine_report(s: &str) -> Result<CampaignReport, ReportError> {
    Ok(serde_json::from_str(s)?)
}
