// SPDX-License-Identifier: Apache-2.0

//! Repeated seeded attack runs across guest profiles.

pub mod report;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{random_min_frame, run_attack, AttackConfig, PhaseOrder, DEFAULT_CONFIRMATIONS, DEFAULT_PACKET_BUDGET};
use crate::guest::{GuestProfile, PayloadProgram};
use crate::virtio::buffer::DEFAULT_FRAGMENT_SIZE;
use crate::world::{World, WorldConfig};

pub use crate::attack::{ExperimentStats, Stage};
pub use report::{emit_report, parse_machine_report, render_table, CampaignReport, ProfileSummary, ReportError, ReportFormat};

/// Exit reason of the default payload.
pub const PAYLOAD_REASON: u8 = 0xff;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub runs: u32,
    /// Warm-up frames before each attack are drawn from `0..=warmup_max`.
    pub warmup_max: u32,
    pub rmp: bool,
    pub profiles: Vec<GuestProfile>,
    pub confirmations: u32,
    pub fragment_size: u32,
    pub phase_order: PhaseOrder,
    /// Use a two-segment, jump-chained payload.
    pub multi_fragment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 1000,
            warmup_max: 64,
            rmp: false,
            profiles: GuestProfile::all_builtin(),
            confirmations: DEFAULT_CONFIRMATIONS,
            fragment_size: DEFAULT_FRAGMENT_SIZE,
            phase_order: PhaseOrder::TriggerFirst,
            multi_fragment: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(HarnessError::Config("runs must be at least 1".into()));
        }
        if self.profiles.is_empty() {
            return Err(HarnessError::Config("no profiles selected".into()));
        }
        if self.confirmations == 0 {
            return Err(HarnessError::Config("confirmations must be at least 1".into()));
        }
        if !(0x100..=0x8000).contains(&self.fragment_size) {
            return Err(HarnessError::Config(format!(
                "fragment size {:#x} outside 0x100..=0x8000",
                self.fragment_size
            )));
        }
        for p in &self.profiles {
            p.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn payload(&self) -> PayloadProgram {
        if self.multi_fragment {
            PayloadProgram::chained(0xfe, PAYLOAD_REASON)
        } else {
            PayloadProgram::hypercall_ret(PAYLOAD_REASON)
        }
    }
}

/// Seed of run `run` for the profile at `profile_index`.
pub fn run_seed(seed: u64, profile_index: usize, run: u32) -> u64 {
    crate::splitmix64(seed ^ crate::splitmix64(((profile_index as u64) << 32) | u64::from(run)))
}

/// One fresh world, warm-up traffic, then the full attack.
pub fn run_one(config: &RunConfig, profile_index: usize, run: u32) -> ExperimentStats {
    let profile = &config.profiles[profile_index];
    let seed = run_seed(config.seed, profile_index, run);
    let started = Instant::now();

    let mut wc = WorldConfig::new(profile.clone(), seed);
    wc.rmp = config.rmp;
    wc.fragment_size = config.fragment_size;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let attack = AttackConfig {
        confirmations: config.confirmations,
        packet_budget: DEFAULT_PACKET_BUDGET,
        phase_order: config.phase_order,
        ..AttackConfig::default()
    };

    let mut stats = match World::booted(wc) {
        Ok(mut world) => {
            let warmup = rng.random_range(0..=config.warmup_max);
            let ok = (0..warmup).all(|_| world.receive(&random_min_frame(&attack.endpoints, &mut rng)).is_ok());
            let mut s = if ok {
                run_attack(&mut world, &config.payload(), &attack, &mut rng)
            } else {
                ExperimentStats {
                    failure_stage: Some(Stage::Identify),
                    ..ExperimentStats::default()
                }
            };
            s.warmup_packets = warmup;
            s
        }
        Err(_) => ExperimentStats {
            failure_stage: Some(Stage::Trigger),
            ..ExperimentStats::default()
        },
    };
    stats.profile = profile.name.clone();
    stats.run = u64::from(run);
    stats.seed = seed;
    stats.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    stats
}

/// Runs every (profile, run) pair, in parallel, and aggregates the results.
/// The report depends only on `config`.
pub fn run_campaign(config: &RunConfig) -> Result<CampaignReport, HarnessError> {
    config.validate()?;
    let jobs: Vec<(usize, u32)> = (0..config.profiles.len())
        .flat_map(|p| (0..config.runs).map(move |r| (p, r)))
        .collect();
    let runs: Vec<ExperimentStats> = jobs.par_iter().map(|&(p, r)| run_one(config, p, r)).collect();
    Ok(CampaignReport::new(config, runs))
}

/// Whether a campaign met its goal: every run succeeded, or with the RMP
/// enabled, every run was stopped at the remap.
pub fn campaign_ok(report: &CampaignReport) -> bool {
    if report.config.rmp {
        report
            .runs
            .iter()
            .all(|s| !s.success && s.failure_stage == Some(Stage::Remap))
    } else {
        report.runs.iter().all(|s| s.success)
    }
}
