// SPDX-License-Identifier: Apache-2.0

//! Hypervisor-side code injection into an encrypted guest.
//!
//! The pipeline has three phases:
//!
//! 1. find the page holding `do_nmi` ([`trigger`]),
//! 2. find the private packet buffer frames are bounced into ([`identify`]),
//! 3. send a frame whose code lands at `do_nmi`'s page offset, point the
//!    trigger page at that frame and inject an NMI ([`inject`]).
//!
//! All code here works through [`Machine`] only.

pub mod identify;
pub mod inject;
pub mod tracking;
pub mod trigger;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guest::{GuestFault, PayloadProgram};
use crate::hv::{AccessError, PassiveHv};
use crate::slat::{Gfn, SlatError};
use crate::virtio::packet::{Packet, UdpEndpoints, MIN_FRAME_LEN, UDP_FRAME_HEADER_LEN};
use crate::virtio::VirtioError;
use crate::world::Machine;

pub use identify::{identify_packet_buffer, BufferLocation, BufferSearch, Identification, DEFAULT_CONFIRMATIONS, DEFAULT_PACKET_BUDGET};
pub use inject::{choose_fragment_and_padding, plan_injection, FragmentChoice, InjectionPlan, SegmentPlan};
pub use tracking::{expected_gfns, track_bounce, CompletionReason, WriteSequence};
pub use trigger::{find_base_by_fingerprint, find_trigger_by_probe, pin_kaslr, ExecProbe, TriggerPoint};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttackError {
    #[error("NMI probe failed: {0}")]
    ProbeFailure(&'static str),
    #[error("boot traces are identical")]
    FingerprintIdentical,
    #[error("divergent page {0} is not 2 MiB aligned")]
    FingerprintMisaligned(Gfn),
    #[error("bounce completion never observed")]
    TrackTimeout,
    #[error("no packet buffer confirmed after {packets} packets")]
    IdentifyFailure { packets: u32 },
    #[error("frame of {len:#x} bytes exceeds fragment size {fragment_size:#x}")]
    FrameExceedsFragment { len: u32, fragment_size: u32 },
    #[error("no fragment can place code at page offset {0:#x}")]
    InfeasibleOffset(u32),
    #[error("bad payload: {0}")]
    BadPayload(String),
    #[error(transparent)]
    Guest(#[from] GuestFault),
    #[error(transparent)]
    Virtio(#[from] VirtioError),
    #[error(transparent)]
    Access(#[from] AccessError),
}

impl From<SlatError> for AttackError {
    fn from(e: SlatError) -> Self {
        AttackError::Access(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Trigger,
    Identify,
    Inject,
    Remap,
    Execute,
    Liveness,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseOrder {
    #[default]
    TriggerFirst,
    BufferFirst,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackConfig {
    pub confirmations: u32,
    pub packet_budget: u32,
    pub phase_order: PhaseOrder,
    pub endpoints: UdpEndpoints,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            confirmations: DEFAULT_CONFIRMATIONS,
            packet_budget: DEFAULT_PACKET_BUDGET,
            phase_order: PhaseOrder::TriggerFirst,
            endpoints: UdpEndpoints::default(),
        }
    }
}

/// Telemetry of one attack run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentStats {
    pub profile: String,
    pub run: u64,
    pub seed: u64,
    pub warmup_packets: u32,
    /// Mean tracked writes per probe bounce.
    pub write_accesses: f64,
    /// Probe frames sent while identifying the buffer.
    pub packets_sent: u32,
    pub dummy_packets: u32,
    pub payload_packets: u32,
    /// Simulated guest memory-access attempts during the attack.
    pub steps: u64,
    #[serde(skip_serializing, default)]
    pub wall_ms: f64,
    pub success: bool,
    pub failure_stage: Option<Stage>,
    pub rmp_violation: bool,
    /// Page offset the first payload byte landed at in private memory.
    pub payload_page_offset: Option<u32>,
    pub trigger_offset: u32,
}

/// Minimum-size frame with a random body.
pub fn random_min_frame(ep: &UdpEndpoints, rng: &mut dyn RngCore) -> Packet {
    let mut body = vec![0u8; MIN_FRAME_LEN - UDP_FRAME_HEADER_LEN];
    rng.fill_bytes(&mut body);
    Packet::udp(ep, &body)
}

/// Runs all three phases against `m`.
pub fn run_attack<M: Machine, R: Rng>(m: &mut M, program: &PayloadProgram, config: &AttackConfig, rng: &mut R) -> ExperimentStats {
    let start = m.hv().steps();
    let mut stats = ExperimentStats::default();
    let result = attack_phases(m, program, config, rng, &mut stats);
    if let Err(stage) = result {
        stats.failure_stage = Some(stage);
    } else {
        stats.success = true;
    }
    stats.steps = m.hv().steps() - start;
    stats
}

fn attack_phases<M: Machine, R: Rng>(
    m: &mut M,
    program: &PayloadProgram,
    config: &AttackConfig,
    rng: &mut R,
    stats: &mut ExperimentStats,
) -> Result<(), Stage> {
    let ep = config.endpoints;
    let identify = |m: &mut M, rng: &mut R| {
        identify_packet_buffer(m, config.confirmations, config.packet_budget, &mut || random_min_frame(&ep, rng))
            .map_err(|_| Stage::Identify)
    };
    let (trigger, ident) = match config.phase_order {
        PhaseOrder::TriggerFirst => {
            let t = find_trigger_by_probe(m).map_err(|_| Stage::Trigger)?;
            (t, identify(m, rng)?)
        }
        PhaseOrder::BufferFirst => {
            let i = identify(m, rng)?;
            (find_trigger_by_probe(m).map_err(|_| Stage::Trigger)?, i)
        }
    };
    stats.trigger_offset = trigger.do_nmi_page_offset;
    stats.packets_sent = ident.packets_sent;
    let writes: usize = ident.sequences.iter().map(|s| s.writes.len()).sum();
    stats.write_accesses = writes as f64 / ident.sequences.len() as f64;

    let loc = ident.location;
    let plan = plan_injection(program, &trigger, &loc, UDP_FRAME_HEADER_LEN as u32, &[], &ep).map_err(|_| Stage::Inject)?;
    for _ in 0..plan.dummies {
        let p = random_min_frame(&ep, rng);
        m.deliver(&p).map_err(|_| Stage::Inject)?;
        m.run_guest(&mut PassiveHv).map_err(|_| Stage::Inject)?;
        stats.dummy_packets += 1;
    }

    let mut frames = Vec::new();
    for seg in &plan.segments {
        let seq = track_bounce(m, &seg.packet).map_err(|_| Stage::Inject)?;
        stats.payload_packets += 1;
        let code_off = seg.packet.payload_offset() + seg.choice.pad as usize;
        let code = &seg.packet.payload[seg.choice.pad as usize..];
        let staged = m
            .hv()
            .read_gpa(seq.slot_gpa + code_off as u64, code.len())
            .map_err(|_| Stage::Inject)?;
        let landed = expected_gfns(
            loc.base_gfn,
            seg.choice.fragment,
            seg.packet.total_len as u32,
            loc.fragment_size,
        )
        .map_err(|_| Stage::Inject)?;
        if staged != code || !landed.is_subset(&seq.distinct()) {
            return Err(Stage::Inject);
        }
        let frame = m
            .hv()
            .slat
            .entry(Gfn::containing(seg.code_gpa))
            .map_err(|_| Stage::Inject)?
            .sfn;
        frames.push((seg.exec_gfn, frame));
    }
    stats.payload_page_offset = Some((plan.segments[0].code_gpa % crate::mem::PAGE_SIZE as u64) as u32);

    for (gfn, frame) in &frames {
        m.hv_mut().slat.remap(*gfn, *frame).map_err(|_| Stage::Remap)?;
    }
    let outcome = m.inject_nmi(&mut PassiveHv);
    for (gfn, _) in &frames {
        m.hv_mut().slat.restore_mapping(*gfn).map_err(|_| Stage::Remap)?;
    }
    if outcome.rmp_violation().is_some() {
        stats.rmp_violation = true;
        return Err(Stage::Remap);
    }
    if outcome.fault.is_some() || !outcome.returned || outcome.hypercalls != program.hypercalls() {
        return Err(Stage::Execute);
    }
    if !m.liveness_check() {
        return Err(Stage::Liveness);
    }
    Ok(())
}
