// SPDX-License-Identifier: Apache-2.0

//! A complete simulated host: memory, SLAT, device and one guest VM.
//!
//! [`Machine`] is the only surface attack code is written against. It exposes
//! what a hypervisor really has (raw memory, the SLAT, the device model,
//! interrupt injection and the exported kernel symbols) and nothing of the
//! guest's internal state.

use serde::{Deserialize, Serialize};

use crate::guest::{Guest, GuestEvent, GuestFault, GuestProfile, KernelImage};
use crate::hv::{Controller, HvContext, PassiveHv};
use crate::layout::{
    GUEST_FRAMES, HOST_FRAMES, HOST_SFN_BASE, RX_RING_GFN, RX_USED_GFN, SHARED_END_GFN, SHARED_FIRST_GFN, TX_RING_GFN,
    TX_USED_GFN,
};
use crate::mem::{DomainId, DomainKey, HostMemory, PageOwner, PAGE_SIZE};
use crate::slat::{Gfn, Rmp, RmpViolation, Slat};
use crate::vcpu::{Halt, Vcpu};
use crate::virtio::buffer::{PacketBuffer, DEFAULT_FRAGMENT_SIZE};
use crate::virtio::device::{device_receive, Delivery, NetDevice};
use crate::virtio::driver::{BounceRecord, VirtioMode};
use crate::virtio::packet::{Packet, UdpEndpoints};
use crate::virtio::ring::QueueLayout;
use crate::virtio::VirtioError;

pub const GUEST_DOMAIN: DomainId = DomainId(1);
pub const DEFAULT_QUEUE_SIZE: u16 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub profile: GuestProfile,
    pub seed: u64,
    /// Enables reverse-map checks on every private translation.
    pub rmp: bool,
    pub fragment_size: u32,
    pub queue_size: u16,
}

impl WorldConfig {
    pub fn new(profile: GuestProfile, seed: u64) -> Self {
        Self {
            profile,
            seed,
            rmp: false,
            fragment_size: DEFAULT_FRAGMENT_SIZE,
            queue_size: DEFAULT_QUEUE_SIZE,
        }
    }
}

/// Symbol information a distribution exports for its kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolTable {
    pub nmi_handler_offset: u64,
    pub do_nmi_offset: u64,
    pub pre_handler_accesses: u32,
}

impl SymbolTable {
    pub fn do_nmi_page_offset(&self) -> u32 {
        (self.do_nmi_offset % PAGE_SIZE as u64) as u32
    }
}

/// What the hypervisor learns from one injected NMI.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NmiOutcome {
    /// Exit reasons of hypercalls issued while handling the NMI.
    pub hypercalls: Vec<u8>,
    /// The handler returned normally.
    pub returned: bool,
    pub fault: Option<GuestFault>,
}

impl NmiOutcome {
    pub fn rmp_violation(&self) -> Option<RmpViolation> {
        match &self.fault {
            Some(GuestFault::Halt(Halt::Rmp(v))) => Some(*v),
            _ => None,
        }
    }

    pub fn crashed(&self) -> bool {
        matches!(self.fault, Some(GuestFault::Exec(_) | GuestFault::Crashed))
    }
}

/// Hypervisor-side view of a running world.
pub trait Machine {
    fn hv(&self) -> &HvContext;

    fn hv_mut(&mut self) -> &mut HvContext;

    fn symbols(&self) -> SymbolTable;

    /// Device model receives `packet` from the wire.
    fn deliver(&mut self, packet: &Packet) -> Result<Delivery, VirtioError>;

    /// Lets the guest run until idle, handling its faults with `ctrl`.
    /// Returns the number of rx buffers it consumed.
    fn run_guest(&mut self, ctrl: &mut dyn Controller) -> Result<usize, GuestFault>;

    fn inject_nmi(&mut self, ctrl: &mut dyn Controller) -> NmiOutcome;

    /// Externally observable health check of the guest.
    fn liveness_check(&mut self) -> bool;
}

/// Guest internals, for tests and evaluation only.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub kernel: KernelImage,
    pub buffer: PacketBuffer,
    pub bounces: Vec<BounceRecord>,
    pub noise_pages: Vec<Gfn>,
    pub crashed: bool,
}

pub struct World {
    hv: HvContext,
    key: DomainKey,
    guest: Guest,
    config: WorldConfig,
    probe_counter: u64,
}

impl World {
    /// Creates a powered-off world. The hypervisor may prepare it (e.g. pin
    /// the TSC) before calling [`World::boot`].
    pub fn new(config: WorldConfig) -> Self {
        let mut memory = HostMemory::new(HOST_FRAMES);
        let guest_range = HOST_SFN_BASE..HOST_SFN_BASE + GUEST_FRAMES;
        memory
            .assign(guest_range, PageOwner { domain: GUEST_DOMAIN, private: true })
            .expect("guest range fits host memory");
        memory
            .assign(
                HOST_SFN_BASE + SHARED_FIRST_GFN..HOST_SFN_BASE + SHARED_END_GFN,
                PageOwner { domain: GUEST_DOMAIN, private: false },
            )
            .expect("shared range fits host memory");

        let mut slat = Slat::new(GUEST_FRAMES, HOST_SFN_BASE);
        slat.set_all_present(false);

        let q = config.queue_size;
        let device = NetDevice::new(
            QueueLayout::new(q, RX_RING_GFN.addr(), RX_USED_GFN.addr()),
            QueueLayout::new(q, TX_RING_GFN.addr(), TX_USED_GFN.addr()),
            config.profile.virtio_mode == VirtioMode::Modern,
        );

        let rmp = config.rmp.then(|| {
            let mut r = Rmp::new();
            r.assign_range(0..GUEST_FRAMES, HOST_SFN_BASE, GUEST_DOMAIN)
                .expect("fresh RMP");
            r
        });

        let tsc_start = crate::splitmix64(config.seed ^ 0x7453_435f_7374_6172);
        let hv = HvContext::new(memory, slat, device, rmp, tsc_start);
        let key = DomainKey::derive(GUEST_DOMAIN, config.seed);
        let guest = Guest::new(config.profile.clone(), config.fragment_size, q, config.seed);
        Self {
            hv,
            key,
            guest,
            config,
            probe_counter: 0,
        }
    }

    /// Boots the guest with `ctrl` handling faults. Every first touch of a
    /// page faults as not-present.
    pub fn boot(&mut self, ctrl: &mut dyn Controller) -> Result<KernelImage, GuestFault> {
        let mut vcpu = Vcpu::new(&mut self.hv, &self.key, ctrl);
        let kernel = self.guest.boot(&mut vcpu)?;
        self.hv.slat.set_all_present(true);
        Ok(kernel)
    }

    /// New world booted under a passive hypervisor.
    pub fn booted(config: WorldConfig) -> Result<Self, GuestFault> {
        let mut w = Self::new(config);
        w.boot(&mut PassiveHv)?;
        Ok(w)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn guest(&self) -> &Guest {
        &self.guest
    }

    /// Test hook: see [`Guest::arm_decoy`].
    pub fn arm_decoy(&mut self, sequences: u32) -> Result<Gfn, VirtioError> {
        self.guest.arm_decoy(sequences)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            kernel: self.guest.kernel().cloned().expect("world is booted"),
            buffer: self.guest.driver().expect("world is booted").buffer,
            bounces: self.guest.bounces().to_vec(),
            noise_pages: self.guest.noise_pages().to_vec(),
            crashed: self.guest.crashed(),
        }
    }

    /// Reads guest memory as the guest sees it, following the current SLAT
    /// mapping without permission checks.
    pub fn ground_truth_read(&self, gpa: u64, len: usize) -> Result<Vec<u8>, crate::hv::AccessError> {
        let mut out = Vec::with_capacity(len);
        let end = gpa + len as u64;
        let mut pos = gpa;
        while pos < end {
            let gfn = Gfn::containing(pos);
            let off = (pos % PAGE_SIZE as u64) as usize;
            let take = ((PAGE_SIZE - off) as u64).min(end - pos) as usize;
            let sfn = self.hv.slat.entry(gfn)?.sfn;
            out.extend(self.hv.memory.guest_read(&self.key, sfn, off, take)?);
            pos += take as u64;
        }
        Ok(out)
    }

    /// Convenience: delivers `packet` and lets a passive hypervisor run the
    /// guest until it is consumed.
    pub fn receive(&mut self, packet: &Packet) -> Result<usize, GuestFault> {
        self.deliver(packet)?;
        self.run_guest(&mut PassiveHv)
    }
}

impl Machine for World {
    fn hv(&self) -> &HvContext {
        &self.hv
    }

    fn hv_mut(&mut self) -> &mut HvContext {
        &mut self.hv
    }

    fn symbols(&self) -> SymbolTable {
        let p = &self.config.profile;
        SymbolTable {
            nmi_handler_offset: p.nmi_handler_offset,
            do_nmi_offset: p.do_nmi_offset,
            pre_handler_accesses: p.pre_handler_accesses,
        }
    }

    fn deliver(&mut self, packet: &Packet) -> Result<Delivery, VirtioError> {
        device_receive(&mut self.hv, packet)
    }

    fn run_guest(&mut self, ctrl: &mut dyn Controller) -> Result<usize, GuestFault> {
        if self.guest.crashed() {
            return Err(GuestFault::Crashed);
        }
        if !self.hv.device.irq_pending {
            return Ok(0);
        }
        self.hv.device.irq_pending = false;
        let mut vcpu = Vcpu::new(&mut self.hv, &self.key, ctrl);
        Ok(self.guest.handle_irq(&mut vcpu)?.len())
    }

    fn inject_nmi(&mut self, ctrl: &mut dyn Controller) -> NmiOutcome {
        let mut vcpu = Vcpu::new(&mut self.hv, &self.key, ctrl);
        match self.guest.handle_nmi(&mut vcpu) {
            Ok(events) => NmiOutcome {
                hypercalls: events
                    .iter()
                    .filter_map(|e| match e {
                        GuestEvent::Hypercall(r) => Some(*r),
                        _ => None,
                    })
                    .collect(),
                returned: events.last() == Some(&GuestEvent::Returned),
                fault: None,
            },
            Err(fault) => NmiOutcome {
                hypercalls: Vec::new(),
                returned: false,
                fault: Some(fault),
            },
        }
    }

    /// A fresh NMI must return without side effects and a fresh packet must
    /// land intact in private memory.
    fn liveness_check(&mut self) -> bool {
        if self.guest.crashed() {
            return false;
        }
        let nmi = self.inject_nmi(&mut PassiveHv);
        if nmi.fault.is_some() || !nmi.returned || !nmi.hypercalls.is_empty() {
            return false;
        }
        self.probe_counter += 1;
        let mut payload = b"liveness:".to_vec();
        payload.extend_from_slice(&self.probe_counter.to_le_bytes());
        let packet = Packet::udp(&UdpEndpoints::default(), &payload);
        let before = self.guest.bounces().len();
        if self.receive(&packet).is_err() {
            return false;
        }
        let Some(rec) = self.guest.bounces().get(before).copied() else {
            return false;
        };
        let expected = packet.bytes();
        rec.len as usize == expected.len()
            && self.ground_truth_read(rec.dest, expected.len()).ok() == Some(expected)
    }
}
