// SPDX-License-Identifier: Apache-2.0

//! Hypervisor-side state and the fault-handling contract.
//!
//! [`HvContext`] is everything a (possibly malicious) hypervisor can touch:
//! raw host memory, the SLAT, the emulated network device and the exits the
//! guest produces. It never holds a guest key.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::{HostMemory, MemError, PAGE_SIZE};
use crate::slat::{Gfn, NestedFault, Rmp, RmpViolation, Slat, SlatError};
use crate::virtio::NetDevice;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AccessError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Slat(#[from] SlatError),
}

/// How the guest continues after the hypervisor handled a fault.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resume {
    /// Retry the faulting access.
    Retry,
    /// Retry the access and call [`Controller::on_single_step`] once it
    /// completes.
    SingleStep,
}

/// Hypervisor fault handler. The guest calls into it synchronously on every
/// nested fault and, in single-step mode, after the retried access.
pub trait Controller {
    fn on_fault(&mut self, hv: &mut HvContext, fault: &NestedFault) -> Resume;

    fn on_single_step(&mut self, hv: &mut HvContext, gfn: Gfn) {
        let _ = (hv, gfn);
    }
}

/// A benign hypervisor: populates frames on demand and grants whatever
/// permission was missing.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassiveHv;

impl Controller for PassiveHv {
    fn on_fault(&mut self, hv: &mut HvContext, fault: &NestedFault) -> Resume {
        use crate::slat::FaultCause::*;
        let slat = &mut hv.slat;
        let r = match fault.cause {
            NotPresent => slat.set_present(fault.gfn, true),
            NoWrite => slat.set_writable(fault.gfn, true),
            NoExecute => slat.set_executable(fault.gfn, true),
        };
        debug_assert!(r.is_ok());
        Resume::Retry
    }
}

/// Exits observable by the hypervisor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HvEvent {
    Hypercall { step: u64, reason: u8 },
    RmpFault(RmpViolation),
    Shutdown { step: u64 },
}

/// Time-stamp counter as seen by the guest.
#[derive(Clone, Debug)]
struct Tsc {
    pinned: Option<u64>,
    counter: u64,
}

impl Tsc {
    fn read(&mut self) -> u64 {
        if let Some(c) = self.pinned {
            return c;
        }
        let jitter = crate::splitmix64(self.counter) & 0xffff;
        self.counter = self.counter.wrapping_add(0x1_0000 + jitter);
        self.counter
    }
}

#[derive(Clone, Debug)]
pub struct HvContext {
    pub memory: HostMemory,
    pub slat: Slat,
    pub device: NetDevice,
    rmp: Option<Rmp>,
    tsc: Tsc,
    events: Vec<HvEvent>,
    steps: u64,
}

impl HvContext {
    pub(crate) fn new(memory: HostMemory, slat: Slat, device: NetDevice, rmp: Option<Rmp>, tsc_start: u64) -> Self {
        Self {
            memory,
            slat,
            device,
            rmp,
            tsc: Tsc {
                pinned: None,
                counter: tsc_start,
            },
            events: Vec::new(),
            steps: 0,
        }
    }

    /// The reverse map is owned by the secure processor; the hypervisor can
    /// only look at it.
    pub fn rmp(&self) -> Option<&Rmp> {
        self.rmp.as_ref()
    }

    /// Makes every subsequent guest TSC read return `value`.
    pub fn pin_tsc(&mut self, value: u64) {
        self.tsc.pinned = Some(value);
    }

    pub fn unpin_tsc(&mut self) {
        self.tsc.pinned = None;
    }

    pub(crate) fn read_tsc(&mut self) -> u64 {
        self.tsc.read()
    }

    pub fn events(&self) -> &[HvEvent] {
        &self.events
    }

    pub(crate) fn push_event(&mut self, e: HvEvent) {
        self.events.push(e);
    }

    /// Number of guest memory-access attempts so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub(crate) fn tick(&mut self) -> u64 {
        self.steps += 1;
        self.steps
    }

    /// Reads guest-physical memory through the current SLAT mapping without
    /// permission checks (device-model view).
    pub fn read_gpa(&self, gpa: u64, len: usize) -> Result<Vec<u8>, AccessError> {
        let mut out = Vec::with_capacity(len);
        let mut pos = gpa;
        let end = gpa + len as u64;
        while pos < end {
            let gfn = Gfn::containing(pos);
            let off = (pos % PAGE_SIZE as u64) as usize;
            let take = ((PAGE_SIZE - off) as u64).min(end - pos) as usize;
            let sfn = self.slat.entry(gfn)?.sfn;
            out.extend(self.memory.hv_read(sfn, off, take)?);
            pos += take as u64;
        }
        Ok(out)
    }

    pub fn write_gpa(&mut self, gpa: u64, data: &[u8]) -> Result<(), AccessError> {
        let mut done = 0usize;
        while done < data.len() {
            let pos = gpa + done as u64;
            let gfn = Gfn::containing(pos);
            let off = (pos % PAGE_SIZE as u64) as usize;
            let take = (PAGE_SIZE - off).min(data.len() - done);
            let sfn = self.slat.entry(gfn)?.sfn;
            self.memory.hv_write(sfn, off, &data[done..done + take])?;
            done += take;
        }
        Ok(())
    }

    pub fn read_u16(&self, gpa: u64) -> Result<u16, AccessError> {
        let b = self.read_gpa(gpa, 2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn read_u32(&self, gpa: u64) -> Result<u32, AccessError> {
        let b = self.read_gpa(gpa, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn write_u16(&mut self, gpa: u64, v: u16) -> Result<(), AccessError> {
        self.write_gpa(gpa, &v.to_le_bytes())
    }

    pub fn write_u32(&mut self, gpa: u64, v: u32) -> Result<(), AccessError> {
        self.write_gpa(gpa, &v.to_le_bytes())
    }
}
