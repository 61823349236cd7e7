// SPDX-License-Identifier: Apache-2.0

//! Guest memory accesses through the SLAT.
//!
//! Every guest access is translated by the hypervisor-controlled SLAT. On a
//! nested fault the access pauses, the [`Controller`] runs, and the access
//! retries exactly once per resume. With the RMP enabled, every translation of
//! a private GFN is also checked against the reverse map.

use thiserror::Error;

use crate::hv::{AccessError, Controller, HvContext, HvEvent, Resume};
use crate::layout;
use crate::mem::{DomainKey, Sfn, PAGE_SIZE};
use crate::slat::{rmp_check, Access, Gfn, RmpViolation, Translation};

/// Resumes granted for one access before the guest is considered hung.
pub const MAX_RESUMES: u32 = 8;

/// Conditions that stop the guest's current activity.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Halt {
    #[error(transparent)]
    Rmp(#[from] RmpViolation),
    #[error("guest hung on {access:?} access to {gfn}")]
    Hang { gfn: Gfn, access: Access },
    #[error(transparent)]
    Access(#[from] AccessError),
}

pub struct Vcpu<'a> {
    hv: &'a mut HvContext,
    key: &'a DomainKey,
    ctrl: &'a mut dyn Controller,
}

impl<'a> Vcpu<'a> {
    pub fn new(hv: &'a mut HvContext, key: &'a DomainKey, ctrl: &'a mut dyn Controller) -> Self {
        Self { hv, key, ctrl }
    }

    pub fn hv(&self) -> &HvContext {
        self.hv
    }

    pub(crate) fn hv_mut(&mut self) -> &mut HvContext {
        self.hv
    }

    pub(crate) fn read_tsc(&mut self) -> u64 {
        self.hv.read_tsc()
    }

    /// Translates one access, running the controller on faults. Returns the
    /// frame and whether the controller asked for a single-step callback.
    fn translate(&mut self, gfn: Gfn, access: Access) -> Result<(Sfn, bool), Halt> {
        let mut single_step = false;
        for _ in 0..=MAX_RESUMES {
            self.hv.tick();
            match self.hv.slat.translate(gfn, access).map_err(AccessError::from)? {
                Translation::Mapped(sfn) => {
                    self.check_rmp(gfn, sfn)?;
                    return Ok((sfn, single_step));
                }
                Translation::Fault(fault) => {
                    single_step = self.ctrl.on_fault(self.hv, &fault) == Resume::SingleStep;
                }
            }
        }
        Err(Halt::Hang { gfn, access })
    }

    fn check_rmp(&mut self, gfn: Gfn, sfn: Sfn) -> Result<(), Halt> {
        if layout::is_shared(gfn) {
            return Ok(());
        }
        if let Some(rmp) = self.hv.rmp() {
            if let Err(v) = rmp_check(rmp, gfn, sfn, self.key.domain()) {
                self.hv.push_event(HvEvent::RmpFault(v));
                return Err(Halt::Rmp(v));
            }
        }
        Ok(())
    }

    fn complete(&mut self, gfn: Gfn, single_step: bool) {
        if single_step {
            self.ctrl.on_single_step(self.hv, gfn);
        }
    }

    /// A dataless access (instruction fetch or first touch of a page).
    pub fn touch(&mut self, gfn: Gfn, access: Access) -> Result<Sfn, Halt> {
        let (sfn, ss) = self.translate(gfn, access)?;
        self.complete(gfn, ss);
        Ok(sfn)
    }

    pub fn read(&mut self, gpa: u64, len: usize) -> Result<Vec<u8>, Halt> {
        let mut out = Vec::with_capacity(len);
        let end = gpa + len as u64;
        let mut pos = gpa;
        while pos < end {
            let gfn = Gfn::containing(pos);
            let off = (pos % PAGE_SIZE as u64) as usize;
            let take = ((PAGE_SIZE - off) as u64).min(end - pos) as usize;
            let (sfn, ss) = self.translate(gfn, Access::Read)?;
            let bytes = self
                .hv
                .memory
                .guest_read(self.key, sfn, off, take)
                .map_err(AccessError::from)?;
            out.extend(bytes);
            self.complete(gfn, ss);
            pos += take as u64;
        }
        Ok(out)
    }

    /// Writes `data`, one access per page touched.
    pub fn write(&mut self, gpa: u64, data: &[u8]) -> Result<(), Halt> {
        let mut done = 0usize;
        while done < data.len() {
            let pos = gpa + done as u64;
            let gfn = Gfn::containing(pos);
            let off = (pos % PAGE_SIZE as u64) as usize;
            let take = (PAGE_SIZE - off).min(data.len() - done);
            let (sfn, ss) = self.translate(gfn, Access::Write)?;
            self.hv
                .memory
                .guest_write(self.key, sfn, off, &data[done..done + take])
                .map_err(AccessError::from)?;
            self.complete(gfn, ss);
            done += take;
        }
        Ok(())
    }

    pub fn read_u16(&mut self, gpa: u64) -> Result<u16, Halt> {
        let b = self.read(gpa, 2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn write_u16(&mut self, gpa: u64, v: u16) -> Result<(), Halt> {
        self.write(gpa, &v.to_le_bytes())
    }

    pub fn write_u32(&mut self, gpa: u64, v: u32) -> Result<(), Halt> {
        self.write(gpa, &v.to_le_bytes())
    }

    /// Reads fetched instruction bytes from an already translated frame.
    pub(crate) fn read_frame(&self, sfn: Sfn, offset: usize, len: usize) -> Result<Vec<u8>, Halt> {
        Ok(self
            .hv
            .memory
            .guest_read(self.key, sfn, offset, len)
            .map_err(AccessError::from)?)
    }
}
