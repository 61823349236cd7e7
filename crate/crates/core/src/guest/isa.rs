// SPDX-License-Identifier: Apache-2.0

//! Three-opcode instruction set standing in for native code.
//!
//! | bytes        | meaning                                        |
//! |--------------|------------------------------------------------|
//! | `F1 r`       | hypercall with exit reason `r`                 |
//! | `C3`         | return                                         |
//! | `E9 lo hi`   | jump, signed 16-bit, relative to the next insn |
//!
//! Jumps are guest-physical. Bytes are fetched through the guest's own key,
//! so anything not written by the guest decodes as noise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hv::HvEvent;
use crate::mem::{Sfn, PAGE_SIZE};
use crate::slat::{Access, Gfn};
use crate::vcpu::{Halt, Vcpu};

pub const OP_HYPERCALL: u8 = 0xf1;
pub const OP_RET: u8 = 0xc3;
pub const OP_JMP: u8 = 0xe9;

/// Instructions executed per entry before the guest is declared wedged.
pub const MAX_INSNS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Insn {
    Hypercall(u8),
    Ret,
    Jmp(i16),
}

impl Insn {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            Insn::Hypercall(_) => 2,
            Insn::Ret => 1,
            Insn::Jmp(_) => 3,
        }
    }

    pub fn encode(self, out: &mut Vec<u8>) {
        match self {
            Insn::Hypercall(r) => out.extend_from_slice(&[OP_HYPERCALL, r]),
            Insn::Ret => out.push(OP_RET),
            Insn::Jmp(rel) => {
                out.push(OP_JMP);
                out.extend_from_slice(&rel.to_le_bytes());
            }
        }
    }
}

pub fn assemble(insns: &[Insn]) -> Vec<u8> {
    let mut out = Vec::new();
    for i in insns {
        i.encode(&mut out);
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("invalid opcode {byte:#04x} at {gpa:#x}")]
    InvalidOpcode { gpa: u64, byte: u8 },
    #[error("truncated instruction at {gpa:#x}")]
    Truncated { gpa: u64 },
}

/// Decodes one instruction from the start of `bytes`; `gpa` is only used
/// for error reporting.
pub fn decode(bytes: &[u8], gpa: u64) -> Result<Insn, IsaError> {
    let op = *bytes.first().ok_or(IsaError::Truncated { gpa })?;
    let insn = match op {
        OP_HYPERCALL => Insn::Hypercall(*bytes.get(1).ok_or(IsaError::Truncated { gpa })?),
        OP_RET => Insn::Ret,
        OP_JMP => {
            let b = bytes.get(1..3).ok_or(IsaError::Truncated { gpa })?;
            Insn::Jmp(i16::from_le_bytes([b[0], b[1]]))
        }
        byte => return Err(IsaError::InvalidOpcode { gpa, byte }),
    };
    Ok(insn)
}

/// Decodes a straight-line byte string, stopping after the first `RET`.
pub fn disassemble(bytes: &[u8]) -> Result<Vec<Insn>, IsaError> {
    let mut out = Vec::new();
    let mut pc = 0usize;
    while pc < bytes.len() {
        let i = decode(&bytes[pc..], pc as u64)?;
        out.push(i);
        pc += i.len();
        if i == Insn::Ret {
            break;
        }
    }
    Ok(out)
}

/// Injected code, possibly split into segments that live in different
/// fragments. Every segment but the last must end in a `JMP`, whose
/// displacement is patched at placement time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadProgram {
    pub segments: Vec<Vec<Insn>>,
}

impl PayloadProgram {
    /// `HYPERCALL reason; RET`.
    pub fn hypercall_ret(reason: u8) -> Self {
        Self {
            segments: vec![vec![Insn::Hypercall(reason), Insn::Ret]],
        }
    }

    /// Two segments: a hypercall, a jump, then a second hypercall and return.
    pub fn chained(first: u8, second: u8) -> Self {
        Self {
            segments: vec![
                vec![Insn::Hypercall(first), Insn::Jmp(0)],
                vec![Insn::Hypercall(second), Insn::Ret],
            ],
        }
    }

    pub fn segment_bytes(&self, i: usize) -> Vec<u8> {
        assemble(&self.segments[i])
    }

    /// Reasons of all hypercalls in program order.
    pub fn hypercalls(&self) -> Vec<u8> {
        self.segments
            .iter()
            .flatten()
            .filter_map(|i| match i {
                Insn::Hypercall(r) => Some(*r),
                _ => None,
            })
            .collect()
    }

    /// Replaces the displacement of the `JMP` ending segment `i`.
    pub fn patch_jump(&mut self, i: usize, rel: i16) {
        match self.segments[i].last_mut() {
            Some(Insn::Jmp(r)) => *r = rel,
            _ => panic!("segment {i} does not end in a jump"),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.segments.len();
        if n == 0 {
            return Err("empty program".into());
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let last = seg.last().ok_or("empty segment")?;
            let ok = if i + 1 < n { matches!(last, Insn::Jmp(_)) } else { *last == Insn::Ret };
            if !ok {
                return Err(format!("segment {i} has a bad terminator"));
            }
            if seg[..seg.len() - 1].iter().any(|x| !matches!(x, Insn::Hypercall(_))) {
                return Err(format!("segment {i} has a control transfer before its end"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuestEvent {
    Hypercall(u8),
    Returned,
    Jumped(u64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("decode fault: {0}")]
    Decode(#[from] IsaError),
    #[error("no return after {MAX_INSNS} instructions")]
    Runaway,
    #[error(transparent)]
    Halt(#[from] Halt),
}

struct Fetcher {
    page: Option<(Gfn, Sfn)>,
}

impl Fetcher {
    fn byte(&mut self, vcpu: &mut Vcpu<'_>, gpa: u64) -> Result<u8, ExecError> {
        let gfn = Gfn::containing(gpa);
        let sfn = match self.page {
            Some((g, s)) if g == gfn => s,
            _ => {
                let s = vcpu.touch(gfn, Access::Execute)?;
                self.page = Some((gfn, s));
                s
            }
        };
        let off = (gpa % PAGE_SIZE as u64) as usize;
        Ok(vcpu.read_frame(sfn, off, 1)?[0])
    }
}

/// Runs code at `gfn` + `page_offset` until `RET`.
pub fn execute_at(vcpu: &mut Vcpu<'_>, gfn: Gfn, page_offset: u32) -> Result<Vec<GuestEvent>, ExecError> {
    let mut fetch = Fetcher { page: None };
    let mut pc = gfn.addr() + u64::from(page_offset);
    let mut events = Vec::new();
    for _ in 0..MAX_INSNS {
        let mut bytes = vec![fetch.byte(vcpu, pc)?];
        let need = match bytes[0] {
            OP_HYPERCALL => 2,
            OP_JMP => 3,
            _ => 1,
        };
        for k in 1..need {
            bytes.push(fetch.byte(vcpu, pc + k)?);
        }
        let insn = decode(&bytes, pc)?;
        let next = pc + insn.len() as u64;
        match insn {
            Insn::Hypercall(reason) => {
                let step = vcpu.hv().steps();
                vcpu.hv_mut().push_event(HvEvent::Hypercall { step, reason });
                events.push(GuestEvent::Hypercall(reason));
                pc = next;
            }
            Insn::Ret => {
                events.push(GuestEvent::Returned);
                return Ok(events);
            }
            Insn::Jmp(rel) => {
                pc = next.wrapping_add(rel as i64 as u64);
                events.push(GuestEvent::Jumped(pc));
            }
        }
    }
    Err(ExecError::Runaway)
}
