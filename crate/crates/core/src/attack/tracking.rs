// SPDX-License-Identifier: Apache-2.0

//! Recording the guest's writes while it bounces one received frame.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::hv::{Controller, HvContext, PassiveHv, Resume};
use crate::mem::PAGE_SIZE;
use crate::slat::{FaultCause, Gfn, NestedFault};
use crate::virtio::device::read_descriptor;
use crate::virtio::packet::Packet;
use crate::virtio::ring::{QueueLayout, UsedElem, USED_ELEM_BYTES, VRING_AVAIL_F_NO_INTERRUPT};
use crate::world::Machine;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompletionReason {
    UsedEventAdvanced,
    NoInterruptCleared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSequence {
    /// Written GFNs in order, one entry per write access.
    pub writes: Vec<Gfn>,
    pub completion: CompletionReason,
    /// Length the device wrote into each buffer the frame occupied.
    pub chunks: Vec<u32>,
    /// Descriptor length the guest re-posted after consuming the frame.
    pub descriptor_len: u32,
    /// Shared bounce slot holding the start of the frame.
    pub slot_gpa: u64,
}

impl WriteSequence {
    pub fn distinct(&self) -> BTreeSet<Gfn> {
        self.writes.iter().copied().collect()
    }
}

/// Pages covered by a frame of `len` bytes at fragment `index` of the buffer
/// at `base`.
pub fn expected_gfns(base: Gfn, index: u32, len: u32, fragment_size: u32) -> Result<BTreeSet<Gfn>, AttackError> {
    if len == 0 || len > fragment_size {
        return Err(AttackError::FrameExceedsFragment { len, fragment_size });
    }
    let start = base.addr() + u64::from(index) * u64::from(fragment_size);
    let end = start + u64::from(len);
    let page = PAGE_SIZE as u64;
    Ok((start / page..=(end - 1) / page).map(Gfn).collect())
}

struct Tracker {
    queue: QueueLayout,
    event_idx: bool,
    bounce_gfns: BTreeSet<Gfn>,
    tracking: bool,
    writes: Vec<Gfn>,
    done: Option<CompletionReason>,
}

impl Tracker {
    fn completed(&self, hv: &HvContext) -> Option<CompletionReason> {
        if self.event_idx {
            let used_event = hv.read_u16(self.queue.used_event_addr()).ok()?;
            (used_event == hv.device.used_idx).then_some(CompletionReason::UsedEventAdvanced)
        } else {
            let flags = hv.read_u16(self.queue.avail_flags_addr()).ok()?;
            (flags & VRING_AVAIL_F_NO_INTERRUPT == 0).then_some(CompletionReason::NoInterruptCleared)
        }
    }
}

impl Controller for Tracker {
    fn on_fault(&mut self, hv: &mut HvContext, fault: &NestedFault) -> Resume {
        match fault.cause {
            FaultCause::NotPresent if !self.tracking && self.bounce_gfns.contains(&fault.gfn) => {
                for g in &self.bounce_gfns {
                    let _ = hv.slat.set_present(*g, true);
                }
                let _ = hv.slat.enable_write_tracking(self.bounce_gfns.iter().copied());
                self.tracking = true;
                Resume::Retry
            }
            FaultCause::NoWrite if self.tracking && self.done.is_none() => {
                self.writes.push(fault.gfn);
                let _ = hv.slat.set_writable(fault.gfn, true);
                Resume::SingleStep
            }
            _ => PassiveHv.on_fault(hv, fault),
        }
    }

    fn on_single_step(&mut self, hv: &mut HvContext, gfn: Gfn) {
        if self.done.is_some() {
            return;
        }
        let _ = hv.slat.set_writable(gfn, false);
        if gfn == Gfn::containing(self.queue.avail) {
            if let Some(reason) = self.completed(hv) {
                self.done = Some(reason);
                hv.slat.disable_write_tracking();
            }
        }
    }
}

/// Delivers `packet` and records every guest write between the guest's
/// first read of the bounce slot and the driver's completion signal.
pub fn track_bounce<M: Machine>(m: &mut M, packet: &Packet) -> Result<WriteSequence, AttackError> {
    let queue = m.hv().device.rx;
    let used_before = m.hv().device.used_idx;
    let delivery = m.deliver(packet)?;

    let mut bounce_gfns = BTreeSet::new();
    let mut chunks = Vec::new();
    let mut slot_gpa = None;
    for i in 0..delivery.buffers {
        let hv = m.hv();
        let elem = UsedElem::from_bytes(&hv.read_gpa(queue.used_ring_addr(used_before.wrapping_add(i)), USED_ELEM_BYTES)?);
        let desc = read_descriptor(hv, &queue, elem.id as u16)?;
        slot_gpa.get_or_insert(desc.addr);
        let first = Gfn::containing(desc.addr);
        let last = Gfn::containing(desc.addr + u64::from(elem.len.max(1)) - 1);
        bounce_gfns.extend((first.0..=last.0).map(Gfn));
        chunks.push(elem.len);
    }
    let last_desc = {
        let hv = m.hv();
        let elem = UsedElem::from_bytes(&hv.read_gpa(
            queue.used_ring_addr(used_before.wrapping_add(delivery.buffers - 1)),
            USED_ELEM_BYTES,
        )?);
        elem.id as u16
    };

    let snap = m.hv().slat.snapshot_permissions();
    for g in &bounce_gfns {
        m.hv_mut().slat.set_present(*g, false)?;
    }
    let mut tracker = Tracker {
        queue,
        event_idx: m.hv().device.event_idx,
        bounce_gfns,
        tracking: false,
        writes: Vec::new(),
        done: None,
    };
    let run = m.run_guest(&mut tracker);
    m.hv_mut().slat.restore_permissions(&snap);
    run?;

    let completion = tracker.done.ok_or(AttackError::TrackTimeout)?;
    let descriptor_len = read_descriptor(m.hv(), &queue, last_desc)?.len;
    Ok(WriteSequence {
        writes: tracker.writes,
        completion,
        chunks,
        descriptor_len,
        slot_gpa: slot_gpa.expect("delivery uses at least one buffer"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossing_examples() {
        let b = Gfn(0x4_4000);
        assert_eq!(expected_gfns(b, 2, 0x40, 0x600).unwrap(), BTreeSet::from([b]));
        assert_eq!(expected_gfns(b, 2, 0x500, 0x600).unwrap(), BTreeSet::from([b, b.offset(1)]));
        assert_eq!(expected_gfns(b, 0, 0x600, 0x600).unwrap(), BTreeSet::from([b]));
        assert!(expected_gfns(b, 0, 0x601, 0x600).is_err());
    }
}
