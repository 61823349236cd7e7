// SPDX-License-Identifier: Apache-2.0

//! Emulated virtio-net device (hypervisor side).

use serde::{Deserialize, Serialize};

use super::ring::{vring_need_event, Descriptor, QueueLayout, UsedElem, DESC_BYTES, VRING_AVAIL_F_NO_INTERRUPT};
use super::{Packet, VirtioError};
use crate::hv::HvContext;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetDevice {
    pub rx: QueueLayout,
    /// Present but never serviced; the simulated guest does not transmit.
    pub tx: QueueLayout,
    /// Negotiated event-index interrupt suppression (modern drivers).
    pub event_idx: bool,
    pub last_avail: u16,
    pub used_idx: u16,
    pub irq_pending: bool,
}

impl NetDevice {
    pub fn new(rx: QueueLayout, tx: QueueLayout, event_idx: bool) -> Self {
        Self {
            rx,
            tx,
            event_idx,
            last_avail: 0,
            used_idx: 0,
            irq_pending: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Delivery {
    /// Head descriptor of the first buffer used.
    pub descriptor: u16,
    /// Buffers consumed; frames larger than one buffer are spread over
    /// several, like mergeable receive buffers.
    pub buffers: u16,
    pub interrupt: bool,
}

pub fn read_descriptor(hv: &HvContext, q: &QueueLayout, index: u16) -> Result<Descriptor, VirtioError> {
    Ok(Descriptor::from_bytes(&hv.read_gpa(q.desc_addr(index), DESC_BYTES)?))
}

/// Copies `packet` into the next available rx buffer(s) in shared memory,
/// publishes them on the used ring and decides whether to interrupt.
pub fn device_receive(hv: &mut HvContext, packet: &Packet) -> Result<Delivery, VirtioError> {
    let mut dev = hv.device.clone();
    let q = dev.rx;
    let bytes = packet.bytes();

    let avail_idx = hv.read_u16(q.avail_idx_addr())?;
    let available = avail_idx.wrapping_sub(dev.last_avail);

    let mut plan = Vec::new();
    let mut off = 0usize;
    while off < bytes.len() {
        let n = plan.len() as u16;
        if n >= available {
            return Err(VirtioError::Backpressure);
        }
        let head = hv.read_u16(q.avail_ring_addr(dev.last_avail.wrapping_add(n)))?;
        if head >= q.size {
            return Err(VirtioError::BadDescriptor(head));
        }
        let desc = read_descriptor(hv, &q, head)?;
        if desc.len == 0 {
            return Err(VirtioError::BadDescriptor(head));
        }
        let take = (desc.len as usize).min(bytes.len() - off);
        plan.push((head, desc, off, take));
        off += take;
    }

    let old_used = dev.used_idx;
    for (head, desc, off, take) in &plan {
        hv.write_gpa(desc.addr, &bytes[*off..*off + *take])?;
        let elem = UsedElem {
            id: u32::from(*head),
            len: *take as u32,
        };
        hv.write_gpa(q.used_ring_addr(dev.used_idx), &elem.to_bytes())?;
        dev.used_idx = dev.used_idx.wrapping_add(1);
    }
    dev.last_avail = dev.last_avail.wrapping_add(plan.len() as u16);
    hv.write_u16(q.used_idx_addr(), dev.used_idx)?;

    let interrupt = if dev.event_idx {
        let used_event = hv.read_u16(q.used_event_addr())?;
        vring_need_event(used_event, dev.used_idx, old_used)
    } else {
        hv.read_u16(q.avail_flags_addr())? & VRING_AVAIL_F_NO_INTERRUPT == 0
    };
    dev.irq_pending |= interrupt;
    hv.device = dev;

    Ok(Delivery {
        descriptor: plan[0].0,
        buffers: plan.len() as u16,
        interrupt,
    })
}
