// SPDX-License-Identifier: Apache-2.0

//! Guest rx driver: consumes used buffers, bounces each frame from its shared
//! slot into the current private packet-buffer fragment and re-posts the slot.

use serde::{Deserialize, Serialize};

use super::buffer::PacketBuffer;
use super::ring::{Descriptor, QueueLayout, UsedElem, DESC_BYTES, USED_ELEM_BYTES, VRING_AVAIL_F_NO_INTERRUPT, VRING_DESC_F_WRITE};
use super::VirtioError;
use crate::layout::bounce_slot_gpa;
use crate::vcpu::{Halt, Vcpu};

/// Bytes a fragment keeps free past the frame; a frame that leaves less
/// than this triggers the next size tier.
pub const FRAGMENT_HEADROOM: u32 = 0x10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VirtioMode {
    /// Completion signalled by clearing `VRING_AVAIL_F_NO_INTERRUPT`.
    Legacy,
    /// Completion signalled through `used_event`.
    Modern,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseStage {
    BeforeCopy,
    AfterCopy,
}

/// Guest services the driver depends on.
pub trait RxEnv {
    /// Performs unrelated kernel writes that happen alongside a bounce.
    fn noise(&mut self, vcpu: &mut Vcpu<'_>, stage: NoiseStage, frame_len: u32) -> Result<(), Halt>;

    fn allocate_packet_buffer(&mut self, fragment_size: u32) -> Result<PacketBuffer, VirtioError>;
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum DriverError {
    #[error(transparent)]
    Halt(#[from] Halt),
    #[error(transparent)]
    Virtio(#[from] VirtioError),
}

/// Where one received buffer ended up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BounceRecord {
    pub descriptor: u16,
    pub len: u32,
    pub buffer: PacketBuffer,
    pub fragment: u32,
    pub dest: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RxDriver {
    pub mode: VirtioMode,
    pub queue: QueueLayout,
    pub tiers: Vec<u32>,
    tier: usize,
    pub buffer: PacketBuffer,
    avail_idx: u16,
    last_used: u16,
}

impl RxDriver {
    pub fn new(mode: VirtioMode, queue: QueueLayout, tiers: Vec<u32>, buffer: PacketBuffer) -> Self {
        assert!(!tiers.is_empty());
        let tier = tiers.iter().position(|&t| t == buffer.fragment_size).unwrap_or(0);
        Self {
            mode,
            queue,
            tiers,
            tier,
            buffer,
            avail_idx: 0,
            last_used: 0,
        }
    }

    pub fn current_tier(&self) -> u32 {
        self.tiers[self.tier]
    }

    pub fn last_used(&self) -> u16 {
        self.last_used
    }

    /// Fills the descriptor table with one bounce slot per entry and makes
    /// all of them available.
    pub fn init(&mut self, vcpu: &mut Vcpu<'_>) -> Result<(), Halt> {
        for i in 0..self.queue.size {
            let d = Descriptor {
                addr: bounce_slot_gpa(i),
                len: self.buffer.fragment_size,
                flags: VRING_DESC_F_WRITE,
                next: 0,
            };
            vcpu.write(self.queue.desc_addr(i), &d.to_bytes())?;
            vcpu.write_u16(self.queue.avail_ring_addr(i), i)?;
        }
        self.avail_idx = self.queue.size;
        vcpu.write_u16(self.queue.avail_idx_addr(), self.avail_idx)?;
        vcpu.write_u16(self.queue.avail_flags_addr(), 0)?;
        vcpu.write_u16(self.queue.used_event_addr(), 0)?;
        Ok(())
    }

    /// Interrupt handler body: consumes every pending used buffer.
    pub fn service(&mut self, vcpu: &mut Vcpu<'_>, env: &mut dyn RxEnv) -> Result<Vec<BounceRecord>, DriverError> {
        if self.mode == VirtioMode::Legacy {
            vcpu.write_u16(self.queue.avail_flags_addr(), VRING_AVAIL_F_NO_INTERRUPT)?;
        }
        let mut out = Vec::new();
        while let Some(r) = self.consume(vcpu, env)? {
            out.push(r);
        }
        if self.mode == VirtioMode::Legacy {
            vcpu.write_u16(self.queue.avail_flags_addr(), 0)?;
        }
        Ok(out)
    }

    /// Consumes one used buffer, if any.
    pub fn consume(&mut self, vcpu: &mut Vcpu<'_>, env: &mut dyn RxEnv) -> Result<Option<BounceRecord>, DriverError> {
        let q = self.queue;
        let used_idx = vcpu.read_u16(q.used_idx_addr())?;
        if used_idx == self.last_used {
            return Ok(None);
        }
        let elem = UsedElem::from_bytes(&vcpu.read(q.used_ring_addr(self.last_used), USED_ELEM_BYTES)?);
        let id = elem.id as u16;
        let desc = Descriptor::from_bytes(&vcpu.read(q.desc_addr(id), DESC_BYTES)?);
        let len = elem.len.min(desc.len);

        let frame = vcpu.read(desc.addr, len as usize)?;
        env.noise(vcpu, NoiseStage::BeforeCopy, len)?;

        let fragment = self.buffer.next_free;
        let dest = self.buffer.fragment_addr(fragment);
        vcpu.write(dest, &frame)?;
        let record = BounceRecord {
            descriptor: id,
            len,
            buffer: self.buffer,
            fragment,
            dest,
        };
        self.buffer.next_free += 1;
        self.maybe_resize_fragments(&[len]);
        if self.buffer.is_full() {
            self.buffer = env.allocate_packet_buffer(self.current_tier())?;
        }
        env.noise(vcpu, NoiseStage::AfterCopy, len)?;

        vcpu.write_u32(q.desc_addr(id) + 8, self.buffer.fragment_size)?;
        vcpu.write_u16(q.avail_ring_addr(self.avail_idx), id)?;
        self.avail_idx = self.avail_idx.wrapping_add(1);
        vcpu.write_u16(q.avail_idx_addr(), self.avail_idx)?;

        self.last_used = self.last_used.wrapping_add(1);
        if self.mode == VirtioMode::Modern {
            vcpu.write_u16(q.used_event_addr(), self.last_used)?;
        }
        Ok(Some(record))
    }

    /// Moves to the next size tier once a recent frame nearly filled its
    /// fragment. Takes effect at the next buffer allocation.
    pub fn maybe_resize_fragments(&mut self, recent: &[u32]) {
        let limit = self.buffer.fragment_size.saturating_sub(FRAGMENT_HEADROOM);
        if recent.iter().any(|&l| l > limit) && self.tier + 1 < self.tiers.len() {
            let next = self.tiers[self.tier + 1];
            if next > self.tiers[self.tier] {
                self.tier += 1;
            }
        }
    }
}
