// SPDX-License-Identifier: Apache-2.0

//! Private packet buffers: 32 KiB physically contiguous chunks carved into
//! equally sized fragments, one received frame per fragment.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VirtioError;
use crate::layout::{GUEST_FRAMES, HEAP_FIRST_GFN, PACKET_BUFFER_BYTES, PACKET_BUFFER_FRAMES};
use crate::mem::PAGE_SIZE;
use crate::slat::Gfn;

pub const DEFAULT_FRAGMENT_SIZE: u32 = 0x600;
pub const DEFAULT_FRAGMENT_TIERS: [u32; 3] = [0x600, 0xc00, 0x1800];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentSlot {
    pub index: u32,
    /// Byte offset from the buffer base.
    pub offset: u32,
    /// Page holding the fragment's first byte, relative to the base GFN.
    pub gfn_rel: u32,
    pub page_offset: u32,
}

pub fn fragment_count(fragment_size: u32) -> u32 {
    (PACKET_BUFFER_BYTES as u32) / fragment_size
}

/// Fragment start positions of a packet buffer with `fragment_size`
/// fragments.
pub fn fragment_layout(fragment_size: u32) -> Vec<FragmentSlot> {
    assert!(fragment_size > 0 && u64::from(fragment_size) <= PACKET_BUFFER_BYTES);
    (0..fragment_count(fragment_size))
        .map(|index| {
            let offset = index * fragment_size;
            FragmentSlot {
                index,
                offset,
                gfn_rel: offset / PAGE_SIZE as u32,
                page_offset: offset % PAGE_SIZE as u32,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketBuffer {
    pub base: u64,
    pub fragment_size: u32,
    pub fragment_count: u32,
    pub next_free: u32,
}

impl PacketBuffer {
    pub fn new(base: u64, fragment_size: u32) -> Self {
        assert_eq!(base % PACKET_BUFFER_BYTES, 0, "packet buffers are 32 KiB aligned");
        Self {
            base,
            fragment_size,
            fragment_count: fragment_count(fragment_size),
            next_free: 0,
        }
    }

    pub fn base_gfn(&self) -> Gfn {
        Gfn::containing(self.base)
    }

    pub fn fragment_addr(&self, index: u32) -> u64 {
        self.base + u64::from(index) * u64::from(self.fragment_size)
    }

    pub fn is_full(&self) -> bool {
        self.next_free >= self.fragment_count
    }

    pub fn gfns(&self) -> impl Iterator<Item = Gfn> {
        let base = self.base_gfn();
        (0..PACKET_BUFFER_FRAMES).map(move |i| base.offset(i))
    }
}

/// Seeded kernel-heap allocator at packet-buffer (32 KiB) granularity.
#[derive(Clone, Debug)]
pub struct HeapAllocator {
    rng: ChaCha8Rng,
    first_chunk: u64,
    chunks: u64,
    used: BTreeSet<u64>,
}

impl HeapAllocator {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self::with_range(rng, HEAP_FIRST_GFN, GUEST_FRAMES)
    }

    pub fn with_range(rng: ChaCha8Rng, first_gfn: u64, end_gfn: u64) -> Self {
        assert_eq!(first_gfn % PACKET_BUFFER_FRAMES, 0);
        Self {
            rng,
            first_chunk: first_gfn / PACKET_BUFFER_FRAMES,
            chunks: (end_gfn - first_gfn) / PACKET_BUFFER_FRAMES,
            used: BTreeSet::new(),
        }
    }

    /// Claims a free 32 KiB chunk and returns its first GFN.
    pub fn allocate_chunk(&mut self) -> Result<Gfn, VirtioError> {
        if self.used.len() as u64 >= self.chunks {
            return Err(VirtioError::OutOfMemory);
        }
        // Random probe first, linear scan once crowded.
        for _ in 0..64 {
            let c = self.rng.random_range(0..self.chunks);
            if self.used.insert(c) {
                return Ok(Gfn((self.first_chunk + c) * PACKET_BUFFER_FRAMES));
            }
        }
        let c = (0..self.chunks)
            .find(|c| !self.used.contains(c))
            .ok_or(VirtioError::OutOfMemory)?;
        self.used.insert(c);
        Ok(Gfn((self.first_chunk + c) * PACKET_BUFFER_FRAMES))
    }

    pub fn allocate_packet_buffer(&mut self, fragment_size: u32) -> Result<PacketBuffer, VirtioError> {
        let base = self.allocate_chunk()?;
        Ok(PacketBuffer::new(base.addr(), fragment_size))
    }

    /// Reserves a chunk and returns one random page from it. No other
    /// allocation will ever share that chunk.
    pub fn reserve_page(&mut self) -> Result<Gfn, VirtioError> {
        let base = self.allocate_chunk()?;
        Ok(base.offset(self.rng.random_range(0..PACKET_BUFFER_FRAMES)))
    }
}
