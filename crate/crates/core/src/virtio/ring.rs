// SPDX-License-Identifier: Apache-2.0

//! Split-virtqueue memory layout (little-endian, byte exact).
//!
//! ```text
//! descriptor  : addr u64 | len u32 | flags u16 | next u16          (16 bytes)
//! avail ring  : flags u16 | idx u16 | ring[size] u16 | used_event u16
//! used ring   : flags u16 | idx u16 | ring[size] {id u32, len u32} | avail_event u16
//! ```

use serde::{Deserialize, Serialize};

pub const VRING_DESC_F_NEXT: u16 = 1;
pub const VRING_DESC_F_WRITE: u16 = 2;
pub const VRING_AVAIL_F_NO_INTERRUPT: u16 = 1;

pub const DESC_BYTES: usize = 16;
pub const USED_ELEM_BYTES: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub addr: u64,
    pub len: u32,
    pub flags: u16,
    pub next: u16,
}

impl Descriptor {
    pub fn to_bytes(&self) -> [u8; DESC_BYTES] {
        let mut b = [0u8; DESC_BYTES];
        b[0..8].copy_from_slice(&self.addr.to_le_bytes());
        b[8..12].copy_from_slice(&self.len.to_le_bytes());
        b[12..14].copy_from_slice(&self.flags.to_le_bytes());
        b[14..16].copy_from_slice(&self.next.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        Self {
            addr: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            len: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            flags: u16::from_le_bytes(b[12..14].try_into().unwrap()),
            next: u16::from_le_bytes(b[14..16].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsedElem {
    pub id: u32,
    pub len: u32,
}

impl UsedElem {
    pub fn to_bytes(&self) -> [u8; USED_ELEM_BYTES] {
        let mut b = [0u8; USED_ELEM_BYTES];
        b[0..4].copy_from_slice(&self.id.to_le_bytes());
        b[4..8].copy_from_slice(&self.len.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        Self {
            id: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            len: u32::from_le_bytes(b[4..8].try_into().unwrap()),
        }
    }
}

/// Decoded view of an available ring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AvailRing {
    pub flags: u16,
    pub idx: u16,
    pub ring: Vec<u16>,
    pub used_event: u16,
}

impl AvailRing {
    pub fn from_bytes(b: &[u8], size: u16) -> Self {
        let n = size as usize;
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        Self {
            flags: u16_at(0),
            idx: u16_at(2),
            ring: (0..n).map(|i| u16_at(4 + 2 * i)).collect(),
            used_event: u16_at(4 + 2 * n),
        }
    }
}

/// Decoded view of a used ring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsedRing {
    pub flags: u16,
    pub idx: u16,
    pub ring: Vec<UsedElem>,
    pub avail_event: u16,
}

impl UsedRing {
    pub fn from_bytes(b: &[u8], size: u16) -> Self {
        let n = size as usize;
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        Self {
            flags: u16_at(0),
            idx: u16_at(2),
            ring: (0..n)
                .map(|i| UsedElem::from_bytes(&b[4 + USED_ELEM_BYTES * i..]))
                .collect(),
            avail_event: u16_at(4 + USED_ELEM_BYTES * n),
        }
    }
}

/// Guest-physical placement of one split virtqueue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueLayout {
    pub size: u16,
    pub desc: u64,
    pub avail: u64,
    pub used: u64,
}

impl QueueLayout {
    /// Descriptor table and available ring share `ring_page`; the used ring
    /// sits at the start of `used_page`.
    pub fn new(size: u16, ring_page: u64, used_page: u64) -> Self {
        assert!(size.is_power_of_two());
        let desc = ring_page;
        let avail = desc + (DESC_BYTES * size as usize) as u64;
        assert!(avail + Self::avail_bytes(size) as u64 <= ring_page + 4096);
        assert!(Self::used_bytes(size) <= 4096);
        Self {
            size,
            desc,
            avail,
            used: used_page,
        }
    }

    pub fn avail_bytes(size: u16) -> usize {
        6 + 2 * size as usize
    }

    pub fn used_bytes(size: u16) -> usize {
        6 + USED_ELEM_BYTES * size as usize
    }

    pub fn desc_addr(&self, index: u16) -> u64 {
        self.desc + (DESC_BYTES * (index % self.size) as usize) as u64
    }

    pub fn avail_flags_addr(&self) -> u64 {
        self.avail
    }

    pub fn avail_idx_addr(&self) -> u64 {
        self.avail + 2
    }

    /// Slot for free-running index `idx`.
    pub fn avail_ring_addr(&self, idx: u16) -> u64 {
        self.avail + 4 + 2 * (idx % self.size) as u64
    }

    pub fn used_event_addr(&self) -> u64 {
        self.avail + 4 + 2 * self.size as u64
    }

    pub fn used_idx_addr(&self) -> u64 {
        self.used + 2
    }

    pub fn used_ring_addr(&self, idx: u16) -> u64 {
        self.used + 4 + (USED_ELEM_BYTES * (idx % self.size) as usize) as u64
    }

    pub fn avail_event_addr(&self) -> u64 {
        self.used + 4 + (USED_ELEM_BYTES * self.size as usize) as u64
    }
}

/// Event-index interrupt rule: notify iff `event` lies in `[old, new)`.
pub fn vring_need_event(event: u16, new: u16, old: u16) -> bool {
    new.wrapping_sub(event).wrapping_sub(1) < new.wrapping_sub(old)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_bytes_are_little_endian() {
        let d = Descriptor {
            addr: 0x0102_0304_0506_0708,
            len: 0x600,
            flags: VRING_DESC_F_WRITE,
            next: 0xabcd,
        };
        let b = d.to_bytes();
        assert_eq!(
            b,
            [8, 7, 6, 5, 4, 3, 2, 1, 0x00, 0x06, 0, 0, 2, 0, 0xcd, 0xab]
        );
        assert_eq!(Descriptor::from_bytes(&b), d);
    }

    #[test]
    fn layout_offsets() {
        let q = QueueLayout::new(64, 0xc0_0000, 0xc0_1000);
        assert_eq!(q.desc_addr(3), 0xc0_0030);
        assert_eq!(q.avail, 0xc0_0400);
        assert_eq!(q.avail_ring_addr(65), 0xc0_0406);
        assert_eq!(q.used_event_addr(), 0xc0_0484);
        assert_eq!(q.used_ring_addr(2), 0xc0_1014);
        assert_eq!(q.avail_event_addr(), 0xc0_1204);
    }

    #[test]
    fn need_event_wraps() {
        assert!(vring_need_event(5, 6, 5));
        assert!(!vring_need_event(4, 6, 5));
        assert!(vring_need_event(0xffff, 0, 0xffff));
    }
}
