// SPDX-License-Identifier: Apache-2.0

//! Fixed guest-physical layout of a simulated world.
//!
//! ```text
//! 0x0001_0000 .. 0x00c0_0000   boot region (firmware, loader, decompressor)
//! 0x00c0_0000 .. 0x0100_0000   shared region: virtqueues + bounce slots
//! 0x0100_0000 .. 0x42e0_0000   KASLR window: 512 slots of 2 MiB + image
//! 0x4400_0000 .. 0x8000_0000   kernel heap (packet buffers, slab pages)
//! ```

use crate::slat::Gfn;

pub const GUEST_FRAMES: u64 = 0x8_0000;
/// Guest frame `g` is backed by host frame `g + HOST_SFN_BASE`.
pub const HOST_SFN_BASE: u64 = 0x1_0000;
pub const HOST_FRAMES: u64 = HOST_SFN_BASE + GUEST_FRAMES;

pub const BOOT_FIRST_GFN: u64 = 0x10;
pub const SHARED_FIRST_GFN: u64 = 0xc00;
pub const SHARED_END_GFN: u64 = 0x1000;

pub const RX_RING_GFN: Gfn = Gfn(0xc00);
pub const RX_USED_GFN: Gfn = Gfn(0xc01);
pub const TX_RING_GFN: Gfn = Gfn(0xc02);
pub const TX_USED_GFN: Gfn = Gfn(0xc03);
/// Bounce slot `i` starts at this GFN plus `2 * i`.
pub const BOUNCE_FIRST_GFN: u64 = 0xc10;
pub const BOUNCE_SLOT_BYTES: u64 = 0x2000;

pub const KERNEL_FIRST_GFN: u64 = 0x1000;
pub const KASLR_SLOTS: u64 = 512;
pub const KASLR_ALIGN_BYTES: u64 = 2 << 20;
pub const KASLR_ALIGN_FRAMES: u64 = KASLR_ALIGN_BYTES >> 12;
pub const KERNEL_IMAGE_BYTES: u64 = 32 << 20;

pub const HEAP_FIRST_GFN: u64 = 0x4_4000;

pub const PACKET_BUFFER_BYTES: u64 = 0x8000;
pub const PACKET_BUFFER_FRAMES: u64 = PACKET_BUFFER_BYTES >> 12;

pub fn is_shared(gfn: Gfn) -> bool {
    (SHARED_FIRST_GFN..SHARED_END_GFN).contains(&gfn.0)
}

pub fn bounce_slot_gpa(index: u16) -> u64 {
    (BOUNCE_FIRST_GFN << 12) + u64::from(index) * BOUNCE_SLOT_BYTES
}

/// Load address of the kernel for a KASLR slot.
pub fn kernel_base_for_slot(slot: u64) -> Gfn {
    Gfn(KERNEL_FIRST_GFN + (slot % KASLR_SLOTS) * KASLR_ALIGN_FRAMES)
}
