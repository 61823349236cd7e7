// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulator of a confidential VM with encrypted memory, a
//! hypervisor-controlled SLAT and a virtio-net receive path, together with a
//! hypervisor-side code-injection attack against it.

pub mod attack;
pub mod guest;
pub mod harness;
pub mod hv;
pub mod layout;
pub mod mem;
pub mod slat;
pub mod vcpu;
pub mod virtio;
pub mod world;

/// SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
