// SPDX-License-Identifier: Apache-2.0

//! Kernel image placement and the boot access trace.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::profile::GuestProfile;
use crate::layout::{kernel_base_for_slot, BOOT_FIRST_GFN, KASLR_ALIGN_FRAMES, KASLR_SLOTS, SHARED_FIRST_GFN};
use crate::mem::PAGE_SIZE;
use crate::slat::{FaultCause, Gfn, NestedFault};

/// Boot-region pages touched before the kernel is decompressed.
pub const BOOT_PREFIX_LEN: usize = 48;
/// Kernel data pages the guest keeps writing to at run time.
pub const KERNEL_DATA_PAGES: u64 = 16;
const DATA_REGION_PAGE: u64 = 0x1400;
const DATA_STRIDE: u64 = 9;

/// KASLR slot derived from two TSC readings.
pub fn kaslr_slot(first: u64, second: u64) -> u64 {
    crate::splitmix64(first ^ second.rotate_left(17)) % KASLR_SLOTS
}

/// Image base the guest picks for the given TSC readings.
pub fn kaslr_base(first: u64, second: u64) -> Gfn {
    kernel_base_for_slot(kaslr_slot(first, second))
}

/// Firmware and loader pages touched before KASLR; a pure function of the
/// profile.
pub fn boot_prefix(profile: &GuestProfile) -> Vec<Gfn> {
    let seed: [u8; 32] = Sha256::digest(profile.name.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let span = (SHARED_FIRST_GFN - BOOT_FIRST_GFN) as usize;
    sample(&mut rng, span, BOOT_PREFIX_LEN)
        .into_iter()
        .map(|i| Gfn(BOOT_FIRST_GFN + i as u64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelImage {
    pub base_gfn: Gfn,
    pub nmi_handler_offset: u64,
    pub do_nmi_offset: u64,
    pub pre_handler_accesses: u32,
}

impl KernelImage {
    pub fn new(base_gfn: Gfn, profile: &GuestProfile) -> Self {
        assert_eq!(base_gfn.0 % KASLR_ALIGN_FRAMES, 0, "kernel base must be 2 MiB aligned");
        Self {
            base_gfn,
            nmi_handler_offset: profile.nmi_handler_offset,
            do_nmi_offset: profile.do_nmi_offset,
            pre_handler_accesses: profile.pre_handler_accesses,
        }
    }

    fn page(&self, offset: u64) -> Gfn {
        self.base_gfn.offset(offset / PAGE_SIZE as u64)
    }

    pub fn handler_gfn(&self) -> Gfn {
        self.page(self.nmi_handler_offset)
    }

    pub fn do_nmi_gfn(&self) -> Gfn {
        self.page(self.do_nmi_offset)
    }

    pub fn do_nmi_page_offset(&self) -> u32 {
        (self.do_nmi_offset % PAGE_SIZE as u64) as u32
    }

    /// Pages of the low-level entry code that run before the handler.
    pub fn pre_handler_gfns(&self) -> Vec<Gfn> {
        let handler = self.handler_gfn();
        let do_nmi = self.do_nmi_gfn();
        (1..)
            .map(|i| handler.offset(i))
            .filter(|g| *g != do_nmi)
            .take(self.pre_handler_accesses as usize)
            .collect()
    }

    pub fn data_gfns(&self) -> Vec<Gfn> {
        (0..KERNEL_DATA_PAGES)
            .map(|i| self.base_gfn.offset(DATA_REGION_PAGE + DATA_STRIDE * i))
            .collect()
    }
}

/// Ordered first-touch pages observed during boot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootTrace {
    pub gfns: Vec<Gfn>,
}

impl BootTrace {
    /// Trace as seen through not-present faults.
    pub fn from_faults(faults: &[NestedFault]) -> Self {
        Self {
            gfns: faults
                .iter()
                .filter(|f| f.cause == FaultCause::NotPresent)
                .map(|f| f.gfn)
                .collect(),
        }
    }

    /// Index of the first entry where the traces differ.
    pub fn first_divergence(&self, other: &BootTrace) -> Option<usize> {
        let common = self.gfns.iter().zip(&other.gfns).take_while(|(a, b)| a == b).count();
        if common == self.gfns.len() && common == other.gfns.len() {
            None
        } else {
            Some(common)
        }
    }
}
