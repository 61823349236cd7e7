// SPDX-License-Identifier: Apache-2.0

//! Host physical memory with per-domain keyed encryption.
//!
//! Every host frame is owned by exactly one domain and is either private
//! (stored through the owner's key) or shared (stored verbatim). Private
//! frames are encrypted with a 16-byte-block keyed pad derived from the
//! domain key, the frame number and the block index, so ciphertext moved to
//! another frame no longer decodes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;
pub const PAGE_SHIFT: u32 = 12;
/// Granularity of the address tweak.
pub const TWEAK_BLOCK: usize = 16;

/// Host (system) physical frame number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Sfn(pub u64);

impl Sfn {
    pub fn addr(self) -> u64 {
        self.0 << PAGE_SHIFT
    }
}

impl fmt::Display for Sfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sfn:{:#x}", self.0)
    }
}

/// Isolation domain. Domain 0 is the hypervisor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub u16);

impl DomainId {
    pub const HYPERVISOR: DomainId = DomainId(0);
}

/// Secret key of one isolation domain.
///
/// Only the owning guest holds its key; nothing on the hypervisor side of the
/// simulator stores one.
#[derive(Clone, PartialEq, Eq)]
pub struct DomainKey {
    domain: DomainId,
    key: [u8; 32],
}

impl fmt::Debug for DomainKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DomainKey")
            .field("domain", &self.domain)
            .finish_non_exhaustive()
    }
}

impl DomainKey {
    pub fn new(domain: DomainId, key: [u8; 32]) -> Self {
        Self { domain, key }
    }

    /// Derives the key a secure processor would generate for `domain` in a
    /// world seeded with `world_secret`. Distinct domains get distinct keys.
    pub fn derive(domain: DomainId, world_secret: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"sevsim/domain-key");
        h.update(world_secret.to_le_bytes());
        h.update(domain.0.to_le_bytes());
        let mut key = [0u8; 32];
        key.copy_from_slice(&h.finalize());
        Self { domain, key }
    }

    pub fn domain(&self) -> DomainId {
        self.domain
    }

    fn block_pad(&self, sfn: Sfn, block: u64) -> [u8; TWEAK_BLOCK] {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(sfn.0.to_le_bytes());
        h.update(block.to_le_bytes());
        let digest = h.finalize();
        let mut pad = [0u8; TWEAK_BLOCK];
        pad.copy_from_slice(&digest[..TWEAK_BLOCK]);
        pad
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("access {offset:#x}+{len:#x} exceeds the page")]
    Range { offset: usize, len: usize },
    #[error("{sfn} is outside host memory ({frames} frames)")]
    NoSuchFrame { sfn: Sfn, frames: u64 },
    #[error("{sfn} is private to domain {owner:?}, accessed by {by:?}")]
    DomainViolation {
        sfn: Sfn,
        owner: DomainId,
        by: DomainId,
    },
}

fn check_range(offset: usize, len: usize) -> Result<(), MemError> {
    match offset.checked_add(len) {
        Some(end) if end <= PAGE_SIZE => Ok(()),
        _ => Err(MemError::Range { offset, len }),
    }
}

/// XORs `data` with the keyed pad of (`key`, `sfn`, block index).
///
/// Applying it twice with the same arguments restores the input.
pub fn scramble(key: &DomainKey, sfn: Sfn, offset: usize, data: &[u8]) -> Result<Vec<u8>, MemError> {
    check_range(offset, data.len())?;
    let mut out = data.to_vec();
    let mut pos = 0;
    while pos < out.len() {
        let abs = offset + pos;
        let block = abs / TWEAK_BLOCK;
        let pad = key.block_pad(sfn, block as u64);
        let start_in_block = abs % TWEAK_BLOCK;
        let take = (TWEAK_BLOCK - start_in_block).min(out.len() - pos);
        for i in 0..take {
            out[pos + i] ^= pad[start_in_block + i];
        }
        pos += take;
    }
    Ok(out)
}

/// Ownership record of one host frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageOwner {
    pub domain: DomainId,
    pub private: bool,
}

impl PageOwner {
    pub const HYPERVISOR: PageOwner = PageOwner {
        domain: DomainId::HYPERVISOR,
        private: false,
    };
}

/// Range map from frame number to owner. Ranges never overlap and always
/// cover every frame.
#[derive(Clone, Debug)]
struct OwnerMap {
    // start -> (end, owner)
    ranges: BTreeMap<u64, (u64, PageOwner)>,
}

impl OwnerMap {
    fn new(frames: u64) -> Self {
        let mut ranges = BTreeMap::new();
        if frames > 0 {
            ranges.insert(0, (frames, PageOwner::HYPERVISOR));
        }
        Self { ranges }
    }

    fn get(&self, frame: u64) -> Option<PageOwner> {
        self.ranges
            .range(..=frame)
            .next_back()
            .filter(|(_, (end, _))| frame < *end)
            .map(|(_, (_, owner))| *owner)
    }

    fn split_at(&mut self, at: u64) {
        let hit = self
            .ranges
            .range(..=at)
            .next_back()
            .map(|(s, (e, o))| (*s, *e, *o));
        if let Some((start, end, owner)) = hit {
            if start < at && at < end {
                self.ranges.insert(start, (at, owner));
                self.ranges.insert(at, (end, owner));
            }
        }
    }

    fn assign(&mut self, range: Range<u64>, owner: PageOwner) {
        if range.is_empty() {
            return;
        }
        self.split_at(range.start);
        self.split_at(range.end);
        let inner: Vec<u64> = self.ranges.range(range.clone()).map(|(s, _)| *s).collect();
        for s in inner {
            self.ranges.remove(&s);
        }
        self.ranges.insert(range.start, (range.end, owner));
    }
}

/// Host physical memory. Frames that were never written read as zero in
/// ciphertext space.
#[derive(Clone, Debug)]
pub struct HostMemory {
    frames: u64,
    pages: HashMap<u64, Box<[u8; PAGE_SIZE]>>,
    owners: OwnerMap,
}

impl HostMemory {
    /// Creates `frames` zeroed frames, all shared and owned by the hypervisor.
    pub fn new(frames: u64) -> Self {
        Self {
            frames,
            pages: HashMap::new(),
            owners: OwnerMap::new(frames),
        }
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    fn check_frame(&self, sfn: Sfn) -> Result<(), MemError> {
        if sfn.0 < self.frames {
            Ok(())
        } else {
            Err(MemError::NoSuchFrame {
                sfn,
                frames: self.frames,
            })
        }
    }

    /// Sets the owner of every frame in `range`.
    pub fn assign(&mut self, range: Range<u64>, owner: PageOwner) -> Result<(), MemError> {
        if range.end > self.frames {
            return Err(MemError::NoSuchFrame {
                sfn: Sfn(range.end.saturating_sub(1)),
                frames: self.frames,
            });
        }
        self.owners.assign(range, owner);
        Ok(())
    }

    pub fn owner(&self, sfn: Sfn) -> Result<PageOwner, MemError> {
        self.check_frame(sfn)?;
        Ok(self.owners.get(sfn.0).expect("owner map covers every frame"))
    }

    fn raw(&self, sfn: Sfn, offset: usize, len: usize) -> Vec<u8> {
        match self.pages.get(&sfn.0) {
            Some(page) => page[offset..offset + len].to_vec(),
            None => vec![0; len],
        }
    }

    fn store(&mut self, sfn: Sfn, offset: usize, data: &[u8]) {
        if data.is_empty() {
            return;
        }
        let page = self
            .pages
            .entry(sfn.0)
            .or_insert_with(|| Box::new([0u8; PAGE_SIZE]));
        page[offset..offset + data.len()].copy_from_slice(data);
    }

    fn guest_owner(&self, key: &DomainKey, sfn: Sfn) -> Result<PageOwner, MemError> {
        let owner = self.owner(sfn)?;
        if owner.private && owner.domain != key.domain() {
            return Err(MemError::DomainViolation {
                sfn,
                owner: owner.domain,
                by: key.domain(),
            });
        }
        Ok(owner)
    }

    /// Guest store through the memory controller: private frames are
    /// encrypted with `key`, shared frames hold the plaintext.
    pub fn guest_write(&mut self, key: &DomainKey, sfn: Sfn, offset: usize, data: &[u8]) -> Result<(), MemError> {
        check_range(offset, data.len())?;
        let owner = self.guest_owner(key, sfn)?;
        if owner.private {
            let cipher = scramble(key, sfn, offset, data)?;
            self.store(sfn, offset, &cipher);
        } else {
            self.store(sfn, offset, data);
        }
        Ok(())
    }

    pub fn guest_read(&self, key: &DomainKey, sfn: Sfn, offset: usize, len: usize) -> Result<Vec<u8>, MemError> {
        check_range(offset, len)?;
        let owner = self.guest_owner(key, sfn)?;
        let raw = self.raw(sfn, offset, len);
        if owner.private {
            scramble(key, sfn, offset, &raw)
        } else {
            Ok(raw)
        }
    }

    /// Raw hypervisor read. On private frames this returns ciphertext.
    pub fn hv_read(&self, sfn: Sfn, offset: usize, len: usize) -> Result<Vec<u8>, MemError> {
        check_range(offset, len)?;
        self.check_frame(sfn)?;
        Ok(self.raw(sfn, offset, len))
    }

    /// Raw hypervisor write, bypassing encryption.
    pub fn hv_write(&mut self, sfn: Sfn, offset: usize, data: &[u8]) -> Result<(), MemError> {
        check_range(offset, data.len())?;
        self.check_frame(sfn)?;
        self.store(sfn, offset, data);
        Ok(())
    }
}
