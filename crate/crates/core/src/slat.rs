// SPDX-License-Identifier: Apache-2.0

//! Second-level address translation.
//!
//! The table is logically dense: every GFN below `guest_frames` has an entry.
//! Mappings default to `sfn = gfn + sfn_base` and permissions default to a
//! table-wide value; only deviations are stored. Bulk operations such as
//! revoking execute on every GFN therefore cost O(deviations), not O(frames).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::{DomainId, Sfn, PAGE_SHIFT};

/// Guest physical frame number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Gfn(pub u64);

impl Gfn {
    pub fn addr(self) -> u64 {
        self.0 << PAGE_SHIFT
    }

    pub fn containing(gpa: u64) -> Gfn {
        Gfn(gpa >> PAGE_SHIFT)
    }

    pub fn offset(self, delta: u64) -> Gfn {
        Gfn(self.0 + delta)
    }
}

impl fmt::Display for Gfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gfn:{:#x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Access {
    Read,
    Write,
    Execute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultCause {
    NotPresent,
    NoWrite,
    NoExecute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedFault {
    pub seq: u64,
    pub gfn: Gfn,
    pub access: Access,
    pub cause: FaultCause,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlatEntry {
    pub sfn: Sfn,
    pub present: bool,
    pub writable: bool,
    pub executable: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SlatError {
    #[error("{0} is not mapped in the SLAT")]
    Unmapped(Gfn),
}

/// Outcome of one translation attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Translation {
    Mapped(Sfn),
    Fault(NestedFault),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Perms {
    present: bool,
    writable: bool,
    executable: bool,
}

impl Perms {
    const ALL: Perms = Perms {
        present: true,
        writable: true,
        executable: true,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct PermOverride {
    present: Option<bool>,
    writable: Option<bool>,
    executable: Option<bool>,
}

impl PermOverride {
    fn is_empty(&self) -> bool {
        self.present.is_none() && self.writable.is_none() && self.executable.is_none()
    }
}

/// Saved permission state, restorable with [`Slat::restore_permissions`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermSnapshot {
    default: Perms,
    overrides: BTreeMap<u64, PermOverride>,
}

#[derive(Clone, Debug)]
pub struct Slat {
    guest_frames: u64,
    sfn_base: u64,
    default: Perms,
    overrides: HashMap<u64, PermOverride>,
    remapped: HashMap<u64, Sfn>,
    next_seq: u64,
    faults: Vec<NestedFault>,
}

impl Slat {
    /// Identity-offset table: GFN `g` maps to `Sfn(g + sfn_base)` with full
    /// permissions.
    pub fn new(guest_frames: u64, sfn_base: u64) -> Self {
        Self {
            guest_frames,
            sfn_base,
            default: Perms::ALL,
            overrides: HashMap::new(),
            remapped: HashMap::new(),
            next_seq: 0,
            faults: Vec::new(),
        }
    }

    pub fn guest_frames(&self) -> u64 {
        self.guest_frames
    }

    fn check(&self, gfn: Gfn) -> Result<(), SlatError> {
        if gfn.0 < self.guest_frames {
            Ok(())
        } else {
            Err(SlatError::Unmapped(gfn))
        }
    }

    /// The mapping installed at construction, independent of remaps.
    pub fn original_sfn(&self, gfn: Gfn) -> Result<Sfn, SlatError> {
        self.check(gfn)?;
        Ok(Sfn(gfn.0 + self.sfn_base))
    }

    pub fn entry(&self, gfn: Gfn) -> Result<SlatEntry, SlatError> {
        self.check(gfn)?;
        let sfn = self
            .remapped
            .get(&gfn.0)
            .copied()
            .unwrap_or(Sfn(gfn.0 + self.sfn_base));
        let o = self.overrides.get(&gfn.0).copied().unwrap_or_default();
        Ok(SlatEntry {
            sfn,
            present: o.present.unwrap_or(self.default.present),
            writable: o.writable.unwrap_or(self.default.writable),
            executable: o.executable.unwrap_or(self.default.executable),
        })
    }

    /// Translates `gfn` for `access`. Permission failures are logged with a
    /// fresh sequence number and returned as [`Translation::Fault`].
    pub fn translate(&mut self, gfn: Gfn, access: Access) -> Result<Translation, SlatError> {
        let e = self.entry(gfn)?;
        let cause = if !e.present {
            Some(FaultCause::NotPresent)
        } else {
            match access {
                Access::Read => None,
                Access::Write if !e.writable => Some(FaultCause::NoWrite),
                Access::Execute if !e.executable => Some(FaultCause::NoExecute),
                _ => None,
            }
        };
        Ok(match cause {
            None => Translation::Mapped(e.sfn),
            Some(cause) => {
                let fault = NestedFault {
                    seq: self.next_seq,
                    gfn,
                    access,
                    cause,
                };
                self.next_seq += 1;
                self.faults.push(fault);
                Translation::Fault(fault)
            }
        })
    }

    pub fn faults(&self) -> &[NestedFault] {
        &self.faults
    }

    fn with_override(&mut self, gfn: Gfn, f: impl FnOnce(&mut PermOverride)) -> Result<(), SlatError> {
        self.check(gfn)?;
        let o = self.overrides.entry(gfn.0).or_default();
        f(o);
        if o.is_empty() {
            self.overrides.remove(&gfn.0);
        }
        Ok(())
    }

    fn clear_field(&mut self, f: impl Fn(&mut PermOverride)) {
        self.overrides.retain(|_, o| {
            f(o);
            !o.is_empty()
        });
    }

    pub fn set_present(&mut self, gfn: Gfn, present: bool) -> Result<(), SlatError> {
        let default = self.default.present;
        self.with_override(gfn, |o| o.present = (present != default).then_some(present))
    }

    pub fn set_writable(&mut self, gfn: Gfn, writable: bool) -> Result<(), SlatError> {
        let default = self.default.writable;
        self.with_override(gfn, |o| o.writable = (writable != default).then_some(writable))
    }

    pub fn set_executable(&mut self, gfn: Gfn, executable: bool) -> Result<(), SlatError> {
        let default = self.default.executable;
        self.with_override(gfn, |o| {
            o.executable = (executable != default).then_some(executable)
        })
    }

    /// Sets the present bit of every entry.
    pub fn set_all_present(&mut self, present: bool) {
        self.default.present = present;
        self.clear_field(|o| o.present = None);
    }

    pub fn revoke_execute_all(&mut self) {
        self.default.executable = false;
        self.clear_field(|o| o.executable = None);
    }

    pub fn restore_execute(&mut self, gfn: Gfn) -> Result<(), SlatError> {
        self.set_executable(gfn, true)
    }

    pub fn restore_execute_all(&mut self) {
        self.default.executable = true;
        self.clear_field(|o| o.executable = None);
    }

    /// Revokes write permission on every GFN except those in `except`.
    pub fn enable_write_tracking<I: IntoIterator<Item = Gfn>>(&mut self, except: I) -> Result<(), SlatError> {
        self.default.writable = false;
        self.clear_field(|o| o.writable = None);
        for gfn in except {
            self.set_writable(gfn, true)?;
        }
        Ok(())
    }

    pub fn disable_write_tracking(&mut self) {
        self.default.writable = true;
        self.clear_field(|o| o.writable = None);
    }

    pub fn snapshot_permissions(&self) -> PermSnapshot {
        PermSnapshot {
            default: self.default,
            overrides: self.overrides.iter().map(|(k, v)| (*k, *v)).collect(),
        }
    }

    pub fn restore_permissions(&mut self, snap: &PermSnapshot) {
        self.default = snap.default;
        self.overrides = snap.overrides.iter().map(|(k, v)| (*k, *v)).collect();
    }

    /// Points `gfn` at `new_sfn`, returning the previous target.
    pub fn remap(&mut self, gfn: Gfn, new_sfn: Sfn) -> Result<Sfn, SlatError> {
        let previous = self.entry(gfn)?.sfn;
        if new_sfn == self.original_sfn(gfn)? {
            self.remapped.remove(&gfn.0);
        } else {
            self.remapped.insert(gfn.0, new_sfn);
        }
        Ok(previous)
    }

    /// Reinstates the construction-time mapping of `gfn`.
    pub fn restore_mapping(&mut self, gfn: Gfn) -> Result<(), SlatError> {
        self.check(gfn)?;
        self.remapped.remove(&gfn.0);
        Ok(())
    }

    /// GFNs that currently deviate from their original mapping, sorted.
    pub fn remapped_gfns(&self) -> Vec<Gfn> {
        let set: BTreeSet<u64> = self.remapped.keys().copied().collect();
        set.into_iter().map(Gfn).collect()
    }
}

/// One reverse-map entry: the frame's owner and the only GFN allowed to
/// translate to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmpEntry {
    pub sfn: Sfn,
    pub expected_gfn: Gfn,
    pub domain_id: DomainId,
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("RMP violation: {gfn} -> {sfn} for domain {domain_id:?}")]
pub struct RmpViolation {
    pub gfn: Gfn,
    pub sfn: Sfn,
    pub domain_id: DomainId,
}

#[derive(Clone, Debug)]
struct RmpRange {
    gfns: Range<u64>,
    sfn_start: u64,
    domain_id: DomainId,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0} already has a valid RMP entry")]
pub struct RmpOverlap(pub Sfn);

/// Reverse map table. Bulk assignments are stored as ranges; single-frame
/// updates override them.
#[derive(Clone, Debug, Default)]
pub struct Rmp {
    ranges: Vec<RmpRange>,
    entries: HashMap<u64, RmpEntry>,
}

impl Rmp {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `gfns` as mapped 1:1 onto frames starting at `sfn_start`.
    pub fn assign_range(&mut self, gfns: Range<u64>, sfn_start: u64, domain_id: DomainId) -> Result<(), RmpOverlap> {
        let sfns = sfn_start..sfn_start + (gfns.end - gfns.start);
        for r in &self.ranges {
            let other = r.sfn_start..r.sfn_start + (r.gfns.end - r.gfns.start);
            if sfns.start < other.end && other.start < sfns.end {
                return Err(RmpOverlap(Sfn(sfns.start.max(other.start))));
            }
        }
        self.ranges.push(RmpRange {
            gfns,
            sfn_start,
            domain_id,
        });
        Ok(())
    }

    pub fn set_entry(&mut self, entry: RmpEntry) {
        self.entries.insert(entry.sfn.0, entry);
    }

    pub fn lookup(&self, sfn: Sfn) -> Option<RmpEntry> {
        if let Some(e) = self.entries.get(&sfn.0) {
            return Some(*e);
        }
        self.ranges.iter().find_map(|r| {
            let len = r.gfns.end - r.gfns.start;
            (sfn.0 >= r.sfn_start && sfn.0 < r.sfn_start + len).then(|| RmpEntry {
                sfn,
                expected_gfn: Gfn(r.gfns.start + (sfn.0 - r.sfn_start)),
                domain_id: r.domain_id,
                valid: true,
            })
        })
    }
}

/// Verifies that `gfn -> sfn` is the registered translation for `domain_id`.
pub fn rmp_check(rmp: &Rmp, gfn: Gfn, sfn: Sfn, domain_id: DomainId) -> Result<(), RmpViolation> {
    match rmp.lookup(sfn) {
        Some(e) if e.valid && e.expected_gfn == gfn && e.domain_id == domain_id => Ok(()),
        _ => Err(RmpViolation { gfn, sfn, domain_id }),
    }
}
