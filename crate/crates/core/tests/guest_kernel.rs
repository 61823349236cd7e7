// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;

use sevsim::attack::{find_trigger_by_probe, pin_kaslr, ExecProbe};
use sevsim::guest::isa::{assemble, decode, disassemble, IsaError};
use sevsim::guest::{boot_prefix, kaslr_base, kaslr_slot, BootTrace, Distro, ExecError, GuestFault, GuestProfile, Insn};
use sevsim::hv::PassiveHv;
use sevsim::layout::{KASLR_ALIGN_FRAMES, KASLR_SLOTS, KERNEL_FIRST_GFN};
use sevsim::slat::{FaultCause, Gfn};
use sevsim::virtio::{Packet, UdpEndpoints};
use sevsim::world::{Machine, World, WorldConfig};

fn boot(profile: &GuestProfile, seed: u64) -> (World, BootTrace) {
    let mut w = World::new(WorldConfig::new(profile.clone(), seed));
    w.boot(&mut PassiveHv).unwrap();
    let trace = BootTrace::from_faults(w.hv().slat.faults());
    (w, trace)
}

// Independent oracle for the mixing function.
fn splitmix_ref(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[test]
fn kaslr_slot_matches_reference() {
    for (a, b) in [(0u64, 0u64), (1, 2), (u64::MAX, 0x1234_5678), (0xdead_beef, 0xfeed)] {
        assert_eq!(kaslr_slot(a, b), splitmix_ref(a ^ b.rotate_left(17)) % 512);
        assert_eq!(kaslr_base(a, b), Gfn(KERNEL_FIRST_GFN + kaslr_slot(a, b) * 512));
    }
}

#[test]
fn boot_trace_is_prefix_then_kernel_base() {
    for d in Distro::ALL {
        let p = GuestProfile::builtin(d);
        let (w, trace) = boot(&p, 42);
        let prefix = boot_prefix(&p);
        assert_eq!(&trace.gfns[..prefix.len()], &prefix[..]);
        assert_eq!(trace.gfns[prefix.len()], w.ground_truth().kernel.base_gfn);
    }
}

#[test]
fn boots_are_deterministic_per_seed() {
    let p = GuestProfile::builtin(Distro::Fedora);
    let (a, ta) = boot(&p, 9);
    let (b, tb) = boot(&p, 9);
    assert_eq!(ta, tb);
    assert_eq!(a.ground_truth().kernel, b.ground_truth().kernel);
    assert_eq!(a.hv().slat.faults(), b.hv().slat.faults());
}

#[test]
fn prefix_differs_between_profiles() {
    let a = boot_prefix(&GuestProfile::builtin(Distro::Sles));
    let b = boot_prefix(&GuestProfile::builtin(Distro::Rhel));
    assert_ne!(a, b);
}

#[test]
fn pinned_tsc_predicts_base() {
    let p = GuestProfile::builtin(Distro::Ubuntu);
    for seed in 0..8 {
        let mut w = World::new(WorldConfig::new(p.clone(), seed));
        let predicted = pin_kaslr(w.hv_mut(), 0x1122_3344);
        w.boot(&mut PassiveHv).unwrap();
        assert_eq!(w.ground_truth().kernel.base_gfn, predicted);
        assert_eq!(predicted, kaslr_base(0x1122_3344, 0x1122_3344));
    }
}

#[test]
fn nmi_returns_without_hypercalls() {
    let mut w = World::booted(WorldConfig::new(GuestProfile::builtin(Distro::Sles), 1)).unwrap();
    let out = w.inject_nmi(&mut PassiveHv);
    assert!(out.returned);
    assert!(out.hypercalls.is_empty());
    assert!(out.fault.is_none());
}

#[test]
fn execute_probe_sees_entry_pages_then_handler_then_do_nmi() {
    let mut p = GuestProfile::builtin(Distro::Rhel);
    p.pre_handler_accesses = 3;
    let mut w = World::booted(WorldConfig::new(p, 6)).unwrap();
    let k = w.ground_truth().kernel;
    w.hv_mut().slat.revoke_execute_all();
    let mut probe = ExecProbe::default();
    assert!(w.inject_nmi(&mut probe).returned);
    let mut expected = k.pre_handler_gfns();
    expected.extend([k.handler_gfn(), k.do_nmi_gfn()]);
    assert_eq!(probe.faults, expected);
    w.hv_mut().slat.restore_execute_all();

    let t = find_trigger_by_probe(&mut w).unwrap();
    assert_eq!((t.handler_gfn, t.do_nmi_gfn), (k.handler_gfn(), k.do_nmi_gfn()));
    assert_eq!(t.do_nmi_page_offset, k.do_nmi_page_offset());
}

#[test]
fn probe_restores_permissions() {
    let mut w = World::booted(WorldConfig::new(GuestProfile::builtin(Distro::Fedora), 3)).unwrap();
    let before = w.hv().slat.snapshot_permissions();
    find_trigger_by_probe(&mut w).unwrap();
    assert_eq!(w.hv().slat.snapshot_permissions(), before);
    let n = w.hv().slat.faults().len();
    w.inject_nmi(&mut PassiveHv);
    assert!(w.hv().slat.faults()[n..].iter().all(|f| f.cause != FaultCause::NoExecute));
}

#[test]
fn isa_encoding_and_faults() {
    let prog = [Insn::Hypercall(0xff), Insn::Jmp(-5), Insn::Ret];
    let bytes = assemble(&prog);
    assert_eq!(bytes, [0xf1, 0xff, 0xe9, 0xfb, 0xff, 0xc3]);
    assert_eq!(disassemble(&bytes).unwrap(), prog);
    assert!(matches!(decode(&[0x00], 0x10), Err(IsaError::InvalidOpcode { .. })));
    assert!(matches!(decode(&[0xe9, 0x01], 0x10), Err(IsaError::Truncated { .. })));
}

#[test]
fn liveness_holds_on_untouched_guest() {
    let mut w = World::booted(WorldConfig::new(GuestProfile::builtin(Distro::OpenSuse), 77)).unwrap();
    assert!(w.liveness_check());
    assert!(w.liveness_check());
}

#[test]
fn dangling_remap_breaks_liveness() {
    let mut w = World::booted(WorldConfig::new(GuestProfile::builtin(Distro::Sles), 12)).unwrap();
    let k = w.ground_truth().kernel;
    // Data pages hold zeros, which is not a valid opcode.
    let zeros = w.hv().slat.entry(k.data_gfns()[0]).unwrap().sfn;
    w.hv_mut().slat.remap(k.do_nmi_gfn(), zeros).unwrap();
    assert!(!w.liveness_check());
    assert!(w.ground_truth().crashed);
    assert_eq!(w.receive(&Packet::udp(&UdpEndpoints::default(), b"ping")).unwrap_err(), GuestFault::Crashed);
}

#[test]
fn zero_bytes_at_do_nmi_are_a_decode_fault() {
    let mut w = World::booted(WorldConfig::new(GuestProfile::builtin(Distro::Rhel), 12)).unwrap();
    let k = w.ground_truth().kernel;
    let zeros = w.hv().slat.entry(k.data_gfns()[1]).unwrap().sfn;
    w.hv_mut().slat.remap(k.do_nmi_gfn(), zeros).unwrap();
    let out = w.inject_nmi(&mut PassiveHv);
    assert!(matches!(out.fault, Some(GuestFault::Exec(ExecError::Decode(_)))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kaslr_base_is_aligned_and_in_range(a in any::<u64>(), b in any::<u64>()) {
        let g = kaslr_base(a, b);
        prop_assert_eq!(g.0 % KASLR_ALIGN_FRAMES, 0);
        prop_assert!(g.0 >= KERNEL_FIRST_GFN && g.0 < KERNEL_FIRST_GFN + KASLR_SLOTS * KASLR_ALIGN_FRAMES);
    }

    #[test]
    fn disassemble_inverts_assemble(body in prop::collection::vec(prop_oneof![
        any::<u8>().prop_map(Insn::Hypercall),
        any::<i16>().prop_map(Insn::Jmp),
    ], 0..40)) {
        let mut ops = body;
        ops.push(Insn::Ret);
        let mut bytes = assemble(&ops);
        bytes.extend_from_slice(&[0xf1, 0x01]);
        prop_assert_eq!(disassemble(&bytes).unwrap(), ops);
    }

    #[test]
    fn kernel_layout_is_seed_independent(seed in any::<u64>()) {
        let p = GuestProfile::builtin(Distro::Ubuntu);
        let (w, trace) = boot(&p, seed);
        let k = w.ground_truth().kernel;
        prop_assert_eq!(k.base_gfn.0 % KASLR_ALIGN_FRAMES, 0);
        prop_assert_eq!(k.do_nmi_gfn().addr() + u64::from(k.do_nmi_page_offset()), k.base_gfn.addr() + p.do_nmi_offset);
        prop_assert_eq!(&trace.gfns[..48], &boot_prefix(&p)[..]);
    }
}
