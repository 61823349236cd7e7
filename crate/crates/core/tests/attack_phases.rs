// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sevsim::attack::{
    choose_fragment_and_padding, expected_gfns, find_trigger_by_probe, identify_packet_buffer, plan_injection, random_min_frame,
    run_attack, track_bounce, AttackConfig, AttackError, PhaseOrder, Stage,
};
use sevsim::guest::{Distro, GuestProfile, PayloadProgram};
use sevsim::hv::HvEvent;
use sevsim::slat::Gfn;
use sevsim::virtio::{fragment_count, UdpEndpoints, FRAGMENT_HEADROOM, UDP_FRAME_HEADER_LEN};
use sevsim::world::{Machine, World, WorldConfig};

const H: u32 = UDP_FRAME_HEADER_LEN as u32;

fn world(distro: Distro, seed: u64) -> World {
    World::booted(WorldConfig::new(GuestProfile::builtin(distro), seed)).unwrap()
}

fn identify(w: &mut World, seed: u64) -> sevsim::attack::Identification {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = UdpEndpoints::default();
    identify_packet_buffer(w, 10, 200, &mut || random_min_frame(&ep, &mut rng)).unwrap()
}

/// Page set touched by `len` bytes at `start`, by walking every byte.
fn pages_by_walk(start: u64, len: u32) -> BTreeSet<Gfn> {
    (start..start + u64::from(len)).map(Gfn::containing).collect()
}

/// First (fragment, pad) satisfying the placement constraints, by exhaustive
/// search over every fragment and pad.
fn brute_force_choice(t: u32, fs: u32, next: u32, code_len: u32) -> Option<(u32, u32)> {
    for idx in next..fragment_count(fs) {
        let start = idx * fs;
        for pad in 0..fs {
            let code = start + H + pad;
            if code % 4096 == t && code + code_len <= start + fs - FRAGMENT_HEADROOM && t + code_len <= 4096 {
                return Some((idx, pad));
            }
        }
    }
    None
}

#[test]
fn tracked_writes_cover_the_fragment() {
    let mut w = world(Distro::Rhel, 21);
    let p = random_min_frame(&UdpEndpoints::default(), &mut ChaCha8Rng::seed_from_u64(1));
    let seq = track_bounce(&mut w, &p).unwrap();
    let rec = *w.ground_truth().bounces.last().unwrap();
    assert!(seq.distinct().contains(&Gfn::containing(rec.dest)));
    assert_eq!(seq.chunks, vec![0x40]);
    assert_eq!(seq.descriptor_len, 0x600);
    // Frame copy, descriptor length, avail entry, avail idx, used_event.
    assert!(seq.writes.len() >= 5);
}

#[test]
fn write_counts_track_noise_level() {
    for d in Distro::ALL {
        let p = GuestProfile::builtin(d);
        let mut w = world(d, 4);
        let ident = identify(&mut w, 4);
        let n: usize = ident.sequences.iter().map(|s| s.writes.len()).sum();
        let mean = n as f64 / ident.sequences.len() as f64;
        let expected = p.noise_write_mean + 5.0;
        assert!((mean - expected).abs() < expected * 0.35, "{d}: {mean} vs {expected}");
    }
}

#[test]
fn identification_finds_the_real_buffer() {
    for d in Distro::ALL {
        for seed in 0..3 {
            let mut w = world(d, seed);
            let ident = identify(&mut w, seed);
            let truth = w.ground_truth().buffer;
            assert_eq!(ident.location.base_gfn, truth.base_gfn(), "{d} seed {seed}");
            assert_eq!(ident.location.fragment_size, truth.fragment_size);
            assert_eq!(ident.location.next_fragment, truth.next_free);
        }
    }
}

#[test]
fn short_lived_decoys_are_rejected() {
    for n in [1u32, 4, 9, 10] {
        let mut w = world(Distro::Sles, 100 + u64::from(n));
        let decoy = w.arm_decoy(n).unwrap();
        let ident = identify(&mut w, u64::from(n));
        assert_ne!(ident.location.base_gfn, decoy);
        assert_eq!(ident.location.base_gfn, w.ground_truth().buffer.base_gfn());
    }
}

#[test]
fn identification_survives_buffer_rollover() {
    let mut w = world(Distro::Fedora, 8);
    let ep = UdpEndpoints::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    while w.ground_truth().buffer.next_free != 15 {
        w.receive(&random_min_frame(&ep, &mut rng)).unwrap();
    }
    let old = w.ground_truth().buffer.base_gfn();
    let ident = identify(&mut w, 9);
    assert_ne!(ident.location.base_gfn, old);
    assert_eq!(ident.location.base_gfn, w.ground_truth().buffer.base_gfn());
}

#[test]
fn placement_examples() {
    let c = choose_fragment_and_padding(0x700, 0x600, 0, H, 3).unwrap();
    assert_eq!((c.fragment, c.pad, c.dummies), (1, 0x100 - H, 1));
    let c = choose_fragment_and_padding(0x000, 0x600, 0, H, 3).unwrap();
    assert_eq!((c.fragment, c.pad, c.dummies), (2, 0x400 - H, 2));
    let c = choose_fragment_and_padding(0x200, 0x600, 0, H, 3).unwrap();
    assert_eq!(c.fragment, 0);
    assert!(matches!(
        choose_fragment_and_padding(0xffe, 0x600, 0, H, 3),
        Err(AttackError::InfeasibleOffset(0xffe))
    ));
    assert!(choose_fragment_and_padding(0x700, 0x600, 21, H, 3).is_err());
}

#[test]
fn plan_targets_trigger_offset() {
    let mut w = world(Distro::Ubuntu, 30);
    let trigger = find_trigger_by_probe(&mut w).unwrap();
    let ident = identify(&mut w, 30);
    let plan = plan_injection(&PayloadProgram::hypercall_ret(0xff), &trigger, &ident.location, H, &[], &UdpEndpoints::default()).unwrap();
    let seg = &plan.segments[0];
    assert_eq!((seg.code_gpa % 4096) as u32, trigger.do_nmi_page_offset);
    assert_eq!(seg.exec_gfn, trigger.do_nmi_gfn);
    assert_eq!(&seg.packet.payload[seg.choice.pad as usize..], &[0xf1, 0xff, 0xc3]);
    assert!(seg.packet.payload[..seg.choice.pad as usize].iter().all(|&b| b == 0x90));
}

fn attack(distro: Distro, seed: u64, rmp: bool, program: &PayloadProgram, order: PhaseOrder) -> (World, sevsim::attack::ExperimentStats) {
    let mut wc = WorldConfig::new(GuestProfile::builtin(distro), seed);
    wc.rmp = rmp;
    let mut w = World::booted(wc).unwrap();
    let cfg = AttackConfig {
        phase_order: order,
        ..AttackConfig::default()
    };
    let s = run_attack(&mut w, program, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    (w, s)
}

#[test]
fn full_attack_executes_payload_in_every_profile() {
    for d in Distro::ALL {
        let (w, s) = attack(d, 5, false, &PayloadProgram::hypercall_ret(0xff), PhaseOrder::TriggerFirst);
        assert!(s.success, "{d}: {s:?}");
        assert_eq!(s.payload_page_offset, Some(s.trigger_offset));
        assert!(w.hv().events().iter().any(|e| matches!(e, HvEvent::Hypercall { reason: 0xff, .. })));
        assert!(w.hv().slat.remapped_gfns().is_empty());
    }
}

#[test]
fn phase_order_does_not_matter() {
    for d in [Distro::Sles, Distro::Rhel] {
        for seed in 0..4 {
            let p = PayloadProgram::hypercall_ret(0xff);
            let (_, a) = attack(d, seed, false, &p, PhaseOrder::TriggerFirst);
            let (_, b) = attack(d, seed, false, &p, PhaseOrder::BufferFirst);
            assert!(a.success && b.success);
            assert_eq!((a.packets_sent, a.write_accesses, a.dummy_packets), (b.packets_sent, b.write_accesses, b.dummy_packets));
        }
    }
}

#[test]
fn reverse_map_blocks_the_remap() {
    let (w, s) = attack(Distro::OpenSuse, 2, true, &PayloadProgram::hypercall_ret(0xff), PhaseOrder::TriggerFirst);
    assert!(!s.success);
    assert_eq!(s.failure_stage, Some(Stage::Remap));
    assert!(s.rmp_violation);
    assert!(w.hv().events().iter().any(|e| matches!(e, HvEvent::RmpFault(_))));
    assert!(!w.hv().events().iter().any(|e| matches!(e, HvEvent::Hypercall { .. })));
}

#[test]
fn chained_payload_spans_two_fragments() {
    let p = PayloadProgram::chained(0xfe, 0xff);
    for d in Distro::ALL {
        let (w, s) = attack(d, 17, false, &p, PhaseOrder::TriggerFirst);
        assert!(s.success, "{d}: {s:?}");
        assert_eq!(s.payload_packets, 2);
        let reasons: Vec<u8> = w
            .hv()
            .events()
            .iter()
            .filter_map(|e| match e {
                HvEvent::Hypercall { reason, .. } => Some(*reason),
                _ => None,
            })
            .collect();
        assert_eq!(reasons, vec![0xfe, 0xff]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn crossing_matches_walk(idx in 0u32..21, len in 1u32..=0x600, base in 0u64..0x100) {
        let b = Gfn(0x4_4000 + base * 8);
        let got = expected_gfns(b, idx, len, 0x600).unwrap();
        prop_assert_eq!(got, pages_by_walk(b.addr() + u64::from(idx) * 0x600, len));
    }

    #[test]
    fn choice_matches_exhaustive_search(t in 0u32..4096, fs_i in 0usize..3, next in 0u32..6, code_len in 1u32..8) {
        let fs = [0x600, 0xc00, 0x1800][fs_i];
        let got = choose_fragment_and_padding(t, fs, next, H, code_len).ok().map(|c| (c.fragment, c.pad));
        prop_assert_eq!(got, brute_force_choice(t, fs, next, code_len));
    }
}
