// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;

use sevsim::attack::{track_bounce, CompletionReason};
use sevsim::guest::{Distro, GuestProfile};
use sevsim::hv::PassiveHv;
use sevsim::layout::{bounce_slot_gpa, RX_RING_GFN, RX_USED_GFN};
use sevsim::virtio::device::read_descriptor;
use sevsim::virtio::ring::{vring_need_event, AvailRing, UsedRing};
use sevsim::virtio::{Descriptor, Packet, QueueLayout, UdpEndpoints, UsedElem, VirtioError, VRING_AVAIL_F_NO_INTERRUPT, VRING_DESC_F_WRITE};
use sevsim::world::{Machine, World, WorldConfig};

fn world(distro: Distro, seed: u64) -> World {
    World::booted(WorldConfig::new(GuestProfile::builtin(distro), seed)).unwrap()
}

fn frame(len: usize, fill: u8) -> Packet {
    Packet::udp(&UdpEndpoints::default(), &vec![fill; len - 42])
}

#[test]
fn queue_layout_offsets() {
    let q = QueueLayout::new(64, 0x10_0000, 0x10_1000);
    assert_eq!(q.desc_addr(3), 0x10_0000 + 48);
    assert_eq!(q.avail_flags_addr(), 0x10_0400);
    assert_eq!(q.avail_idx_addr(), 0x10_0402);
    assert_eq!(q.avail_ring_addr(65), 0x10_0406);
    assert_eq!(q.used_event_addr(), 0x10_0484);
    assert_eq!(q.used_idx_addr(), 0x10_1002);
    assert_eq!(q.used_ring_addr(2), 0x10_1014);
    assert_eq!(q.avail_event_addr(), 0x10_1204);
}

#[test]
fn event_index_rule() {
    assert!(vring_need_event(0, 1, 0));
    assert!(!vring_need_event(1, 1, 0));
    assert!(vring_need_event(5, 8, 4));
    assert!(!vring_need_event(9, 8, 4));
    assert!(vring_need_event(0xffff, 1, 0xfffe));
}

#[test]
fn init_posts_every_bounce_slot() {
    let w = world(Distro::Rhel, 3);
    let q = w.hv().device.rx;
    let ring = AvailRing::from_bytes(&w.hv().read_gpa(q.avail, QueueLayout::avail_bytes(q.size)).unwrap(), q.size);
    assert_eq!(ring.idx, q.size);
    assert_eq!(ring.flags, 0);
    for i in 0..q.size {
        assert_eq!(ring.ring[usize::from(i)], i);
        let d = read_descriptor(w.hv(), &q, i).unwrap();
        assert_eq!(
            d,
            Descriptor {
                addr: bounce_slot_gpa(i),
                len: 0x600,
                flags: VRING_DESC_F_WRITE,
                next: 0
            }
        );
    }
    assert_eq!(q.desc, RX_RING_GFN.addr());
    assert_eq!(q.used, RX_USED_GFN.addr());
}

#[test]
fn one_frame_round_trip() {
    let mut w = world(Distro::Sles, 11);
    let q = w.hv().device.rx;
    let p = frame(0x80, 0xab);
    let d = w.deliver(&p).unwrap();
    assert_eq!(d.buffers, 1);
    assert!(d.interrupt);
    assert_eq!(w.hv().read_u16(q.used_idx_addr()).unwrap(), 1);
    let used = UsedRing::from_bytes(&w.hv().read_gpa(q.used, QueueLayout::used_bytes(q.size)).unwrap(), q.size);
    assert_eq!(used.ring[0], UsedElem { id: u32::from(d.descriptor), len: 0x80 });
    let slot = read_descriptor(w.hv(), &q, d.descriptor).unwrap().addr;
    assert_eq!(w.hv().read_gpa(slot, 0x80).unwrap(), p.bytes());

    let before = w.ground_truth().buffer;
    assert_eq!(w.run_guest(&mut PassiveHv).unwrap(), 1);
    let rec = *w.ground_truth().bounces.last().unwrap();
    assert_eq!(rec.len, 0x80);
    assert_eq!(rec.fragment, before.next_free);
    assert_eq!(rec.dest, before.fragment_addr(before.next_free));
    assert_eq!(w.ground_truth_read(rec.dest, 0x80).unwrap(), p.bytes());
    assert_ne!(w.hv().read_gpa(rec.dest, 0x80).unwrap(), p.bytes());
}

#[test]
fn buffer_rolls_over_after_last_fragment() {
    let mut w = world(Distro::Fedora, 5);
    let first = w.ground_truth().buffer;
    assert_eq!(first.fragment_count, 21);
    let mut n = first.next_free;
    while n < 20 {
        w.receive(&frame(0x40, 1)).unwrap();
        n += 1;
    }
    assert_eq!(w.ground_truth().buffer.base, first.base);
    assert_eq!(w.ground_truth().buffer.next_free, 20);
    w.receive(&frame(0x40, 2)).unwrap();
    let now = w.ground_truth().buffer;
    assert_ne!(now.base, first.base);
    assert_eq!(now.next_free, 0);
    assert_eq!(now.base % 0x8000, 0);
    let rec = *w.ground_truth().bounces.last().unwrap();
    assert_eq!((rec.buffer.base, rec.fragment), (first.base, 20));
}

#[test]
fn legacy_flag_signals_completion() {
    let mut w = world(Distro::Ubuntu, 2);
    let q = w.hv().device.rx;
    let seq = track_bounce(&mut w, &frame(0x40, 0)).unwrap();
    assert_eq!(seq.completion, CompletionReason::NoInterruptCleared);
    assert_eq!(w.hv().read_u16(q.avail_flags_addr()).unwrap() & VRING_AVAIL_F_NO_INTERRUPT, 0);
    assert_eq!(w.hv().read_u16(q.used_event_addr()).unwrap(), 0);
}

#[test]
fn modern_used_event_follows_consumption() {
    let mut w = world(Distro::OpenSuse, 2);
    let q = w.hv().device.rx;
    for i in 1..=5u16 {
        let seq = track_bounce(&mut w, &frame(0x40, 0)).unwrap();
        assert_eq!(seq.completion, CompletionReason::UsedEventAdvanced);
        assert_eq!(w.hv().read_u16(q.used_event_addr()).unwrap(), i);
        assert_eq!(w.hv().device.used_idx, i);
    }
}

#[test]
fn suppressed_notification_raises_no_interrupt() {
    let mut w = world(Distro::Sles, 8);
    let q = w.hv().device.rx;
    w.hv_mut().write_u16(q.avail_flags_addr(), VRING_AVAIL_F_NO_INTERRUPT).unwrap();
    let d = w.deliver(&frame(0x40, 0)).unwrap();
    assert!(!d.interrupt);
    assert_eq!(w.run_guest(&mut PassiveHv).unwrap(), 0);
}

#[test]
fn oversize_frame_bumps_tier_at_next_buffer() {
    let mut w = world(Distro::Rhel, 4);
    let q = w.hv().device.rx;
    let p = frame(0x900, 0x33);
    let d = w.deliver(&p).unwrap();
    assert_eq!(d.buffers, 2);
    w.run_guest(&mut PassiveHv).unwrap();
    let gt = w.ground_truth();
    let recs = &gt.bounces[gt.bounces.len() - 2..];
    assert_eq!((recs[0].len, recs[1].len), (0x600, 0x300));
    assert_eq!(w.guest().driver().unwrap().current_tier(), 0xc00);
    assert_eq!(gt.buffer.fragment_size, 0x600);
    assert_eq!(read_descriptor(w.hv(), &q, d.descriptor).unwrap().len, 0x600);

    while w.ground_truth().buffer.fragment_size == 0x600 {
        w.receive(&frame(0x40, 0)).unwrap();
    }
    let b = w.ground_truth().buffer;
    assert_eq!((b.fragment_size, b.fragment_count), (0xc00, 10));
    let seq = track_bounce(&mut w, &frame(0x40, 0)).unwrap();
    assert_eq!(seq.descriptor_len, 0xc00);
}

#[test]
fn backpressure_when_ring_is_exhausted() {
    let mut w = world(Distro::Rhel, 1);
    for _ in 0..64 {
        w.deliver(&frame(0x40, 0)).unwrap();
    }
    assert_eq!(w.deliver(&frame(0x40, 0)).unwrap_err(), VirtioError::Backpressure);
    assert_eq!(w.run_guest(&mut PassiveHv).unwrap(), 64);
    w.deliver(&frame(0x40, 0)).unwrap();
}

#[test]
fn corrupted_descriptor_is_reported() {
    let mut w = world(Distro::Rhel, 1);
    let q = w.hv().device.rx;
    w.hv_mut().write_u32(q.desc_addr(0) + 8, 0).unwrap();
    assert_eq!(w.deliver(&frame(0x40, 0)).unwrap_err(), VirtioError::BadDescriptor(0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn descriptor_encoding_round_trips(addr in any::<u64>(), len in any::<u32>(), flags in any::<u16>(), next in any::<u16>()) {
        let d = Descriptor { addr, len, flags, next };
        prop_assert_eq!(Descriptor::from_bytes(&d.to_bytes()), d);
        prop_assert_eq!(&d.to_bytes()[8..12], &len.to_le_bytes());
    }

    #[test]
    fn bounced_bytes_arrive_intact(lens in prop::collection::vec(0x40usize..0x5f0, 1..30), seed in 0u64..1000) {
        let mut w = world(Distro::Rhel, seed);
        for (i, len) in lens.iter().enumerate() {
            let p = frame(*len, i as u8);
            w.receive(&p).unwrap();
            let rec = *w.ground_truth().bounces.last().unwrap();
            prop_assert_eq!(rec.len as usize, *len);
            prop_assert_eq!(rec.dest, rec.buffer.fragment_addr(rec.fragment));
            prop_assert_eq!(w.ground_truth_read(rec.dest, *len).unwrap(), p.bytes());
        }
        prop_assert_eq!(w.hv().device.used_idx, lens.len() as u16);
    }
}
