// SPDX-License-Identifier: Apache-2.0

//! A frame travels from the device through a shared bounce slot into the
//! guest's private packet buffer.

use sevsim::guest::{Distro, GuestProfile};
use sevsim::hv::PassiveHv;
use sevsim::virtio::device::read_descriptor;
use sevsim::virtio::{Packet, UdpEndpoints};
use sevsim::world::{Machine, World, WorldConfig};

fn main() {
    let mut world = World::booted(WorldConfig::new(GuestProfile::builtin(Distro::Rhel), 1)).unwrap();
    let packet = Packet::udp(&UdpEndpoints::default(), b"through the bounce buffer");
    let d = world.deliver(&packet).unwrap();
    let q = world.hv().device.rx;
    let desc = read_descriptor(world.hv(), &q, d.descriptor).unwrap();
    println!("descriptor {} -> shared slot {:#x} (len {:#x}), interrupt {}", d.descriptor, desc.addr, desc.len, d.interrupt);

    world.run_guest(&mut PassiveHv).unwrap();
    let rec = *world.ground_truth().bounces.last().unwrap();
    println!(
        "guest copied {} bytes into fragment {} of buffer {:#x} at {:#x}",
        rec.len, rec.fragment, rec.buffer.base, rec.dest
    );
    let private = world.ground_truth_read(rec.dest, rec.len as usize).unwrap();
    assert_eq!(private, packet.bytes());
    println!("used_idx {}, used_event {}", world.hv().device.used_idx, world.hv().read_u16(q.used_event_addr()).unwrap());
}
