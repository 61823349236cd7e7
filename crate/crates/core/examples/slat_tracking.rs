// SPDX-License-Identifier: Apache-2.0

//! Write-protecting guest pages and single-stepping over each fault yields
//! the exact sequence of pages the guest writes while it handles a packet.

use sevsim::attack::track_bounce;
use sevsim::guest::{Distro, GuestProfile};
use sevsim::virtio::{Packet, UdpEndpoints};
use sevsim::world::{World, WorldConfig};

fn main() {
    let mut world = World::booted(WorldConfig::new(GuestProfile::builtin(Distro::Ubuntu), 7)).unwrap();
    let packet = Packet::udp(&UdpEndpoints::default(), b"hello");
    let seq = track_bounce(&mut world, &packet).unwrap();
    println!("completion: {:?}", seq.completion);
    println!("{} write accesses over {} distinct pages:", seq.writes.len(), seq.distinct().len());
    for g in &seq.writes {
        print!("{:#x} ", g.0);
    }
    println!();
}
