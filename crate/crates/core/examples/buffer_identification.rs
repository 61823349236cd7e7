// SPDX-License-Identifier: Apache-2.0

//! Tracks write sequences of probe packets until one 32 KiB-aligned
//! candidate has been confirmed often enough.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sevsim::attack::{identify_packet_buffer, random_min_frame, DEFAULT_CONFIRMATIONS, DEFAULT_PACKET_BUDGET};
use sevsim::guest::{Distro, GuestProfile};
use sevsim::virtio::UdpEndpoints;
use sevsim::world::{World, WorldConfig};

fn main() {
    let mut world = World::booted(WorldConfig::new(GuestProfile::builtin(Distro::Sles), 5)).unwrap();
    let decoy = world.arm_decoy(6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ep = UdpEndpoints::default();
    let id = identify_packet_buffer(&mut world, DEFAULT_CONFIRMATIONS, DEFAULT_PACKET_BUDGET, &mut || random_min_frame(&ep, &mut rng)).unwrap();
    let loc = id.location;
    println!(
        "buffer {:#x}: {} fragments of {:#x}, next fragment {} after {} packets (decoy at {:#x})",
        loc.base_gfn.0, loc.fragment_count, loc.fragment_size, loc.next_fragment, id.packets_sent, decoy.0
    );
    println!("ground truth {:#x}", world.ground_truth().buffer.base_gfn().0);
}
