// SPDX-License-Identifier: Apache-2.0

//! A payload split over two fragments and joined by a relative jump.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sevsim::attack::{run_attack, AttackConfig};
use sevsim::guest::isa::disassemble;
use sevsim::guest::{Distro, GuestProfile, PayloadProgram};
use sevsim::world::{World, WorldConfig};

fn main() {
    let program = PayloadProgram::chained(0xfe, 0xff);
    for i in 0..program.segments.len() {
        println!("segment {i}: {:?}", disassemble(&program.segment_bytes(i)).unwrap());
    }
    for d in Distro::ALL {
        let mut w = World::booted(WorldConfig::new(GuestProfile::builtin(d), 8)).unwrap();
        let s = run_attack(&mut w, &program, &AttackConfig::default(), &mut ChaCha8Rng::seed_from_u64(8));
        println!("{:<9} success {} with {} payload frames", d.name(), s.success, s.payload_packets);
    }
}
