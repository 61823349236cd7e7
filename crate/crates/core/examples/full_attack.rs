// SPDX-License-Identifier: Apache-2.0

//! End-to-end injection of a hypercall payload into one guest.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sevsim::attack::{run_attack, AttackConfig};
use sevsim::guest::{Distro, GuestProfile, PayloadProgram};
use sevsim::hv::HvEvent;
use sevsim::world::{Machine, World, WorldConfig};

fn main() {
    let distro: Distro = std::env::args().nth(1).as_deref().unwrap_or("rhel").parse().unwrap();
    let mut world = World::booted(WorldConfig::new(GuestProfile::builtin(distro), 31)).unwrap();
    let stats = run_attack(
        &mut world,
        &PayloadProgram::hypercall_ret(0xff),
        &AttackConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(31),
    );
    println!("{}", serde_json::to_string_pretty(&stats).unwrap());
    let hypercalls: Vec<_> = world.hv().events().iter().filter(|e| matches!(e, HvEvent::Hypercall { .. })).collect();
    println!("hypercall exits: {hypercalls:?}");
}
