// SPDX-License-Identifier: Apache-2.0

//! With the reverse map enabled the remapped trigger page faults and the
//! payload never runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sevsim::attack::{run_attack, AttackConfig};
use sevsim::guest::{Distro, GuestProfile, PayloadProgram};
use sevsim::world::{Machine, World, WorldConfig};

fn main() {
    let mut wc = WorldConfig::new(GuestProfile::builtin(Distro::OpenSuse), 4);
    wc.rmp = true;
    let mut world = World::booted(wc).unwrap();
    let s = run_attack(&mut world, &PayloadProgram::hypercall_ret(0xff), &AttackConfig::default(), &mut ChaCha8Rng::seed_from_u64(4));
    println!("success {}, stage {:?}, rmp violation {}", s.success, s.failure_stage, s.rmp_violation);
    for e in world.hv().events() {
        println!("  {e:?}");
    }
    println!("guest still alive: {}", world.liveness_check());
}
