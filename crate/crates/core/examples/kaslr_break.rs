// SPDX-License-Identifier: Apache-2.0

//! Two ways to learn the kernel base: diff the boot-time page-fault trace
//! against a reference boot, or pin the TSC before boot.

use sevsim::attack::{find_base_by_fingerprint, pin_kaslr};
use sevsim::guest::{BootTrace, Distro, GuestProfile};
use sevsim::hv::PassiveHv;
use sevsim::world::{Machine, World, WorldConfig};

fn boot(seed: u64, pin: Option<u64>) -> (World, BootTrace) {
    let mut w = World::new(WorldConfig::new(GuestProfile::builtin(Distro::Fedora), seed));
    if let Some(v) = pin {
        println!("pinned TSC predicts base {:#x}", pin_kaslr(w.hv_mut(), v).0);
    }
    w.boot(&mut PassiveHv).unwrap();
    let t = BootTrace::from_faults(w.hv().slat.faults());
    (w, t)
}

fn main() {
    let (_, reference) = boot(1, None);
    let (victim, observed) = boot(2, None);
    let base = find_base_by_fingerprint(&reference, &observed).unwrap();
    println!("fingerprint: base {:#x}, actual {:#x}", base.0, victim.ground_truth().kernel.base_gfn.0);

    let (pinned, _) = boot(3, Some(0xdead_beef));
    println!("pinned boot: actual base {:#x}", pinned.ground_truth().kernel.base_gfn.0);
}
