// SPDX-License-Identifier: Apache-2.0

//! Revoking execute permission everywhere and injecting an NMI reveals the
//! page holding `do_nmi`.

use sevsim::attack::find_trigger_by_probe;
use sevsim::guest::{Distro, GuestProfile};
use sevsim::world::{World, WorldConfig};

fn main() {
    for d in Distro::ALL {
        let mut w = World::booted(WorldConfig::new(GuestProfile::builtin(d), 99)).unwrap();
        let t = find_trigger_by_probe(&mut w).unwrap();
        let k = w.ground_truth().kernel;
        println!(
            "{:<9} handler {:#x} do_nmi {:#x}+{:#05x}  (truth {:#x})",
            d.name(),
            t.handler_gfn.0,
            t.do_nmi_gfn.0,
            t.do_nmi_page_offset,
            k.do_nmi_gfn().0
        );
    }
}
