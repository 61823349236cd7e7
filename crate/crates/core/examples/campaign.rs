// SPDX-License-Identifier: Apache-2.0

//! A small seeded campaign over every built-in profile, rendered as a table.

use sevsim::harness::{render_table, run_campaign, RunConfig};

fn main() {
    let runs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let report = run_campaign(&RunConfig { runs, seed: 1, ..RunConfig::default() }).unwrap();
    print!("{}", render_table(&report));
}
