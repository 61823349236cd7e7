// SPDX-License-Identifier: Apache-2.0

//! Private frames look like noise to the hypervisor, and ciphertext copied
//! to another frame no longer decrypts.

use sevsim::mem::{DomainId, DomainKey, HostMemory, PageOwner, Sfn};

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn main() {
    let mut mem = HostMemory::new(8);
    mem.assign(0..8, PageOwner { domain: DomainId(1), private: true }).unwrap();
    let key = DomainKey::derive(DomainId(1), 2024);

    let secret = b"kernel text page";
    mem.guest_write(&key, Sfn(3), 0x100, secret).unwrap();
    let raw = mem.hv_read(Sfn(3), 0x100, secret.len()).unwrap();
    println!("guest wrote      {}", hex(secret));
    println!("hypervisor reads {}", hex(&raw));

    mem.hv_write(Sfn(5), 0x100, &raw).unwrap();
    let moved = mem.guest_read(&key, Sfn(5), 0x100, secret.len()).unwrap();
    println!("after relocation {}", hex(&moved));
    assert_ne!(moved, secret);
}
