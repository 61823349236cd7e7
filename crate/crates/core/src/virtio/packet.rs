// SPDX-License-Identifier: Apache-2.0

//! Ethernet/IPv4/UDP frames as delivered by the emulated NIC.

use serde::{Deserialize, Serialize};

pub const ETH_HEADER_LEN: usize = 14;
pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const UDP_FRAME_HEADER_LEN: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN;
/// Smallest frame the link delivers; shorter frames are padded.
pub const MIN_FRAME_LEN: usize = 0x40;
/// Largest untagged Ethernet frame without FCS.
pub const MAX_STD_FRAME_LEN: usize = 1514;

const ETHERTYPE_IPV4: u16 = 0x0800;
const IPPROTO_UDP: u8 = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UdpEndpoints {
    pub src_mac: [u8; 6],
    pub dst_mac: [u8; 6],
    pub src_ip: [u8; 4],
    pub dst_ip: [u8; 4],
    pub src_port: u16,
    pub dst_port: u16,
}

impl Default for UdpEndpoints {
    fn default() -> Self {
        Self {
            src_mac: [0x52, 0x54, 0x00, 0x12, 0x34, 0x01],
            dst_mac: [0x52, 0x54, 0x00, 0x12, 0x34, 0x56],
            src_ip: [10, 0, 2, 2],
            dst_ip: [10, 0, 2, 15],
            src_port: 40000,
            // Nothing listens here; the guest stores the frame anyway.
            dst_port: 9,
        }
    }
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)])))
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// A received frame: protocol headers, payload, and link padding up to the
/// minimum frame size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
    pub total_len: usize,
}

impl Packet {
    /// Builds a UDP datagram frame around `payload`.
    pub fn udp(ep: &UdpEndpoints, payload: &[u8]) -> Self {
        let ip_len = (IPV4_HEADER_LEN + UDP_HEADER_LEN + payload.len()) as u16;
        let udp_len = (UDP_HEADER_LEN + payload.len()) as u16;

        let mut h = Vec::with_capacity(UDP_FRAME_HEADER_LEN);
        h.extend_from_slice(&ep.dst_mac);
        h.extend_from_slice(&ep.src_mac);
        h.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

        let ip_start = h.len();
        h.push(0x45);
        h.push(0);
        h.extend_from_slice(&ip_len.to_be_bytes());
        h.extend_from_slice(&[0, 0, 0x40, 0]); // id, DF
        h.push(64);
        h.push(IPPROTO_UDP);
        h.extend_from_slice(&[0, 0]);
        h.extend_from_slice(&ep.src_ip);
        h.extend_from_slice(&ep.dst_ip);
        let csum = ipv4_checksum(&h[ip_start..ip_start + IPV4_HEADER_LEN]);
        h[ip_start + 10..ip_start + 12].copy_from_slice(&csum.to_be_bytes());

        h.extend_from_slice(&ep.src_port.to_be_bytes());
        h.extend_from_slice(&ep.dst_port.to_be_bytes());
        h.extend_from_slice(&udp_len.to_be_bytes());
        h.extend_from_slice(&[0, 0]); // checksum optional over IPv4

        Self::from_parts(h, payload.to_vec())
    }

    /// Frame from an arbitrary header and payload.
    pub fn from_parts(header: Vec<u8>, payload: Vec<u8>) -> Self {
        let total_len = (header.len() + payload.len()).max(MIN_FRAME_LEN);
        Self {
            header,
            payload,
            total_len,
        }
    }

    /// Wire bytes, including zero link padding.
    pub fn bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.total_len);
        b.extend_from_slice(&self.header);
        b.extend_from_slice(&self.payload);
        b.resize(self.total_len, 0);
        b
    }

    pub fn payload_offset(&self) -> usize {
        self.header.len()
    }
}
