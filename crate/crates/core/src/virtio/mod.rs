// SPDX-License-Identifier: Apache-2.0

//! virtio-net receive path: split virtqueues, shared bounce slots and the
//! guest's private packet buffers.

pub mod buffer;
pub mod device;
pub mod driver;
pub mod packet;
pub mod ring;

use thiserror::Error;

use crate::hv::AccessError;

pub use buffer::{fragment_count, fragment_layout, FragmentSlot, HeapAllocator, PacketBuffer, DEFAULT_FRAGMENT_SIZE, DEFAULT_FRAGMENT_TIERS};
pub use device::{device_receive, Delivery, NetDevice};
pub use driver::{BounceRecord, DriverError, NoiseStage, RxDriver, RxEnv, VirtioMode, FRAGMENT_HEADROOM};
pub use packet::{Packet, UdpEndpoints, MIN_FRAME_LEN, UDP_FRAME_HEADER_LEN};
pub use ring::{Descriptor, QueueLayout, UsedElem, VRING_AVAIL_F_NO_INTERRUPT, VRING_DESC_F_WRITE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VirtioError {
    #[error("no available rx buffer")]
    Backpressure,
    #[error("descriptor {0} is malformed")]
    BadDescriptor(u16),
    #[error("guest heap exhausted")]
    OutOfMemory,
    #[error(transparent)]
    Access(#[from] AccessError),
}
