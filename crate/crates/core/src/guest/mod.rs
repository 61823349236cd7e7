// SPDX-License-Identifier: Apache-2.0

//! The simulated guest kernel: boot with KASLR, NMI delivery, the rx
//! interrupt path and background kernel activity.

pub mod isa;
pub mod kernel;
pub mod profile;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::hv::HvEvent;
use crate::layout::{RX_RING_GFN, RX_USED_GFN};
use crate::mem::PAGE_SIZE;
use crate::slat::{Access, Gfn};
use crate::vcpu::{Halt, Vcpu};
use crate::virtio::buffer::{HeapAllocator, PacketBuffer};
use crate::virtio::driver::{BounceRecord, DriverError, NoiseStage, RxDriver, RxEnv};
use crate::virtio::ring::QueueLayout;
use crate::virtio::VirtioError;

pub use isa::{execute_at, ExecError, GuestEvent, Insn, PayloadProgram};
pub use kernel::{boot_prefix, kaslr_base, kaslr_slot, BootTrace, KernelImage};
pub use profile::{Distro, GuestProfile, ProfileError};

/// Heap chunks whose pages receive background kernel writes.
pub const NOISE_CHUNKS: usize = 24;

const IMAGE_MAGIC: &[u8] = b"\x7fKRNL-IMAGE\0";
const HANDLER_STUB: [u8; 8] = [0x0f, 0x01, 0xd9, 0x48, 0x83, 0xec, 0x08, 0x90];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GuestFault {
    #[error("guest has crashed")]
    Crashed,
    #[error("guest is not booted")]
    NotBooted,
    #[error(transparent)]
    Halt(#[from] Halt),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Virtio(#[from] VirtioError),
}

impl From<DriverError> for GuestFault {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Halt(h) => GuestFault::Halt(h),
            DriverError::Virtio(v) => GuestFault::Virtio(v),
        }
    }
}

/// Writes that mimic a fake packet buffer for a limited number of bounces.
#[derive(Clone, Debug)]
struct Decoy {
    base: Gfn,
    fragment_size: u32,
    next: u32,
    remaining: u32,
}

struct GuestEnv {
    heap: HeapAllocator,
    rng: ChaCha8Rng,
    noise: Option<Poisson<f64>>,
    noise_pages: Vec<Gfn>,
    pending: u32,
    decoy: Option<Decoy>,
}

impl GuestEnv {
    fn write_noise(&mut self, vcpu: &mut Vcpu<'_>, n: u32) -> Result<(), Halt> {
        for _ in 0..n {
            let page = self.noise_pages[self.rng.random_range(0..self.noise_pages.len())];
            let off = self.rng.random_range(0..(PAGE_SIZE / 8) as u64) * 8;
            let v = self.rng.next_u64();
            vcpu.write(page.addr() + off, &v.to_le_bytes())?;
        }
        Ok(())
    }

    fn write_decoy(&mut self, vcpu: &mut Vcpu<'_>, frame_len: u32) -> Result<(), Halt> {
        let Some(d) = self.decoy.as_mut() else {
            return Ok(());
        };
        let start = d.base.addr() + u64::from(d.next) * u64::from(d.fragment_size);
        let end = start + u64::from(frame_len.max(1));
        let first = Gfn::containing(start);
        let last = Gfn::containing(end - 1);
        d.next += 1;
        d.remaining -= 1;
        if d.remaining == 0 || d.next >= crate::virtio::fragment_count(d.fragment_size) {
            self.decoy = None;
        }
        for g in first.0..=last.0 {
            vcpu.write(Gfn(g).addr(), &[0u8; 8])?;
        }
        Ok(())
    }
}

impl RxEnv for GuestEnv {
    fn noise(&mut self, vcpu: &mut Vcpu<'_>, stage: NoiseStage, frame_len: u32) -> Result<(), Halt> {
        match stage {
            NoiseStage::BeforeCopy => {
                let n = match &self.noise {
                    Some(p) => p.sample(&mut self.rng) as u32,
                    None => 0,
                };
                let before = n / 2;
                self.pending = n - before;
                self.write_noise(vcpu, before)
            }
            NoiseStage::AfterCopy => {
                let n = std::mem::take(&mut self.pending);
                self.write_noise(vcpu, n)?;
                self.write_decoy(vcpu, frame_len)
            }
        }
    }

    fn allocate_packet_buffer(&mut self, fragment_size: u32) -> Result<PacketBuffer, VirtioError> {
        self.heap.allocate_packet_buffer(fragment_size)
    }
}

pub struct Guest {
    profile: GuestProfile,
    fragment_size: u32,
    queue_size: u16,
    kernel: Option<KernelImage>,
    driver: Option<RxDriver>,
    env: GuestEnv,
    crashed: bool,
    bounces: Vec<BounceRecord>,
}

impl Guest {
    pub fn new(profile: GuestProfile, fragment_size: u32, queue_size: u16, seed: u64) -> Self {
        let mut heap_rng = ChaCha8Rng::seed_from_u64(seed);
        heap_rng.set_stream(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let noise = (profile.noise_write_mean > 0.0)
            .then(|| Poisson::new(profile.noise_write_mean).expect("validated mean"));
        Self {
            profile,
            fragment_size,
            queue_size,
            kernel: None,
            driver: None,
            env: GuestEnv {
                heap: HeapAllocator::new(heap_rng),
                rng,
                noise,
                noise_pages: Vec::new(),
                pending: 0,
                decoy: None,
            },
            crashed: false,
            bounces: Vec::new(),
        }
    }

    pub fn profile(&self) -> &GuestProfile {
        &self.profile
    }

    pub fn kernel(&self) -> Option<&KernelImage> {
        self.kernel.as_ref()
    }

    pub fn driver(&self) -> Option<&RxDriver> {
        self.driver.as_ref()
    }

    pub fn crashed(&self) -> bool {
        self.crashed
    }

    pub fn bounces(&self) -> &[BounceRecord] {
        &self.bounces
    }

    pub fn noise_pages(&self) -> &[Gfn] {
        &self.env.noise_pages
    }

    /// Fragment sizes available to the driver, starting at the configured one.
    fn tiers(&self) -> Vec<u32> {
        let mut t = vec![self.fragment_size];
        t.extend(self.profile.fragment_tiers.iter().copied().filter(|&x| x > self.fragment_size));
        t
    }

    /// Makes the next `sequences` bounces also write the pages a packet
    /// buffer at a fresh heap chunk would receive.
    pub fn arm_decoy(&mut self, sequences: u32) -> Result<Gfn, VirtioError> {
        let base = self.env.heap.allocate_chunk()?;
        if sequences > 0 {
            self.env.decoy = Some(Decoy {
                base,
                fragment_size: self.fragment_size,
                next: 0,
                remaining: sequences,
            });
        }
        Ok(base)
    }

    pub fn boot(&mut self, vcpu: &mut Vcpu<'_>) -> Result<KernelImage, GuestFault> {
        for g in boot_prefix(&self.profile) {
            vcpu.write(g.addr(), &g.0.to_le_bytes())?;
        }
        let a = vcpu.read_tsc();
        let b = vcpu.read_tsc();
        let kernel = KernelImage::new(kaslr_base(a, b), &self.profile);

        let base = kernel.base_gfn.addr();
        vcpu.write(base, IMAGE_MAGIC)?;
        vcpu.write(base + kernel.nmi_handler_offset, &HANDLER_STUB)?;
        vcpu.write(base + kernel.do_nmi_offset, &[isa::OP_RET])?;
        for g in kernel.pre_handler_gfns() {
            vcpu.write(g.addr(), &HANDLER_STUB)?;
        }
        let data = kernel.data_gfns();
        for g in &data {
            vcpu.write(g.addr(), &[0u8; 8])?;
        }

        let queue = QueueLayout::new(self.queue_size, RX_RING_GFN.addr(), RX_USED_GFN.addr());
        let buffer = self.env.heap.allocate_packet_buffer(self.fragment_size)?;
        let mut driver = RxDriver::new(self.profile.virtio_mode, queue, self.tiers(), buffer);
        driver.init(vcpu)?;

        let mut pages = Vec::with_capacity(NOISE_CHUNKS + data.len());
        for _ in 0..NOISE_CHUNKS {
            let g = self.env.heap.reserve_page()?;
            vcpu.write(g.addr(), &[0u8; 8])?;
            pages.push(g);
        }
        pages.extend(data);
        self.env.noise_pages = pages;

        self.driver = Some(driver);
        self.kernel = Some(kernel.clone());
        Ok(kernel)
    }

    fn crash(&mut self, vcpu: &mut Vcpu<'_>) {
        self.crashed = true;
        let step = vcpu.hv().steps();
        vcpu.hv_mut().push_event(HvEvent::Shutdown { step });
    }

    /// Services a pending rx interrupt.
    pub fn handle_irq(&mut self, vcpu: &mut Vcpu<'_>) -> Result<Vec<BounceRecord>, GuestFault> {
        if self.crashed {
            return Err(GuestFault::Crashed);
        }
        let driver = self.driver.as_mut().ok_or(GuestFault::NotBooted)?;
        let records = driver.service(vcpu, &mut self.env)?;
        self.bounces.extend_from_slice(&records);
        Ok(records)
    }

    /// Delivers one NMI: entry code, handler, then `do_nmi`.
    pub fn handle_nmi(&mut self, vcpu: &mut Vcpu<'_>) -> Result<Vec<GuestEvent>, GuestFault> {
        if self.crashed {
            return Err(GuestFault::Crashed);
        }
        let kernel = self.kernel.clone().ok_or(GuestFault::NotBooted)?;
        for g in kernel.pre_handler_gfns() {
            vcpu.touch(g, Access::Execute)?;
        }
        vcpu.touch(kernel.handler_gfn(), Access::Execute)?;
        match execute_at(vcpu, kernel.do_nmi_gfn(), kernel.do_nmi_page_offset()) {
            Ok(events) => Ok(events),
            Err(ExecError::Halt(h)) => Err(GuestFault::Halt(h)),
            Err(e) => {
                self.crash(vcpu);
                Err(GuestFault::Exec(e))
            }
        }
    }
}
