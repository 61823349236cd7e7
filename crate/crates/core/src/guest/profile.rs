// SPDX-License-Identifier: Apache-2.0

//! Per-distribution guest configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::KERNEL_IMAGE_BYTES;
use crate::mem::PAGE_SIZE;
use crate::virtio::VirtioMode;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown profile {0:?}")]
    Unknown(String),
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Distro {
    Sles,
    Rhel,
    Fedora,
    Ubuntu,
    OpenSuse,
}

impl Distro {
    pub const ALL: [Distro; 5] = [Distro::Sles, Distro::Rhel, Distro::Fedora, Distro::Ubuntu, Distro::OpenSuse];

    pub fn name(self) -> &'static str {
        match self {
            Distro::Sles => "SLES",
            Distro::Rhel => "RHEL",
            Distro::Fedora => "Fedora",
            Distro::Ubuntu => "Ubuntu",
            Distro::OpenSuse => "openSUSE",
        }
    }

    fn source(self) -> &'static str {
        match self {
            Distro::Sles => include_str!("../../profiles/sles.toml"),
            Distro::Rhel => include_str!("../../profiles/rhel.toml"),
            Distro::Fedora => include_str!("../../profiles/fedora.toml"),
            Distro::Ubuntu => include_str!("../../profiles/ubuntu.toml"),
            Distro::OpenSuse => include_str!("../../profiles/opensuse.toml"),
        }
    }
}

impl fmt::Display for Distro {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distro {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Distro::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ProfileError::Unknown(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuestProfile {
    pub name: String,
    /// Mean number of unrelated kernel writes per bounced frame.
    pub noise_write_mean: f64,
    pub virtio_mode: VirtioMode,
    /// Offset of the NMI entry stub from the image base (`.entry.text`).
    pub nmi_handler_offset: u64,
    /// Offset of `do_nmi` from the image base (`.text`).
    pub do_nmi_offset: u64,
    /// Distinct kernel pages executed before the NMI handler proper.
    #[serde(default)]
    pub pre_handler_accesses: u32,
    pub fragment_tiers: Vec<u32>,
}

impl GuestProfile {
    pub fn builtin(distro: Distro) -> Self {
        Self::from_toml_str(distro.source()).expect("built-in profiles are valid")
    }

    pub fn all_builtin() -> Vec<Self> {
        Distro::ALL.into_iter().map(Self::builtin).collect()
    }

    /// Built-in profile by (case-insensitive) name.
    pub fn by_name(name: &str) -> Result<Self, ProfileError> {
        Ok(Self::builtin(name.parse()?))
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ProfileError> {
        let p: GuestProfile = toml::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::Invalid(format!("{}: {m}", self.name)));
        if !(self.noise_write_mean.is_finite() && self.noise_write_mean >= 0.0) {
            return bad("noise_write_mean must be a non-negative number");
        }
        let page = PAGE_SIZE as u64;
        if self.nmi_handler_offset / page == self.do_nmi_offset / page {
            return bad("NMI handler and do_nmi must be on different pages");
        }
        for off in [self.nmi_handler_offset, self.do_nmi_offset] {
            if off >= KERNEL_IMAGE_BYTES {
                return bad("symbol offset outside the kernel image");
            }
        }
        if self.fragment_tiers.is_empty() || !self.fragment_tiers.windows(2).all(|w| w[0] < w[1]) {
            return bad("fragment_tiers must be non-empty and strictly increasing");
        }
        if self.fragment_tiers.iter().any(|t| !(0x100..=0x8000).contains(t)) {
            return bad("fragment tiers must lie in 0x100..=0x8000");
        }
        if self.pre_handler_accesses > 64 {
            return bad("at most 64 pre-handler accesses");
        }
        Ok(())
    }

    pub fn do_nmi_page_offset(&self) -> u32 {
        (self.do_nmi_offset % PAGE_SIZE as u64) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_validate() {
        let all = GuestProfile::all_builtin();
        assert_eq!(all.len(), 5);
        let names: Vec<_> = all.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["SLES", "RHEL", "Fedora", "Ubuntu", "openSUSE"]);
        assert_eq!(GuestProfile::builtin(Distro::Sles).do_nmi_page_offset(), 0x700);
        assert_eq!(GuestProfile::builtin(Distro::Rhel).do_nmi_page_offset(), 0x200);
    }

    #[test]
    fn names_are_case_insensitive() {
        assert_eq!("opensuse".parse::<Distro>().unwrap(), Distro::OpenSuse);
        assert!(matches!("Arch".parse::<Distro>(), Err(ProfileError::Unknown(_))));
    }

    #[test]
    fn rejects_same_page_symbols() {
        let mut p = GuestProfile::builtin(Distro::Fedora);
        p.do_nmi_offset = p.nmi_handler_offset + 8;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_negative_noise() {
        let src = GuestProfile::builtin(Distro::Ubuntu);
        let mut text = toml::to_string(&src).unwrap();
        text.push_str("color = \"blue\"\n");
        assert!(GuestProfile::from_toml_str(&text).is_err());
        let mut p = src.clone();
        p.noise_write_mean = -1.0;
        assert!(p.validate().is_err());
    }
}
