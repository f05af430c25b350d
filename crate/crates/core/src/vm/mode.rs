use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Shadow entries sit this far above the main-stack slot in parallel mode.
pub const DEFAULT_SHADOW_OFFSET: u64 = 0x4_0000;

/// Return-address protection applied by a VM run.
///
/// Text form: `baseline`, `zipper`, `shadow-parallel[:OFFSET]`,
/// `shadow-compact[:BASE]`. A compact shadow stack without an explicit base
/// is placed at a seed-dependent address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProtectionMode {
    Baseline,
    ShadowParallel { offset: u64 },
    ShadowCompact { base: Option<u64> },
    Zipper,
}

impl ProtectionMode {
    pub fn shadow_parallel() -> Self {
        ProtectionMode::ShadowParallel { offset: DEFAULT_SHADOW_OFFSET }
    }

    pub fn shadow_compact() -> Self {
        ProtectionMode::ShadowCompact { base: None }
    }

    /// The four modes with default parameters.
    pub fn all() -> [ProtectionMode; 4] {
        [Self::Baseline, Self::shadow_parallel(), Self::shadow_compact(), Self::Zipper]
    }

    pub fn is_shadow(self) -> bool {
        matches!(self, Self::ShadowParallel { .. } | Self::ShadowCompact { .. })
    }

    /// Mode name without parameters.
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::ShadowParallel { .. } => "shadow-parallel",
            Self::ShadowCompact { .. } => "shadow-compact",
            Self::Zipper => "zipper",
        }
    }
}

impl fmt::Display for ProtectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::ShadowParallel { offset } if offset != DEFAULT_SHADOW_OFFSET => {
                write!(f, "shadow-parallel:{offset:#x}")
            }
            Self::ShadowCompact { base: Some(b) } => write!(f, "shadow-compact:{b:#x}"),
            _ => f.write_str(self.name()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown protection mode `{0}` (expected baseline, shadow-parallel[:OFFSET], shadow-compact[:BASE] or zipper)")]
pub struct ParseModeError(pub String);

fn parse_u64(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

impl FromStr for ProtectionMode {
    type Err = ParseModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseModeError(s.to_string());
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(parse_u64(a).ok_or_else(err)?)),
            None => (lower.as_str(), None),
        };
        match (name, arg) {
            ("baseline" | "none", None) => Ok(Self::Baseline),
            ("zipper", None) => Ok(Self::Zipper),
            ("shadow-parallel" | "parallel", offset) => {
                Ok(Self::ShadowParallel { offset: offset.unwrap_or(DEFAULT_SHADOW_OFFSET) })
            }
            ("shadow-compact" | "compact", base) => Ok(Self::ShadowCompact { base }),
            _ => Err(err()),
        }
    }
}

impl Serialize for ProtectionMode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProtectionMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for m in ProtectionMode::all().into_iter().chain([
            ProtectionMode::ShadowParallel { offset: 0x8_0000 },
            ProtectionMode::ShadowCompact { base: Some(0x9_0000) },
        ]) {
            assert_eq!(m.to_string().parse::<ProtectionMode>().unwrap(), m);
        }
    }

    #[test]
    fn rejects_unknown() {
        assert!("zippr".parse::<ProtectionMode>().is_err());
        assert!("zipper:5".parse::<ProtectionMode>().is_err());
        assert!("shadow-parallel:zz".parse::<ProtectionMode>().is_err());
    }

    #[test]
    fn json_is_a_string() {
        let j = serde_json::to_string(&ProtectionMode::shadow_parallel()).unwrap();
        assert_eq!(j, "\"shadow-parallel\"");
        assert_eq!(serde_json::from_str::<ProtectionMode>(&j).unwrap(), ProtectionMode::shadow_parallel());
    }
}
