//! Keyed truncated MAC over Keccak-f[400] and the small result cache that
//! sits in front of it.
//!
//! The MAC absorbs a single block `key(64) || address(Na) || prev_mac(Nm)`
//! into the 256-bit rate (bits packed LSB first, lane order `x + 5*y`),
//! applies pad10*1, runs one permutation, and returns the first `Nm` bits of
//! the rate.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::keccak::{keccak_f400_in_place, LANES};

/// Sponge rate in bits.
pub const RATE_BITS: u32 = 256;
/// Sponge capacity in bits.
pub const CAPACITY_BITS: u32 = 144;
/// Key register width.
pub const KEY_BITS: u32 = 64;
/// Number of recent results the MAC unit remembers.
pub const CACHE_ENTRIES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MacError {
    #[error("MAC width {0} outside 1..=64")]
    MacWidth(u32),
    #[error("address width {0} outside 1..=64")]
    AddrWidth(u32),
    #[error("address width {addr} + MAC width {mac} exceeds 128 bits")]
    TotalWidth { addr: u32, mac: u32 },
}

/// Secret key held in the Key register.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacKey(pub u64);

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacKey({:#018x})", self.0)
    }
}

/// A MAC tag. Its width is carried by the [`MacWidths`] it was produced under.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MacValue(pub u64);

impl MacValue {
    pub const ZERO: MacValue = MacValue(0);

    pub fn bits(self) -> u64 {
        self.0
    }
}

impl fmt::Debug for MacValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacValue({:#x})", self.0)
    }
}

impl fmt::Display for MacValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[inline]
fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Address width `Na` and MAC width `Nm`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacWidths {
    addr_bits: u32,
    mac_bits: u32,
}

impl MacWidths {
    /// Hardware prototype widths: 40-bit addresses, 24-bit MACs.
    pub const HARDWARE: MacWidths = MacWidths { addr_bits: 40, mac_bits: 24 };
    /// Emulator widths: 39-bit addresses, 25-bit MACs.
    pub const EMULATOR: MacWidths = MacWidths { addr_bits: 39, mac_bits: 25 };
    /// Small enough to enumerate exhaustively.
    pub const TINY: MacWidths = MacWidths { addr_bits: 8, mac_bits: 8 };

    pub fn new(addr_bits: u32, mac_bits: u32) -> Result<Self, MacError> {
        if !(1..=64).contains(&mac_bits) {
            return Err(MacError::MacWidth(mac_bits));
        }
        if !(1..=64).contains(&addr_bits) {
            return Err(MacError::AddrWidth(addr_bits));
        }
        if addr_bits + mac_bits > 128 {
            return Err(MacError::TotalWidth { addr: addr_bits, mac: mac_bits });
        }
        Ok(Self { addr_bits, mac_bits })
    }

    pub fn addr_bits(self) -> u32 {
        self.addr_bits
    }

    pub fn mac_bits(self) -> u32 {
        self.mac_bits
    }

    pub fn addr_mask(self) -> u64 {
        low_mask(self.addr_bits)
    }

    pub fn mac_mask(self) -> u64 {
        low_mask(self.mac_bits)
    }

    /// Number of distinct MAC values, `2^Nm`.
    pub fn mac_space(self) -> u128 {
        1u128 << self.mac_bits
    }
}

impl Default for MacWidths {
    fn default() -> Self {
        Self::HARDWARE
    }
}

/// Validates a `(Na, Nm)` pair.
pub fn configure_widths(addr_bits: u32, mac_bits: u32) -> Result<MacWidths, MacError> {
    MacWidths::new(addr_bits, mac_bits)
}

/// One MAC input: an `Na`-bit address chained with an `Nm`-bit previous MAC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacRequest {
    pub address: u64,
    pub prev_mac: MacValue,
}

impl MacRequest {
    pub fn new(address: u64, prev_mac: MacValue) -> Self {
        Self { address, prev_mac }
    }
}

/// Little-endian bit packer over the 256-bit rate.
struct RateBlock {
    words: [u64; 4],
    len: usize,
}

impl RateBlock {
    fn new() -> Self {
        Self { words: [0; 4], len: 0 }
    }

    fn push(&mut self, value: u64, width: u32) {
        let value = value & low_mask(width);
        let word = self.len / 64;
        let shift = (self.len % 64) as u32;
        self.words[word] |= value << shift;
        if shift != 0 && shift + width > 64 {
            self.words[word + 1] |= value >> (64 - shift);
        }
        self.len += width as usize;
    }

    /// pad10*1 up to the rate.
    fn pad(&mut self) {
        let n = self.len;
        self.words[n / 64] |= 1 << (n % 64);
        self.words[3] |= 1 << 63;
    }

    fn xor_into(&self, lanes: &mut [u16; LANES]) {
        for (i, lane) in lanes.iter_mut().take(16).enumerate() {
            *lane ^= (self.words[i / 4] >> (16 * (i % 4))) as u16;
        }
    }
}

/// Computes the MAC of `req` under `key` at the given widths.
///
/// Inputs wider than their field are truncated to it.
pub fn mac(key: MacKey, widths: MacWidths, req: MacRequest) -> MacValue {
    let mut block = RateBlock::new();
    block.push(key.0, KEY_BITS);
    block.push(req.address, widths.addr_bits);
    block.push(req.prev_mac.0, widths.mac_bits);
    block.pad();

    let mut lanes = [0u16; LANES];
    block.xor_into(&mut lanes);
    keccak_f400_in_place(&mut lanes);

    let squeezed = lanes[0] as u64
        | (lanes[1] as u64) << 16
        | (lanes[2] as u64) << 32
        | (lanes[3] as u64) << 48;
    MacValue(squeezed & widths.mac_mask())
}

/// Least-recently-used cache of the last few MAC results.
#[derive(Clone, Debug, Default)]
pub struct MacCache {
    // most recently used first
    entries: Vec<(MacRequest, MacValue)>,
}

impl MacCache {
    pub fn new() -> Self {
        Self { entries: Vec::with_capacity(CACHE_ENTRIES) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Looks up `req`, promoting it to most recently used on a hit.
    pub fn lookup(&mut self, req: &MacRequest) -> Option<MacValue> {
        let pos = self.entries.iter().position(|(r, _)| r == req)?;
        let entry = self.entries.remove(pos);
        self.entries.insert(0, entry);
        Some(entry.1)
    }

    pub fn insert(&mut self, req: MacRequest, value: MacValue) {
        if let Some(pos) = self.entries.iter().position(|(r, _)| *r == req) {
            self.entries.remove(pos);
        }
        if self.entries.len() == CACHE_ENTRIES {
            self.entries.pop();
        }
        self.entries.insert(0, (req, value));
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// The MAC functional unit: key, widths, and optional result cache.
///
/// Owns mutable cache state, so it is `Send` but callers sharing one across
/// threads need their own locking. [`mac`] itself is pure.
#[derive(Clone, Debug)]
pub struct MacUnit {
    key: MacKey,
    widths: MacWidths,
    cache: MacCache,
    cache_enabled: bool,
}

impl MacUnit {
    pub fn new(key: MacKey, widths: MacWidths, cache_enabled: bool) -> Self {
        Self { key, widths, cache: MacCache::new(), cache_enabled }
    }

    /// Builds a unit after validating `(Na, Nm)`.
    pub fn configure(
        key: MacKey,
        addr_bits: u32,
        mac_bits: u32,
        cache_enabled: bool,
    ) -> Result<Self, MacError> {
        Ok(Self::new(key, configure_widths(addr_bits, mac_bits)?, cache_enabled))
    }

    pub fn key(&self) -> MacKey {
        self.key
    }

    /// Replaces the key. Cached results were computed under the old key and are dropped.
    pub fn set_key(&mut self, key: MacKey) {
        self.key = key;
        self.cache.clear();
    }

    pub fn widths(&self) -> MacWidths {
        self.widths
    }

    pub fn cache_enabled(&self) -> bool {
        self.cache_enabled
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Uncached MAC under this unit's key.
    pub fn mac(&self, req: MacRequest) -> MacValue {
        mac(self.key, self.widths, self.normalize(req))
    }

    /// MAC through the result cache; `hit` is false whenever the cache is off.
    pub fn mac_cached(&mut self, req: MacRequest) -> (MacValue, bool) {
        let req = self.normalize(req);
        if !self.cache_enabled {
            return (mac(self.key, self.widths, req), false);
        }
        if let Some(v) = self.cache.lookup(&req) {
            return (v, true);
        }
        let v = mac(self.key, self.widths, req);
        self.cache.insert(req, v);
        (v, false)
    }

    fn normalize(&self, req: MacRequest) -> MacRequest {
        MacRequest {
            address: req.address & self.widths.addr_mask(),
            prev_mac: MacValue(req.prev_mac.0 & self.widths.mac_mask()),
        }
    }
}
