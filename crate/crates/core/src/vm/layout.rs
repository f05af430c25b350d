//! Address-space layout for a given memory size `M`:
//!
//! ```text
//! 0x0            .. code_base        unmapped guard (readable, zero)
//! code_base      .. code_end         code, write-protected
//! data_base      .. data_end         initialized data
//! stack_base-16                      shadow-pointer word (compact mode)
//! stack_base=M/4 .. stack_top=M/2    main stack, grows down from stack_top
//! M/2            .. M                shadow region
//! ```

use serde::{Deserialize, Serialize};

use super::VmError;
use crate::asm::ProgramImage;

pub const DEFAULT_MEM_SIZE: usize = 1 << 20;
const MIN_MEM_SIZE: usize = 1 << 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub mem_size: u64,
    pub code_base: u64,
    pub code_end: u64,
    pub data_base: u64,
    pub data_end: u64,
    pub stack_base: u64,
    pub stack_top: u64,
    /// Memory word holding the compact shadow stack's next free slot.
    pub shadow_ptr: u64,
    pub shadow_base: u64,
    pub shadow_end: u64,
}

impl MemoryLayout {
    pub fn new(mem_size: usize, image: &ProgramImage) -> Result<Self, VmError> {
        if mem_size < MIN_MEM_SIZE || !mem_size.is_multiple_of(0x1000) {
            return Err(VmError::BadMemorySize(mem_size));
        }
        let m = mem_size as u64;
        let stack_base = m / 4;
        let shadow_ptr = stack_base - 16;
        let layout = Self {
            mem_size: m,
            code_base: image.code_base,
            code_end: image.code_end(),
            data_base: image.data_base,
            data_end: image.data_end(),
            stack_base,
            stack_top: m / 2,
            shadow_ptr,
            shadow_base: m / 2,
            shadow_end: m,
        };
        let overlaps = image.data_base < image.code_end() && !image.data.is_empty();
        if image.code_base < 8 || overlaps || image.code_end() > shadow_ptr || image.data_end() > shadow_ptr {
            return Err(VmError::ImageTooLarge { end: image.code_end().max(image.data_end()), limit: shadow_ptr });
        }
        Ok(layout)
    }

    pub fn in_code(&self, addr: u64, len: u64) -> bool {
        addr < self.code_end && addr.saturating_add(len) > self.code_base
    }

    /// Checks that a parallel shadow stack at `offset` lands inside the
    /// shadow region for every stack slot.
    pub fn check_parallel_offset(&self, offset: u64) -> Result<(), VmError> {
        let lo = self.stack_base.checked_add(offset);
        let hi = self.stack_top.checked_add(offset);
        match (lo, hi) {
            (Some(lo), Some(hi)) if lo >= self.shadow_base && hi <= self.shadow_end && offset.is_multiple_of(8) => Ok(()),
            _ => Err(VmError::BadShadowPlacement(offset)),
        }
    }

    /// Checks an explicit compact shadow-stack base, leaving room for at
    /// least a stack's worth of entries.
    pub fn check_compact_base(&self, base: u64) -> Result<(), VmError> {
        let room = (self.stack_top - self.stack_base) / 2;
        if !base.is_multiple_of(8) || base < self.shadow_base || base.saturating_add(room) > self.shadow_end {
            return Err(VmError::BadShadowPlacement(base));
        }
        Ok(())
    }

    /// Seed-derived compact base: an 8-aligned slot in the first half of the
    /// shadow region, chosen by `r`.
    pub fn compact_base_from(&self, r: u64) -> u64 {
        let slots = (self.shadow_end - self.shadow_base) / 2 / 8;
        self.shadow_base + 8 * (r % slots)
    }
}
