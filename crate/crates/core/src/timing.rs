//! Cycle accounting for the MAC unit and the shadow-stack comparators.
//!
//! Every ordinary instruction retires in one cycle. ZIP and UNZIP also
//! retire in one cycle, but they hand a request to the MAC unit, which stays
//! busy for `mac_latency` cycles (one cycle on a cache hit). A MAC
//! instruction that arrives while the unit is still busy stalls until it is
//! free; one that arrives later overlaps completely and costs only its own
//! cycle. Outside Zipper mode ZIP and UNZIP are elided and cost nothing, so
//! the same image can be compared across modes.
//!
//! Shadow-stack modes charge `shadow_cost` extra cycles for the push on
//! CALL and the comparison on RET.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Instruction;
use crate::vm::{ProtectionMode, RunResult};

/// Cycles for one uncached MAC computation.
pub const MAC_LATENCY: u64 = 20;
/// Extra cycles per shadow-stack push or check.
pub const SHADOW_COST: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingModel {
    pub mac_latency: u64,
    pub shadow_cost: u64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self { mac_latency: MAC_LATENCY, shadow_cost: SHADOW_COST }
    }
}

/// MAC requests issued by one instruction and how many hit the cache.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacUse {
    pub ops: u32,
    pub hits: u32,
}

impl MacUse {
    pub const NONE: MacUse = MacUse { ops: 0, hits: 0 };

    pub fn single(hit: bool) -> Self {
        Self { ops: 1, hits: hit as u32 }
    }

    pub fn record(&mut self, hit: bool) {
        self.ops += 1;
        self.hits += hit as u32;
    }
}

/// Aggregate counters, as reported alongside a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingCounters {
    pub stall_cycles: u64,
    pub mac_ops: u64,
    pub cache_hits: u64,
    /// ZIP plus UNZIP instructions executed in Zipper mode.
    pub chain_ops: u64,
    pub shadow_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimingState {
    pub model: TimingModel,
    pub cycle: u64,
    pub mac_busy_until: u64,
    pub counters: TimingCounters,
}

impl TimingState {
    pub fn new(model: TimingModel) -> Self {
        Self { model, cycle: 0, mac_busy_until: 0, counters: TimingCounters::default() }
    }

    /// Charges one executed instruction and returns the cycles it consumed.
    pub fn account_instruction(&mut self, instr: &Instruction, mode: ProtectionMode, mac: MacUse) -> u64 {
        let zipper = matches!(mode, ProtectionMode::Zipper);
        let before = self.cycle;
        match instr {
            Instruction::Zip | Instruction::Unzip if !zipper => {}
            Instruction::Zip | Instruction::Unzip => {
                self.counters.chain_ops += 1;
                self.mac_instruction(mac);
            }
            Instruction::SetJmp { .. } | Instruction::LongJmp { .. } if zipper => self.mac_instruction(mac),
            Instruction::Call { .. } | Instruction::Ret if mode.is_shadow() => {
                self.counters.shadow_ops += 1;
                self.cycle += 1 + self.model.shadow_cost;
            }
            _ => self.cycle += 1,
        }
        self.cycle - before
    }

    fn mac_instruction(&mut self, mac: MacUse) {
        if self.mac_busy_until > self.cycle {
            self.counters.stall_cycles += self.mac_busy_until - self.cycle;
            self.cycle = self.mac_busy_until;
        }
        if mac.ops > 0 {
            let misses = (mac.ops - mac.hits) as u64;
            let latency = misses * self.model.mac_latency + mac.hits as u64;
            self.mac_busy_until = self.cycle + latency;
            self.counters.mac_ops += mac.ops as u64;
            self.counters.cache_hits += mac.hits as u64;
        }
        self.cycle += 1;
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimingError {
    #[error("runs come from different images ({0:#x} vs {1:#x})")]
    MismatchedImages(u64, u64),
    #[error("baseline run has zero cycles")]
    EmptyBaseline,
}

/// Slowdown of one protected configuration relative to a baseline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub benchmark: String,
    pub mode: String,
    pub cycles: u64,
    pub base_cycles: u64,
    pub slowdown: f64,
    pub stalls: u64,
    pub mac_ops: u64,
    pub cache_hits: u64,
    pub chain_ops: u64,
    pub shadow_ops: u64,
}

pub const CSV_HEADER: &str = "benchmark,mode,cycles,slowdown,stalls,mac_ops,cache_hits";

impl OverheadReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{},{}",
            self.benchmark, self.mode, self.cycles, self.slowdown, self.stalls, self.mac_ops, self.cache_hits
        )
    }
}

/// `protected.cycles / base.cycles - 1` plus the protected run's counters.
pub fn overhead_report(benchmark: &str, base: &RunResult, protected: &RunResult) -> Result<OverheadReport, TimingError> {
    if base.image_digest != protected.image_digest {
        return Err(TimingError::MismatchedImages(base.image_digest, protected.image_digest));
    }
    if base.cycles == 0 {
        return Err(TimingError::EmptyBaseline);
    }
    let c = protected.timing;
    Ok(OverheadReport {
        benchmark: benchmark.to_string(),
        mode: protected.config_label(),
        cycles: protected.cycles,
        base_cycles: base.cycles,
        slowdown: protected.cycles as f64 / base.cycles as f64 - 1.0,
        stalls: c.stall_cycles,
        mac_ops: c.mac_ops,
        cache_hits: c.cache_hits,
        chain_ops: c.chain_ops,
        shadow_ops: c.shadow_ops,
    })
}
