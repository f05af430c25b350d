//! Sample programs: the benchmark suite, the attack victim and a small
//! factorial example.

use std::sync::Arc;

use thiserror::Error;

use crate::asm::{assemble, AsmError, ProgramImage};
use crate::exec::{map_indexed, Execution};
use crate::timing::{overhead_report, OverheadReport, TimingError};
use crate::vm::{MachineState, ProtectionMode, RunResult, RunStatus, VmConfig, VmError};

pub const FACTORIAL: &str = include_str!("factorial.zasm");
pub const DEEP_RECURSION: &str = include_str!("deep_recursion.zasm");
pub const CALL_DENSE: &str = include_str!("call_dense.zasm");
pub const LEAF_DENSE: &str = include_str!("leaf_dense.zasm");
pub const SETJMP_HEAVY: &str = include_str!("setjmp_heavy.zasm");
/// Target program for the attack scenarios.
pub const VICTIM: &str = include_str!("victim.zasm");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Workload {
    pub name: &'static str,
    pub source: &'static str,
}

pub const BENCHMARKS: [Workload; 4] = [
    Workload { name: "deep-recursion", source: DEEP_RECURSION },
    Workload { name: "call-dense", source: CALL_DENSE },
    Workload { name: "leaf-dense", source: LEAF_DENSE },
    Workload { name: "setjmp-heavy", source: SETJMP_HEAVY },
];

/// Cycle budget for one benchmark run.
pub const BENCH_MAX_CYCLES: u64 = 50_000_000;

/// A mode plus cache setting, as compared by the benchmark suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub mode: ProtectionMode,
    pub cache_enabled: bool,
}

/// Baseline, parallel shadow stack, Zipper without and with the MAC cache.
pub const BENCH_CONFIGS: [BenchConfig; 4] = [
    BenchConfig { mode: ProtectionMode::Baseline, cache_enabled: true },
    BenchConfig { mode: ProtectionMode::ShadowParallel { offset: crate::vm::DEFAULT_SHADOW_OFFSET }, cache_enabled: true },
    BenchConfig { mode: ProtectionMode::Zipper, cache_enabled: false },
    BenchConfig { mode: ProtectionMode::Zipper, cache_enabled: true },
];

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("{name}: {source}")]
    Asm { name: String, source: AsmError },
    #[error("{name}: {source}")]
    Vm { name: String, source: VmError },
    #[error("{name} under {mode}: did not halt cleanly ({status:?})")]
    NotHalted { name: String, mode: String, status: RunStatus },
    #[error(transparent)]
    Timing(#[from] TimingError),
}

pub fn assemble_workload(w: &Workload) -> Result<Arc<ProgramImage>, SuiteError> {
    assemble(w.source)
        .map(Arc::new)
        .map_err(|source| SuiteError::Asm { name: w.name.to_string(), source })
}

/// Runs one benchmark under one configuration and insists on a clean HALT.
pub fn run_workload(
    name: &str,
    image: Arc<ProgramImage>,
    cfg: BenchConfig,
    seed: u64,
    base: VmConfig,
) -> Result<(RunResult, MachineState), SuiteError> {
    let config = VmConfig { cache_enabled: cfg.cache_enabled, ..base };
    let vm_err = |source| SuiteError::Vm { name: name.to_string(), source };
    let mut state = MachineState::new(image, cfg.mode, seed, config).map_err(vm_err)?;
    let result = state.run(BENCH_MAX_CYCLES).map_err(vm_err)?;
    if result.status != RunStatus::Halted {
        return Err(SuiteError::NotHalted { name: name.into(), mode: result.config_label(), status: result.status });
    }
    Ok((result, state))
}

/// Every benchmark under every [`BENCH_CONFIGS`] entry, as overhead
/// reports relative to the baseline run. Rows are ordered benchmark-major.
pub fn run_suite(seed: u64, base: VmConfig, exec: Execution) -> Result<Vec<OverheadReport>, SuiteError> {
    let images = BENCHMARKS.iter().map(assemble_workload).collect::<Result<Vec<_>, _>>()?;
    let n_cfg = BENCH_CONFIGS.len();
    let runs = map_indexed(exec, BENCHMARKS.len() * n_cfg, |i| {
        let (b, c) = (i / n_cfg, i % n_cfg);
        run_workload(BENCHMARKS[b].name, images[b].clone(), BENCH_CONFIGS[c], seed, base).map(|(r, _)| r)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(runs.len());
    for (b, chunk) in runs.chunks(n_cfg).enumerate() {
        for r in chunk {
            rows.push(overhead_report(BENCHMARKS[b].name, &chunk[0], r)?);
        }
    }
    Ok(rows)
}
