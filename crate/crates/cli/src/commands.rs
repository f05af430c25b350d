use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use zipper_core::asm::{assemble, decode_image, disassemble, encode_image, IMAGE_MAGIC};
use zipper_core::exec::Execution;
use zipper_core::redteam::{
    builtin_scenarios, parse_scenarios, run_matrix, victim_image, AttackReport, GroupSummary, ModeSummary, ScenarioCell,
};
use zipper_core::secanalysis::{self, AnalysisReport, SecurityParams, MAX_ENUM_BITS};
use zipper_core::timing::{OverheadReport, CSV_HEADER};
use zipper_core::vm::RunStatus;
use zipper_core::workloads::{run_suite, BENCHMARKS, BENCH_CONFIGS};
use zipper_core::{MacWidths, MachineState, ProgramImage, ProtectionMode, RunResult, VmConfig};

use crate::output::{csv_field, destination, emit, json, Format};
use crate::{AnalyzeArgs, AsmArgs, AttackArgs, BenchArgs, RunArgs, Widths};

const BENCH_FOOTER: &str = "Cycle counts come from the simulator's timing model on small synthetic workloads. \
They show structure (who stalls, what the cache saves), not the absolute overheads measured on real hardware, \
which are not reproducible here.";

fn load_image(path: &Path) -> Result<Arc<ProgramImage>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let image = if bytes.starts_with(IMAGE_MAGIC) {
        decode_image(&bytes).with_context(|| format!("decoding {}", path.display()))?
    } else {
        let text = String::from_utf8(bytes).with_context(|| format!("{} is neither an image nor UTF-8", path.display()))?;
        assemble(&text).with_context(|| format!("assembling {}", path.display()))?
    };
    Ok(Arc::new(image))
}

fn vm_config(w: Widths, cache_enabled: bool) -> Result<VmConfig> {
    Ok(VmConfig {
        widths: MacWidths::new(w.na, w.nm).context("MAC widths")?,
        key_bits: w.ns,
        cache_enabled,
        ..VmConfig::default()
    })
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Running => "running",
        RunStatus::Halted => "halted",
        RunStatus::Faulted => "faulted",
        RunStatus::CycleLimit => "cycle-limit",
    }
}

#[derive(Serialize)]
struct RunReport {
    command: &'static str,
    image: String,
    max_cycles: u64,
    key_bits: u32,
    /// Set when the program itself misbehaved (bad memory access, jump
    /// outside code), as opposed to a detected attack.
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    result: RunResult,
}

pub fn run(a: RunArgs) -> Result<u8> {
    let image = load_image(&a.image)?;
    let config = VmConfig { mem_size: a.mem_size, trace: a.trace, ..vm_config(a.widths, !a.no_cache)? };
    let mut vm = MachineState::new(image, a.mode, a.seed, config).context("configuring the machine")?;
    let (result, error) = match vm.run(a.max_cycles) {
        Ok(r) => (r, None),
        Err(e) => (vm.result(), Some(e.to_string())),
    };
    let report = RunReport {
        command: "run",
        image: a.image.display().to_string(),
        max_cycles: a.max_cycles,
        key_bits: a.widths.ns,
        error,
        result,
    };
    let text = match a.out.format {
        Format::Json => json(&report)?,
        Format::Csv => run_csv(&report),
        Format::Text => run_text(&report),
    };
    emit(&text, destination(a.out.output.as_deref(), "run", a.out.format).as_deref())?;
    let clean = report.error.is_none() && report.result.status == RunStatus::Halted;
    Ok(if clean { 0 } else { 1 })
}

fn run_csv(r: &RunReport) -> String {
    let res = &r.result;
    let mut s = String::from("image,mode,cache,seed,status,exit_code,cycles,instructions,fault,fault_pc,stalls,mac_ops,cache_hits\n");
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        csv_field(&r.image),
        res.mode,
        res.cache_enabled,
        res.seed,
        status_name(res.status),
        res.exit_code.map(|v| v.to_string()).unwrap_or_default(),
        res.cycles,
        res.instructions,
        res.fault.map(|f| f.kind.to_string()).unwrap_or_default(),
        res.fault.map(|f| format!("{:#x}", f.pc_at_fault)).unwrap_or_default(),
        res.timing.stall_cycles,
        res.timing.mac_ops,
        res.timing.cache_hits
    );
    s
}

fn run_text(r: &RunReport) -> String {
    let res = &r.result;
    let mut s = String::new();
    if let Some(t) = &res.trace {
        for line in t {
            let _ = writeln!(s, "{line}");
        }
    }
    let cache = if res.cache_enabled { "on" } else { "off" };
    let _ = writeln!(s, "image         {}", r.image);
    let _ = writeln!(s, "mode          {} (cache {cache}, Na={} Nm={} Ns={})", res.mode, res.addr_bits, res.mac_bits, r.key_bits);
    let _ = writeln!(s, "seed          {}", res.seed);
    let _ = writeln!(s, "status        {}", status_name(res.status));
    if let Some(v) = res.exit_code {
        let _ = writeln!(s, "exit value    {v}");
    }
    let _ = writeln!(s, "cycles        {}", res.cycles);
    let _ = writeln!(s, "instructions  {}", res.instructions);
    match res.fault {
        Some(f) => {
            let _ = writeln!(s, "fault         {} at pc {:#x}, cycle {}", f.kind, f.pc_at_fault, f.cycle_at_fault);
        }
        None => {
            let _ = writeln!(s, "fault         none");
        }
    }
    if let Some(e) = &r.error {
        let _ = writeln!(s, "error         {e}");
    }
    if !res.output.is_empty() {
        let out: Vec<String> = res.output.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "output        {}", out.join(" "));
    }
    let t = &res.timing;
    let _ = writeln!(
        s,
        "mac unit      {} ops, {} cache hits, {} stall cycles, {} chain ops",
        t.mac_ops, t.cache_hits, t.stall_cycles, t.chain_ops
    );
    s
}

#[derive(Serialize)]
struct AttackOutput {
    command: &'static str,
    scenarios: String,
    image: String,
    seed_start: u64,
    seed_count: u64,
    addr_bits: u32,
    mac_bits: u32,
    key_bits: u32,
    cache_enabled: bool,
    /// Zipper detected every non-probabilistic scenario in every run; null
    /// when Zipper was not evaluated.
    zipper_secure: Option<bool>,
    summary: Vec<ModeSummary>,
    shadow_stacks: Option<GroupSummary>,
    cells: Vec<ScenarioCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    runs: Option<Vec<AttackReport>>,
}

pub fn attack(a: AttackArgs) -> Result<u8> {
    let (scenarios, source) = match &a.scenarios {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            (parse_scenarios(&text).with_context(|| format!("in {}", p.display()))?, p.display().to_string())
        }
        None => (builtin_scenarios(), "builtin".to_string()),
    };
    let (image, image_name) = match &a.image {
        Some(p) => (load_image(p)?, p.display().to_string()),
        None => (victim_image(), "builtin-victim".to_string()),
    };
    if a.modes.is_empty() || a.seeds == 0 {
        bail!("need at least one mode and one seed");
    }
    let config = vm_config(a.widths, !a.no_cache)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed.wrapping_add(i)).collect();
    let m = run_matrix(image, &scenarios, &a.modes, &seeds, config, Execution::default())?;
    let zipper_secure = m.secures_deterministic(ProtectionMode::Zipper);
    let text = match a.out.format {
        Format::Text => {
            let mut s = m.table();
            match zipper_secure {
                Some(true) => s.push_str("zipper: every deterministic scenario detected in every run\n"),
                Some(false) => s.push_str("zipper: some deterministic scenario was NOT detected\n"),
                None => {}
            }
            s
        }
        Format::Csv => {
            let mut s = String::from("scenario,mode,probabilistic,runs,detected,bypassed,failed\n");
            for c in &m.cells {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    csv_field(&c.scenario),
                    c.mode,
                    c.probabilistic,
                    c.runs,
                    c.detected,
                    c.bypassed,
                    c.failed
                );
            }
            s
        }
        Format::Json => json(&AttackOutput {
            command: "attack",
            scenarios: source,
            image: image_name,
            seed_start: a.seed,
            seed_count: a.seeds,
            addr_bits: a.widths.na,
            mac_bits: a.widths.nm,
            key_bits: a.widths.ns,
            cache_enabled: !a.no_cache,
            zipper_secure,
            summary: m.summary.clone(),
            shadow_stacks: m.shadow_stacks.clone(),
            cells: m.cells.clone(),
            runs: a.runs.then(|| m.reports.clone()),
        })?,
    };
    emit(&text, destination(a.out.output.as_deref(), "attack", a.out.format).as_deref())?;
    Ok(if zipper_secure == Some(false) { 1 } else { 0 })
}

#[derive(Serialize)]
struct BenchOutput {
    command: &'static str,
    seed: u64,
    addr_bits: u32,
    mac_bits: u32,
    key_bits: u32,
    rows: Vec<OverheadReport>,
    note: &'static str,
}

pub fn bench(a: BenchArgs) -> Result<u8> {
    let config = vm_config(a.widths, true)?;
    let rows = run_suite(a.seed, config, Execution::default())?;
    let text = match a.out.format {
        Format::Csv => {
            let mut s = format!("{CSV_HEADER}\n");
            for r in &rows {
                let _ = writeln!(s, "{}", r.csv_row());
            }
            s
        }
        Format::Json => json(&BenchOutput {
            command: "bench",
            seed: a.seed,
            addr_bits: a.widths.na,
            mac_bits: a.widths.nm,
            key_bits: a.widths.ns,
            rows,
            note: BENCH_FOOTER,
        })?,
        Format::Text => bench_table(&rows),
    };
    emit(&text, destination(a.out.output.as_deref(), "bench", a.out.format).as_deref())?;
    Ok(0)
}

fn bench_table(rows: &[OverheadReport]) -> String {
    let mut s = String::from("Cycles and slowdown relative to baseline\n");
    let _ = write!(s, "{:<16}", "benchmark");
    let labels: Vec<&str> = rows.iter().take(BENCH_CONFIGS.len()).map(|r| r.mode.as_str()).collect();
    for l in &labels {
        let _ = write!(s, " {l:>22}");
    }
    let _ = writeln!(s, " {:>8} {:>10}", "stalls", "cache-hits");
    for (b, chunk) in rows.chunks(BENCH_CONFIGS.len()).enumerate() {
        let _ = write!(s, "{:<16}", BENCHMARKS[b].name);
        for r in chunk {
            let cell = if r.mode == "baseline" {
                r.cycles.to_string()
            } else {
                format!("{} ({:+.2}%)", r.cycles, r.slowdown * 100.0)
            };
            let _ = write!(s, " {cell:>22}");
        }
        let last = chunk.last().expect("non-empty chunk");
        let _ = writeln!(s, " {:>8} {:>10}", last.stalls, last.cache_hits);
    }
    let _ = writeln!(s, "(stalls and cache hits are for zipper-cache-on)");
    let _ = writeln!(s);
    let _ = writeln!(s, "Note: {BENCH_FOOTER}");
    s
}

#[derive(Serialize)]
struct AnalyzeOutput {
    command: &'static str,
    #[serde(flatten)]
    report: AnalysisReport,
}

pub fn analyze(a: AnalyzeArgs) -> Result<u8> {
    let p = SecurityParams { ns: a.widths.ns, nm: a.widths.nm, na: a.widths.na, n: a.n };
    let mut report = secanalysis::analyze(&p)?;
    if a.mc {
        if p.nm > MAX_ENUM_BITS {
            bail!("Monte Carlo needs Nm <= {MAX_ENUM_BITS} (got {}); pass --Nm", p.nm);
        }
        report.monte_carlo = Some(secanalysis::monte_carlo(&p, a.trials, a.seed, Execution::default())?);
    }
    let text = match a.out.format {
        Format::Text => report.table(),
        Format::Json => json(&AnalyzeOutput { command: "analyze", report: report.clone() })?,
        Format::Csv => {
            let mut s = String::from("quantity,value\n");
            let mut row = |k: &str, v: String| {
                let _ = writeln!(s, "{k},{v}");
            };
            row("ns", p.ns.to_string());
            row("nm", p.nm.to_string());
            row("na", p.na.to_string());
            row("n", p.n.to_string());
            row("expected_guesses", report.expected_guesses.clone());
            row("expected_guesses_log2", report.expected_guesses_log2.to_string());
            row("prob_no_valid_collision", report.prob_no_valid_collision.to_string());
            row("collision_existence_exact", report.collision_existence_exact.to_string());
            row("collision_existence_limit", report.collision_existence_limit.to_string());
            if let Some(mc) = &report.monte_carlo {
                row("mc_trials", mc.collision.trials.to_string());
                row("mc_seed", mc.collision.seed.to_string());
                row("mc_collision_existence", mc.collision.empirical.to_string());
                row("mc_collision_pass", mc.collision_pass.to_string());
                row("mc_conditional_guesses", mc.guess_cost.conditional_mean.to_string());
                row("mc_censored_guesses", mc.guess_cost.censored_mean.to_string());
                row("mc_guess_cost_pass", mc.guess_cost_pass.to_string());
            }
            s
        }
    };
    emit(&text, destination(a.out.output.as_deref(), "analyze", a.out.format).as_deref())?;
    let mc_ok = report.monte_carlo.as_ref().is_none_or(|mc| mc.collision_pass && mc.guess_cost_pass);
    Ok(if mc_ok { 0 } else { 1 })
}

pub fn asm(a: AsmArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.source).with_context(|| format!("reading {}", a.source.display()))?;
    let image = assemble(&text).with_context(|| format!("assembling {}", a.source.display()))?;
    if a.disasm {
        emit(&disassemble(&image), a.output.as_deref())?;
        return Ok(0);
    }
    let out: PathBuf = a.output.unwrap_or_else(|| a.source.with_extension("zimg"));
    fs::write(&out, encode_image(&image)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(0)
}
