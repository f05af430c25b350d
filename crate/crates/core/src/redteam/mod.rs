//! Attack harness.
//!
//! A scenario pauses the victim at trigger points and edits its memory
//! within the granted capabilities. The attacker never writes `top` or the
//! key; a key leak only lets it compute MACs. After the last stage fires,
//! reaching the goal address is a bypass and a security fault is a
//! detection. Anything else (normal halt, missed trigger, VM error) fails.

mod script;

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use script::{
    parse_expr, parse_scenarios, Action, AttackScenario, AttackerCapabilities, Base, Expr, ScenarioError, Stage,
    Target, Trigger,
};

use crate::asm::{assemble, ProgramImage};
use crate::exec::{map_indexed, Execution};
use crate::isa::Reg;
use crate::mac::MacValue;
use crate::vm::{fnv1a, FaultKind, MachineState, ProtectionMode, RunStatus, VmConfig, VmError};
use crate::workloads::VICTIM;

/// Scenario library shipped with the crate.
pub const BUILTIN_SCENARIOS: &str = include_str!("library.zatk");

/// Cycle budget for one attacked run of the victim.
pub const ATTACK_MAX_CYCLES: u64 = 1_000_000;

pub fn builtin_scenarios() -> Vec<AttackScenario> {
    parse_scenarios(BUILTIN_SCENARIOS).expect("built-in scenarios parse")
}

pub fn victim_image() -> Arc<ProgramImage> {
    Arc::new(assemble(VICTIM).expect("victim assembles"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    Detected { fault: FaultKind, pc: u64 },
    Bypassed,
    Failed { reason: String },
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Detected { .. } => "detected",
            Verdict::Bypassed => "bypassed",
            Verdict::Failed { .. } => "failed",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Detected { fault, pc } => write!(f, "detected ({fault} at {pc:#x})"),
            Verdict::Bypassed => f.write_str("bypassed"),
            Verdict::Failed { reason } => write!(f, "failed ({reason})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenario: String,
    pub mode: ProtectionMode,
    pub seed: u64,
    pub probabilistic: bool,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub stages_fired: usize,
    pub cycles: u64,
    /// Skipped actions, dumped bytes and similar.
    pub notes: Vec<String>,
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("cannot set up the victim under {mode}: {source}")]
    Setup { mode: ProtectionMode, source: VmError },
}

struct Resolved {
    goal: u64,
    triggers: Vec<ResolvedTrigger>,
}

#[derive(Clone, Copy)]
enum ResolvedTrigger {
    At { pc: u64, hit: u32 },
    Cycle(u64),
}

fn resolve(scenario: &AttackScenario, image: &ProgramImage) -> Result<Resolved, ScenarioError> {
    scenario.validate()?;
    for s in scenario.symbols() {
        image.symbol(s).ok_or_else(|| ScenarioError::UnknownSymbol(s.to_string()))?;
    }
    let triggers = scenario
        .stages
        .iter()
        .map(|st| match &st.trigger {
            Trigger::Breakpoint { at, hit } => at.resolve(image).map(|pc| ResolvedTrigger::At { pc, hit: *hit }),
            Trigger::Cycle(c) => Ok(ResolvedTrigger::Cycle(*c)),
        })
        .collect::<Result<_, _>>()?;
    Ok(Resolved { goal: scenario.goal.resolve(image)?, triggers })
}

/// Attacker's view of a paused machine.
struct Attacker<'a> {
    vm: &'a mut MachineState,
    caps: AttackerCapabilities,
    vars: HashMap<String, u64>,
    rng: ChaCha8Rng,
    notes: Vec<String>,
}

impl Attacker<'_> {
    /// Stack words above `sp` whose address field is a return site, newest first.
    fn slots(&self) -> Vec<u64> {
        let sites: BTreeSet<u64> = self.vm.image().return_sites();
        let mask = self.vm.widths().addr_mask();
        let top = self.vm.layout().stack_top;
        let mut out = Vec::new();
        let mut a = self.vm.reg(Reg::SP) & !7;
        while a + 8 <= top {
            if let Ok(w) = self.vm.read_u64(a) {
                if sites.contains(&(w & mask)) {
                    out.push(a);
                }
            }
            a += 8;
        }
        out
    }

    fn eval(&self, e: &Expr) -> Result<u64, String> {
        let base = match &e.base {
            Base::Abs(v) => *v,
            Base::Symbol(s) => self.vm.image().symbol(s).ok_or_else(|| format!("unknown symbol {s}"))?,
            Base::Var(v) => *self.vars.get(v).ok_or_else(|| format!("${v} is unset"))?,
            Base::Sp => self.vm.reg(Reg::SP),
            Base::Slot(n) => *self.slots().get(*n).ok_or_else(|| format!("no return slot {n} on the stack"))?,
        };
        Ok(base.wrapping_add_signed(e.offset))
    }

    fn write(&mut self, addr: u64, v: u64) -> Result<(), String> {
        self.vm.write_u64(addr, v).map_err(|e| format!("write refused: {e}"))
    }

    fn apply(&mut self, a: &Action) -> Result<(), String> {
        debug_assert!(self.caps.read_memory || !matches!(a, Action::Read { .. }));
        match a {
            Action::Read { addr, len } => {
                let at = self.eval(addr)?;
                let bytes = self.vm.read_bytes(at, *len).map_err(|e| format!("read refused: {e}"))?;
                let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
                self.notes.push(format!("read {at:#x}: {hex}"));
            }
            Action::ReadWord { var, addr } => {
                let at = self.eval(addr)?;
                let v = self.vm.read_u64(at).map_err(|e| format!("read refused: {e}"))?;
                self.vars.insert(var.clone(), v);
            }
            Action::WriteWord { addr, value } => {
                let (at, v) = (self.eval(addr)?, self.eval(value)?);
                self.write(at, v)?;
            }
            Action::WriteBytes { addr, bytes } => {
                let at = self.eval(addr)?;
                self.vm.write_bytes(at, bytes).map_err(|e| format!("write refused: {e}"))?;
            }
            Action::WriteReg { reg, value } => {
                // validated: a general register
                let r = Reg::parse(reg).ok_or_else(|| format!("unknown register {reg}"))?;
                let v = self.eval(value)?;
                self.vm.set_reg(r, v);
            }
            Action::GuessMac { addr, value } => {
                let (at, target) = (self.eval(addr)?, self.eval(value)?);
                let w = self.vm.widths();
                let guess = MacValue(self.rng.random::<u64>() & w.mac_mask());
                let word = self.vm.pack_ra(target, guess);
                self.write(at, word)?;
            }
            Action::ForgeChain { depth, value } => {
                let target = self.eval(value)?;
                let slots = self.slots();
                if slots.len() <= *depth {
                    return Err(format!("only {} return slots on the stack", slots.len()));
                }
                let mut words = Vec::with_capacity(depth + 1);
                for &s in &slots[..=*depth] {
                    words.push(self.vm.read_u64(s).map_err(|e| format!("read refused: {e}"))?);
                }
                let (_, field) = self.vm.unpack_ra(words[*depth]);
                let mut next = (target, field);
                words[*depth] = self.vm.pack_ra(target, field);
                // each newer slot stores the chain value produced by the older one
                for i in (0..*depth).rev() {
                    let (addr, _) = self.vm.unpack_ra(words[i]);
                    let forged = self.vm.mac_oracle(next.0, next.1);
                    words[i] = self.vm.pack_ra(addr, forged);
                    next = (addr, forged);
                }
                for (s, w) in slots.iter().zip(&words) {
                    self.write(*s, *w)?;
                }
            }
            Action::LocateShadow { var } => {
                let ptr = self.vm.layout().shadow_ptr;
                let v = self.vm.read_u64(ptr).map_err(|e| format!("read refused: {e}"))?;
                self.vars.insert(var.clone(), v);
            }
        }
        Ok(())
    }
}

/// Runs `scenario` against a freshly loaded machine until it stops or
/// `max_cycles` elapse.
pub fn attach_and_run(
    vm: &mut MachineState,
    scenario: &AttackScenario,
    max_cycles: u64,
) -> Result<AttackReport, ScenarioError> {
    let plan = resolve(scenario, vm.image())?;
    let bp_pcs: BTreeSet<u64> = plan
        .triggers
        .iter()
        .filter_map(|t| match t {
            ResolvedTrigger::At { pc, .. } => Some(*pc),
            ResolvedTrigger::Cycle(_) => None,
        })
        .collect();
    let mut hits: HashMap<u64, u32> = HashMap::new();
    let seed = vm.seed();
    let mode = vm.mode();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6775_6573_735f_6d61);
    rng.set_stream(fnv1a(scenario.name.as_bytes()));
    let mut atk = Attacker { vm, caps: scenario.capabilities, vars: HashMap::new(), rng, notes: Vec::new() };
    let mut stage = 0;

    let verdict = loop {
        if let Some(f) = atk.vm.fault() {
            break if stage == scenario.stages.len() {
                Verdict::Detected { fault: f.kind, pc: f.pc_at_fault }
            } else {
                Verdict::Failed { reason: format!("{} before the attack completed", f.kind) }
            };
        }
        if atk.vm.status() == RunStatus::Halted {
            break Verdict::Failed { reason: "victim halted normally".into() };
        }
        if atk.vm.cycles() >= max_cycles {
            break Verdict::Failed { reason: format!("cycle limit {max_cycles} reached") };
        }
        let pc = atk.vm.pc();
        if bp_pcs.contains(&pc) {
            *hits.entry(pc).or_insert(0) += 1;
        }
        while stage < scenario.stages.len() {
            let fire = match plan.triggers[stage] {
                ResolvedTrigger::At { pc: at, hit } => at == pc && hits.get(&pc) == Some(&hit),
                ResolvedTrigger::Cycle(c) => atk.vm.cycles() >= c,
            };
            if !fire {
                break;
            }
            for a in &scenario.stages[stage].actions {
                if let Err(msg) = atk.apply(a) {
                    atk.notes.push(format!("stage {}: skipped: {msg}", stage + 1));
                }
            }
            stage += 1;
        }
        if stage == scenario.stages.len() && pc == plan.goal {
            break Verdict::Bypassed;
        }
        if let Err(e) = atk.vm.step() {
            break Verdict::Failed { reason: format!("vm error: {e}") };
        }
    };
    let verdict = match verdict {
        Verdict::Failed { reason } if stage < scenario.stages.len() => {
            Verdict::Failed { reason: format!("{reason}; stage {} never triggered", stage + 1) }
        }
        v => v,
    };
    Ok(AttackReport {
        scenario: scenario.name.clone(),
        mode,
        seed,
        probabilistic: scenario.probabilistic,
        verdict,
        stages_fired: stage,
        cycles: atk.vm.cycles(),
        notes: atk.notes,
    })
}

/// Counts for one scenario under one mode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCell {
    pub scenario: String,
    pub mode: ProtectionMode,
    pub probabilistic: bool,
    pub runs: usize,
    pub detected: usize,
    pub bypassed: usize,
    pub failed: usize,
}

/// Row of the per-defense summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: ProtectionMode,
    pub scenarios: usize,
    /// Scenarios detected in every run.
    pub secured: usize,
    /// Scenarios that reached their goal in at least one run.
    pub bypassed: usize,
    /// Unattacked victim runs that raised a fault.
    pub benign_faults: usize,
    pub benign_runs: usize,
}

/// Scenarios against the shadow-stack variants taken together: secured if
/// every evaluated variant detected every run, bypassed if any variant was
/// bypassed in some run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub modes: Vec<ProtectionMode>,
    pub scenarios: usize,
    pub secured: usize,
    pub bypassed: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionMatrix {
    pub seeds: Vec<u64>,
    pub summary: Vec<ModeSummary>,
    /// Present when at least one shadow-stack mode was evaluated.
    pub shadow_stacks: Option<GroupSummary>,
    pub cells: Vec<ScenarioCell>,
    pub reports: Vec<AttackReport>,
}

impl DetectionMatrix {
    pub fn cell(&self, scenario: &str, mode: ProtectionMode) -> Option<&ScenarioCell> {
        self.cells.iter().find(|c| c.scenario == scenario && c.mode == mode)
    }

    pub fn summary_for(&self, mode: ProtectionMode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    /// Whether `mode` detected every non-probabilistic scenario in every
    /// run. `None` if the mode was not evaluated.
    pub fn secures_deterministic(&self, mode: ProtectionMode) -> Option<bool> {
        self.summary_for(mode)?;
        Some(
            self.cells
                .iter()
                .filter(|c| c.mode == mode && !c.probabilistic)
                .all(|c| c.detected == c.runs),
        )
    }

    /// Summary plus per-scenario detected/bypassed/failed counts.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Attack results over {} seed(s)", self.seeds.len());
        let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>9} {:>13}", "defense", "attacks", "secured", "bypassed", "benign-faults");
        for m in &self.summary {
            let _ = writeln!(
                s,
                "{:<18} {:>8} {:>8} {:>9} {:>13}",
                m.mode.to_string(),
                m.scenarios,
                m.secured,
                m.bypassed,
                format!("{}/{}", m.benign_faults, m.benign_runs)
            );
        }
        if let Some(g) = &self.shadow_stacks {
            let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>9}", "shadow stacks", g.scenarios, g.secured, g.bypassed);
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<24}", "scenario (det/byp/fail)");
        for m in &self.summary {
            let _ = write!(s, " {:>16}", m.mode.to_string());
        }
        let _ = writeln!(s);
        let mut names: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !names.contains(&c.scenario.as_str()) {
                names.push(&c.scenario);
            }
        }
        for n in names {
            let prob = self.cells.iter().any(|c| c.scenario == n && c.probabilistic);
            let label = if prob { format!("{n}*") } else { n.to_string() };
            let _ = write!(s, "{label:<24}");
            for m in &self.summary {
                let cell = self.cell(n, m.mode).map_or("-".into(), |c| format!("{}/{}/{}", c.detected, c.bypassed, c.failed));
                let _ = write!(s, " {cell:>16}");
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "* probabilistic: succeeds only on a lucky guess");
        s
    }
}

/// Every scenario under every mode for every seed, plus one unattacked run
/// per mode and seed. Reports are ordered scenario, mode, seed.
pub fn run_matrix(
    image: Arc<ProgramImage>,
    scenarios: &[AttackScenario],
    modes: &[ProtectionMode],
    seeds: &[u64],
    config: VmConfig,
    exec: Execution,
) -> Result<DetectionMatrix, AttackError> {
    for s in scenarios {
        resolve(s, &image)?;
    }
    let seed0 = seeds.first().copied().unwrap_or(0);
    for &mode in modes {
        MachineState::new(image.clone(), mode, seed0, config).map_err(|source| AttackError::Setup { mode, source })?;
    }
    let per_scenario = modes.len() * seeds.len();
    let reports = map_indexed(exec, scenarios.len() * per_scenario, |i| {
        let scenario = &scenarios[i / per_scenario];
        let mode = modes[(i % per_scenario) / seeds.len()];
        let seed = seeds[i % seeds.len()];
        let failed = |reason: String| AttackReport {
            scenario: scenario.name.clone(),
            mode,
            seed,
            probabilistic: scenario.probabilistic,
            verdict: Verdict::Failed { reason },
            stages_fired: 0,
            cycles: 0,
            notes: Vec::new(),
        };
        match MachineState::new(image.clone(), mode, seed, config) {
            Ok(mut vm) => attach_and_run(&mut vm, scenario, ATTACK_MAX_CYCLES).unwrap_or_else(|e| failed(e.to_string())),
            Err(e) => failed(format!("setup: {e}")),
        }
    });
    let benign = map_indexed(exec, modes.len() * seeds.len(), |i| {
        let (mode, seed) = (modes[i / seeds.len()], seeds[i % seeds.len()]);
        MachineState::new(image.clone(), mode, seed, config)
            .and_then(|mut vm| vm.run(ATTACK_MAX_CYCLES))
            .map(|r| r.fault.is_some())
            .unwrap_or(true)
    });

    let mut cells = Vec::new();
    for (si, s) in scenarios.iter().enumerate() {
        for (mi, &mode) in modes.iter().enumerate() {
            let start = si * per_scenario + mi * seeds.len();
            let runs = &reports[start..start + seeds.len()];
            let count = |l: &str| runs.iter().filter(|r| r.verdict.label() == l).count();
            cells.push(ScenarioCell {
                scenario: s.name.clone(),
                mode,
                probabilistic: s.probabilistic,
                runs: runs.len(),
                detected: count("detected"),
                bypassed: count("bypassed"),
                failed: count("failed"),
            });
        }
    }
    let summary = modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let mine: Vec<&ScenarioCell> = cells.iter().filter(|c| c.mode == mode).collect();
            let b = &benign[mi * seeds.len()..(mi + 1) * seeds.len()];
            ModeSummary {
                mode,
                scenarios: mine.len(),
                secured: mine.iter().filter(|c| c.runs > 0 && c.detected == c.runs).count(),
                bypassed: mine.iter().filter(|c| c.bypassed > 0).count(),
                benign_faults: b.iter().filter(|f| **f).count(),
                benign_runs: b.len(),
            }
        })
        .collect();
    let shadow_modes: Vec<ProtectionMode> = modes.iter().copied().filter(|m| m.is_shadow()).collect();
    let shadow_stacks = (!shadow_modes.is_empty()).then(|| {
        let of = |s: &AttackScenario| cells.iter().filter(|c| c.scenario == s.name && c.mode.is_shadow()).collect::<Vec<_>>();
        GroupSummary {
            scenarios: scenarios.len(),
            secured: scenarios.iter().filter(|s| of(s).iter().all(|c| c.runs > 0 && c.detected == c.runs)).count(),
            bypassed: scenarios.iter().filter(|s| of(s).iter().any(|c| c.bypassed > 0)).count(),
            modes: shadow_modes,
        }
    });
    Ok(DetectionMatrix { seeds: seeds.to_vec(), summary, shadow_stacks, cells, reports })
}

#[cfg(test)]
mod tests;
