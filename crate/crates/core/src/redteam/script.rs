//! Scenario file format.
//!
//! ```text
//! # comment
//! scenario NAME
//!   about FREE TEXT
//!   capabilities read write [key] [layout]
//!   goal SYMBOL | ADDRESS
//!   probabilistic
//!   at SYMBOL[#HIT] | at cycle N
//!     ACTION
//!     ...
//!   at ...
//! end
//! ```
//!
//! Actions:
//!
//! ```text
//! read ADDR LEN             dump LEN bytes into the report notes
//! read-word $VAR ADDR       load a word into a script variable
//! write-word ADDR VALUE
//! write-bytes ADDR B ...
//! write-reg REG VALUE       general registers only
//! guess-mac ADDR VALUE      write VALUE as a return word with a random MAC field
//! forge-chain DEPTH VALUE   point slot DEPTH at VALUE, recompute newer MAC fields (needs key)
//! locate-shadow $VAR        leak the compact shadow-stack pointer (needs layout)
//! ```
//!
//! `ADDR` and `VALUE` are `BASE[+|-OFFSET]` where `BASE` is a number,
//! `@symbol`, `$var`, `sp`, or `slotN`: the Nth stack word above `sp` that
//! holds a return address, newest first.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::ProgramImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerCapabilities {
    pub read_memory: bool,
    pub write_memory: bool,
    /// The attacker learned the key value. It still cannot write the key or top.
    pub knows_key: bool,
    /// The attacker knows where the shadow stack and its pointer live.
    pub knows_layout: bool,
}

impl Default for AttackerCapabilities {
    fn default() -> Self {
        Self { read_memory: true, write_memory: true, knows_key: false, knows_layout: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Symbol(String),
    Addr(u64),
}

impl Target {
    pub fn resolve(&self, image: &ProgramImage) -> Result<u64, ScenarioError> {
        match self {
            Target::Addr(a) => Ok(*a),
            Target::Symbol(s) => image.symbol(s).ok_or_else(|| ScenarioError::UnknownSymbol(s.clone())),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Symbol(s) => f.write_str(s),
            Target::Addr(a) => write!(f, "{a:#x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trigger {
    /// Before the `hit`-th execution (1-based) of the instruction at `at`.
    Breakpoint { at: Target, hit: u32 },
    /// Before the first instruction issued at or after this cycle.
    Cycle(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Base {
    Abs(u64),
    Symbol(String),
    Var(String),
    Sp,
    Slot(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expr {
    pub base: Base,
    pub offset: i64,
}

impl Expr {
    pub fn uses_slots(&self) -> bool {
        matches!(self.base, Base::Slot(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Read { addr: Expr, len: u64 },
    ReadWord { var: String, addr: Expr },
    WriteWord { addr: Expr, value: Expr },
    WriteBytes { addr: Expr, bytes: Vec<u8> },
    WriteReg { reg: String, value: Expr },
    GuessMac { addr: Expr, value: Expr },
    ForgeChain { depth: usize, value: Expr },
    LocateShadow { var: String },
}

impl Action {
    fn exprs(&self) -> Vec<&Expr> {
        match self {
            Action::Read { addr, .. } | Action::ReadWord { addr, .. } | Action::WriteBytes { addr, .. } => vec![addr],
            Action::WriteWord { addr, value } | Action::GuessMac { addr, value } => vec![addr, value],
            Action::WriteReg { value, .. } | Action::ForgeChain { value, .. } => vec![value],
            Action::LocateShadow { .. } => vec![],
        }
    }

    fn writes(&self) -> bool {
        matches!(
            self,
            Action::WriteWord { .. }
                | Action::WriteBytes { .. }
                | Action::WriteReg { .. }
                | Action::GuessMac { .. }
                | Action::ForgeChain { .. }
        )
    }

    fn reads(&self) -> bool {
        matches!(self, Action::Read { .. } | Action::ReadWord { .. } | Action::ForgeChain { .. } | Action::LocateShadow { .. })
            || self.exprs().iter().any(|e| e.uses_slots())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub trigger: Trigger,
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub name: String,
    pub description: String,
    pub capabilities: AttackerCapabilities,
    pub goal: Target,
    /// Success depends on a guess rather than on the defense's design.
    pub probabilistic: bool,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("scenario {scenario}: `{action}` needs the {capability} capability")]
    MissingCapability { scenario: String, action: String, capability: &'static str },
    #[error("scenario {scenario}: the {register} register is out of the attacker's reach")]
    DedicatedRegister { scenario: String, register: String },
    #[error("scenario {scenario}: unknown register `{register}`")]
    UnknownRegister { scenario: String, register: String },
    #[error("scenario {0}: no stages")]
    NoStages(String),
    #[error("scenario {scenario}: variable ${var} used before it is set")]
    UnboundVariable { scenario: String, var: String },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
}

fn action_name(a: &Action) -> &'static str {
    match a {
        Action::Read { .. } => "read",
        Action::ReadWord { .. } => "read-word",
        Action::WriteWord { .. } => "write-word",
        Action::WriteBytes { .. } => "write-bytes",
        Action::WriteReg { .. } => "write-reg",
        Action::GuessMac { .. } => "guess-mac",
        Action::ForgeChain { .. } => "forge-chain",
        Action::LocateShadow { .. } => "locate-shadow",
    }
}

impl AttackScenario {
    /// Checks every action against the granted capabilities. Nothing that
    /// names `top` or `key` as a destination survives this.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.stages.is_empty() {
            return Err(ScenarioError::NoStages(self.name.clone()));
        }
        let caps = self.capabilities;
        let missing = |a: &Action, capability| ScenarioError::MissingCapability {
            scenario: self.name.clone(),
            action: action_name(a).to_string(),
            capability,
        };
        let mut bound: Vec<&str> = Vec::new();
        for a in self.stages.iter().flat_map(|s| &s.actions) {
            if let Action::WriteReg { reg, .. } = a {
                if matches!(reg.as_str(), "top" | "key") {
                    return Err(ScenarioError::DedicatedRegister { scenario: self.name.clone(), register: reg.clone() });
                }
                if crate::isa::Reg::parse(reg).is_none() {
                    return Err(ScenarioError::UnknownRegister { scenario: self.name.clone(), register: reg.clone() });
                }
            }
            if a.reads() && !caps.read_memory {
                return Err(missing(a, "read"));
            }
            if a.writes() && !caps.write_memory {
                return Err(missing(a, "write"));
            }
            if matches!(a, Action::ForgeChain { .. }) && !caps.knows_key {
                return Err(missing(a, "key"));
            }
            if matches!(a, Action::LocateShadow { .. }) && !caps.knows_layout {
                return Err(missing(a, "layout"));
            }
            for e in a.exprs() {
                if let Base::Var(v) = &e.base {
                    if !bound.contains(&v.as_str()) {
                        return Err(ScenarioError::UnboundVariable { scenario: self.name.clone(), var: v.clone() });
                    }
                }
            }
            if let Action::ReadWord { var, .. } | Action::LocateShadow { var } = a {
                bound.push(var);
            }
        }
        Ok(())
    }

    /// Symbols the scenario needs from the image.
    pub fn symbols(&self) -> Vec<&str> {
        let mut out = Vec::new();
        if let Target::Symbol(s) = &self.goal {
            out.push(s.as_str());
        }
        for st in &self.stages {
            if let Trigger::Breakpoint { at: Target::Symbol(s), .. } = &st.trigger {
                out.push(s);
            }
            for a in &st.actions {
                for e in a.exprs() {
                    if let Base::Symbol(s) = &e.base {
                        out.push(s);
                    }
                }
            }
        }
        out
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Syntax { line, msg: msg.into() }
}

fn parse_num(s: &str) -> Option<u64> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

fn parse_var(line: usize, s: &str) -> Result<String, ScenarioError> {
    match s.strip_prefix('$') {
        Some(v) if !v.is_empty() && v.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => Ok(v.to_string()),
        _ => Err(syntax(line, format!("expected $variable, found `{s}`"))),
    }
}

pub fn parse_expr(line: usize, s: &str) -> Result<Expr, ScenarioError> {
    let split = s.char_indices().skip(1).find(|(_, c)| *c == '+' || *c == '-').map(|(i, _)| i);
    let (base_s, offset) = match split {
        Some(i) => {
            let mag = parse_num(&s[i + 1..]).ok_or_else(|| syntax(line, format!("bad offset in `{s}`")))?;
            let mag = i64::try_from(mag).map_err(|_| syntax(line, format!("offset too large in `{s}`")))?;
            (&s[..i], if &s[i..=i] == "-" { -mag } else { mag })
        }
        None => (s, 0),
    };
    let base = if let Some(sym) = base_s.strip_prefix('@') {
        if sym.is_empty() {
            return Err(syntax(line, "empty symbol"));
        }
        Base::Symbol(sym.to_string())
    } else if base_s.starts_with('$') {
        Base::Var(parse_var(line, base_s)?)
    } else if base_s == "sp" {
        Base::Sp
    } else if let Some(n) = base_s.strip_prefix("slot") {
        Base::Slot(n.parse().map_err(|_| syntax(line, format!("bad slot `{base_s}`")))?)
    } else {
        Base::Abs(parse_num(base_s).ok_or_else(|| syntax(line, format!("bad expression `{s}`")))?)
    };
    Ok(Expr { base, offset })
}

fn parse_target(line: usize, s: &str) -> Result<Target, ScenarioError> {
    if s.is_empty() {
        return Err(syntax(line, "missing target"));
    }
    Ok(match parse_num(s) {
        Some(a) => Target::Addr(a),
        None => Target::Symbol(s.to_string()),
    })
}

fn parse_trigger(line: usize, args: &[&str]) -> Result<Trigger, ScenarioError> {
    match args {
        ["cycle", n] => Ok(Trigger::Cycle(parse_num(n).ok_or_else(|| syntax(line, "bad cycle number"))?)),
        [spec] => {
            let (at, hit) = match spec.split_once('#') {
                Some((a, h)) => (a, h.parse::<u32>().map_err(|_| syntax(line, "bad hit count"))?),
                None => (*spec, 1),
            };
            if hit == 0 {
                return Err(syntax(line, "hit counts start at 1"));
            }
            Ok(Trigger::Breakpoint { at: parse_target(line, at)?, hit })
        }
        _ => Err(syntax(line, "expected `at SYMBOL[#HIT]` or `at cycle N`")),
    }
}

fn parse_action(line: usize, op: &str, args: &[&str]) -> Result<Action, ScenarioError> {
    let want = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(syntax(line, format!("`{op}` takes {n} operands, found {}", args.len())))
        }
    };
    let e = |s: &str| parse_expr(line, s);
    Ok(match op {
        "read" => {
            want(2)?;
            Action::Read { addr: e(args[0])?, len: parse_num(args[1]).ok_or_else(|| syntax(line, "bad length"))? }
        }
        "read-word" => {
            want(2)?;
            Action::ReadWord { var: parse_var(line, args[0])?, addr: e(args[1])? }
        }
        "write-word" => {
            want(2)?;
            Action::WriteWord { addr: e(args[0])?, value: e(args[1])? }
        }
        "write-bytes" => {
            if args.len() < 2 {
                return Err(syntax(line, "`write-bytes` needs an address and at least one byte"));
            }
            let bytes = args[1..]
                .iter()
                .map(|b| parse_num(b).and_then(|v| u8::try_from(v).ok()).ok_or_else(|| syntax(line, format!("bad byte `{b}`"))))
                .collect::<Result<_, _>>()?;
            Action::WriteBytes { addr: e(args[0])?, bytes }
        }
        "write-reg" => {
            want(2)?;
            Action::WriteReg { reg: args[0].to_string(), value: e(args[1])? }
        }
        "guess-mac" => {
            want(2)?;
            Action::GuessMac { addr: e(args[0])?, value: e(args[1])? }
        }
        "forge-chain" => {
            want(2)?;
            let depth = args[0].parse().map_err(|_| syntax(line, "bad depth"))?;
            Action::ForgeChain { depth, value: e(args[1])? }
        }
        "locate-shadow" => {
            want(1)?;
            Action::LocateShadow { var: parse_var(line, args[0])? }
        }
        other => return Err(syntax(line, format!("unknown action `{other}`"))),
    })
}

struct Draft {
    name: String,
    line: usize,
    description: String,
    capabilities: Option<AttackerCapabilities>,
    goal: Option<Target>,
    probabilistic: bool,
    stages: Vec<Stage>,
}

impl Draft {
    fn finish(self) -> Result<AttackScenario, ScenarioError> {
        let s = AttackScenario {
            goal: self.goal.ok_or_else(|| syntax(self.line, format!("scenario {} has no goal", self.name)))?,
            name: self.name,
            description: self.description,
            capabilities: self.capabilities.unwrap_or_default(),
            probabilistic: self.probabilistic,
            stages: self.stages,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Parses and validates every scenario in `text`.
pub fn parse_scenarios(text: &str) -> Result<Vec<AttackScenario>, ScenarioError> {
    let mut out: Vec<AttackScenario> = Vec::new();
    let mut cur: Option<Draft> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        // `#` also separates a breakpoint hit count, so a comment starts
        // the line or follows whitespace.
        let content = if raw.trim_start().starts_with('#') {
            ""
        } else {
            raw.find(" #").or_else(|| raw.find("\t#")).map_or(raw, |i| &raw[..i])
        };
        let words: Vec<&str> = content.split_whitespace().map(|w| w.trim_end_matches(',')).collect();
        let Some((&kw, args)) = words.split_first() else { continue };
        match (kw, cur.as_mut()) {
            ("scenario", None) => {
                let [name] = args else { return Err(syntax(line, "expected `scenario NAME`")) };
                if out.iter().any(|s| s.name == *name) {
                    return Err(syntax(line, format!("duplicate scenario `{name}`")));
                }
                cur = Some(Draft {
                    name: name.to_string(),
                    line,
                    description: String::new(),
                    capabilities: None,
                    goal: None,
                    probabilistic: false,
                    stages: Vec::new(),
                });
            }
            ("scenario", Some(_)) => return Err(syntax(line, "`scenario` inside a scenario (missing `end`?)")),
            ("end", Some(_)) => out.push(cur.take().unwrap().finish()?),
            (_, None) => return Err(syntax(line, format!("`{kw}` outside a scenario"))),
            ("about", Some(d)) => d.description = args.join(" "),
            ("capabilities", Some(d)) => {
                let mut c = AttackerCapabilities { read_memory: false, write_memory: false, knows_key: false, knows_layout: false };
                for a in args {
                    match *a {
                        "read" => c.read_memory = true,
                        "write" => c.write_memory = true,
                        "key" => c.knows_key = true,
                        "layout" => c.knows_layout = true,
                        other => return Err(syntax(line, format!("unknown capability `{other}`"))),
                    }
                }
                d.capabilities = Some(c);
            }
            ("goal", Some(d)) => {
                let [g] = args else { return Err(syntax(line, "expected `goal TARGET`")) };
                d.goal = Some(parse_target(line, g)?);
            }
            ("probabilistic", Some(d)) => d.probabilistic = true,
            ("at", Some(d)) => d.stages.push(Stage { trigger: parse_trigger(line, args)?, actions: Vec::new() }),
            (op, Some(d)) => {
                let action = parse_action(line, op, args)?;
                match d.stages.last_mut() {
                    Some(st) => st.actions.push(action),
                    None => return Err(syntax(line, format!("`{op}` before any `at` trigger"))),
                }
            }
        }
    }
    if let Some(d) = cur {
        return Err(syntax(d.line, format!("scenario {} is missing `end`", d.name)));
    }
    Ok(out)
}
