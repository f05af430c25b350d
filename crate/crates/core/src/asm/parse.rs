use std::collections::BTreeMap;
use thiserror::Error;

use super::{data_base_for, FunctionInfo, ProgramImage, Section, Symbol, CODE_BASE};
use crate::isa::{AluOp, BranchCond, Instruction, Opcode, Reg, Width, INSTR_BYTES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmErrorKind {
    #[error("undefined symbol `{0}`")]
    UndefinedSymbol(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("malformed operand `{0}`")]
    MalformedOperand(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("`{mnemonic}` takes {expected} operand(s), found {found}")]
    OperandCount { mnemonic: String, expected: usize, found: usize },
    #[error("immediate {0} out of range")]
    ImmediateRange(i64),
    #[error("target {0:#x} is not an instruction address")]
    BadTarget(u64),
    #[error("branch target too far away")]
    BranchRange,
    #[error("no entry symbol (`.entry`, `_start` or `main`)")]
    NoEntry,
    #[error("entry symbol `{0}` is not in the text section")]
    EntryNotCode(String),
    #[error("function started inside another function")]
    NestedFunction,
    #[error("function `{0}` is never closed")]
    UnterminatedFunction(String),
    #[error("end of function without a matching start")]
    UnmatchedEnd,
    #[error("{0} is not allowed in this section")]
    WrongSection(&'static str),
    #[error("locals must be a non-negative multiple of 8, got `{0}`")]
    BadLocals(String),
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

#[derive(Debug, Clone)]
enum Target {
    Sym(String),
    Addr(u64),
}

/// An instruction whose symbolic operands are resolved after layout.
#[derive(Debug, Clone)]
enum Pending {
    Ready(Instruction),
    Jump(Target),
    Call(Target),
    Branch { cond: BranchCond, rs1: Reg, rs2: Reg, target: Target },
    LuiSym { rd: Reg, sym: String },
    OriSym { rd: Reg, sym: String },
}

#[derive(Debug)]
enum Stmt {
    Label(String),
    Section(Section),
    Entry(String),
    FuncStart { name: String, locals: u64 },
    FuncEnd,
    ProcStart { name: String, leaf: bool, frame: u64 },
    ProcEnd,
    Word(Vec<String>),
    Byte(Vec<String>),
    Zero(String),
    Instr { mnemonic: String, ops: Vec<String> },
}

fn strip_comment(line: &str) -> &str {
    let cut = line.find([';', '#']).unwrap_or(line.len());
    &line[..cut]
}

fn split_operands(rest: &str) -> Vec<String> {
    let rest = rest.trim();
    if rest.is_empty() {
        return Vec::new();
    }
    rest.split(',').map(|s| s.trim().to_string()).collect()
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

pub(crate) fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let mag = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else if !body.is_empty() && body.chars().all(|c| c.is_ascii_digit() || c == '_') {
        body.replace('_', "").parse::<u64>().ok()?
    } else {
        return None;
    };
    if neg {
        if mag > i64::MAX as u64 + 1 {
            return None;
        }
        Some((mag as i64).wrapping_neg())
    } else {
        Some(mag as i64)
    }
}

fn tokenize(source: &str) -> Result<Vec<(usize, Stmt)>, AsmError> {
    let mut out = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut text = strip_comment(raw).trim();
        // leading labels
        while let Some(colon) = text.find(':') {
            let name = text[..colon].trim();
            if !is_ident(name) {
                break;
            }
            out.push((line, Stmt::Label(name.to_string())));
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim()),
            None => (text, ""),
        };
        let head_lc = head.to_ascii_lowercase();
        let stmt = if head_lc.starts_with('.') {
            let words: Vec<&str> = rest.split_whitespace().collect();
            match head_lc.as_str() {
                ".text" => Stmt::Section(Section::Text),
                ".data" => Stmt::Section(Section::Data),
                ".entry" => Stmt::Entry(single_ident(line, rest)?),
                ".func" => {
                    let name = words.first().copied().unwrap_or("");
                    if !is_ident(name) || words.len() > 2 {
                        return Err(err(line, AsmErrorKind::MalformedOperand(rest.to_string())));
                    }
                    let locals = match words.get(1) {
                        None => 0,
                        Some(w) => match parse_int(w) {
                            Some(v) if v >= 0 && v % 8 == 0 => v as u64,
                            _ => return Err(err(line, AsmErrorKind::BadLocals(w.to_string()))),
                        },
                    };
                    Stmt::FuncStart { name: name.to_string(), locals }
                }
                ".endfunc" => Stmt::FuncEnd,
                ".proc" => {
                    let bad = || err(line, AsmErrorKind::MalformedOperand(rest.to_string()));
                    if words.len() != 3 || !is_ident(words[0]) {
                        return Err(bad());
                    }
                    let leaf = match words[1] {
                        "leaf" => true,
                        "nonleaf" => false,
                        _ => return Err(bad()),
                    };
                    let frame = parse_int(words[2]).filter(|v| *v >= 0).ok_or_else(bad)? as u64;
                    Stmt::ProcStart { name: words[0].to_string(), leaf, frame }
                }
                ".endproc" => Stmt::ProcEnd,
                ".word" => Stmt::Word(split_operands(rest)),
                ".byte" => Stmt::Byte(split_operands(rest)),
                ".zero" => Stmt::Zero(rest.to_string()),
                _ => return Err(err(line, AsmErrorKind::UnknownDirective(head.to_string()))),
            }
        } else {
            Stmt::Instr { mnemonic: head_lc, ops: split_operands(rest) }
        };
        out.push((line, stmt));
    }
    Ok(out)
}

fn single_ident(line: usize, rest: &str) -> Result<String, AsmError> {
    if is_ident(rest) {
        Ok(rest.to_string())
    } else {
        Err(err(line, AsmErrorKind::MalformedOperand(rest.to_string())))
    }
}

fn reg(line: usize, s: &str) -> Result<Reg, AsmError> {
    Reg::parse(&s.to_ascii_lowercase())
        .ok_or_else(|| err(line, AsmErrorKind::MalformedOperand(s.to_string())))
}

fn imm_i16(line: usize, s: &str) -> Result<i16, AsmError> {
    let v = parse_int(s).ok_or_else(|| err(line, AsmErrorKind::MalformedOperand(s.to_string())))?;
    i16::try_from(v).map_err(|_| err(line, AsmErrorKind::ImmediateRange(v)))
}

fn imm_u16(line: usize, s: &str) -> Result<u16, AsmError> {
    let v = parse_int(s).ok_or_else(|| err(line, AsmErrorKind::MalformedOperand(s.to_string())))?;
    u16::try_from(v).map_err(|_| err(line, AsmErrorKind::ImmediateRange(v)))
}

/// `off(base)` or `(base)`.
fn mem_operand(line: usize, s: &str) -> Result<(i16, Reg), AsmError> {
    let malformed = || err(line, AsmErrorKind::MalformedOperand(s.to_string()));
    let open = s.find('(').ok_or_else(malformed)?;
    let inner = s[open + 1..].strip_suffix(')').ok_or_else(malformed)?;
    let off_text = s[..open].trim();
    let offset = if off_text.is_empty() { 0 } else { imm_i16(line, off_text)? };
    Ok((offset, reg(line, inner.trim())?))
}

fn target(line: usize, s: &str) -> Result<Target, AsmError> {
    if let Some(v) = parse_int(s) {
        return u64::try_from(v)
            .map(Target::Addr)
            .map_err(|_| err(line, AsmErrorKind::BadTarget(v as u64)));
    }
    if is_ident(s) {
        Ok(Target::Sym(s.to_string()))
    } else {
        Err(err(line, AsmErrorKind::MalformedOperand(s.to_string())))
    }
}

fn expect_ops(line: usize, mnemonic: &str, ops: &[String], n: usize) -> Result<(), AsmError> {
    if ops.len() == n {
        Ok(())
    } else {
        Err(err(
            line,
            AsmErrorKind::OperandCount { mnemonic: mnemonic.to_string(), expected: n, found: ops.len() },
        ))
    }
}

/// Parses one source instruction (possibly a pseudo) into machine instructions.
fn lower(line: usize, mnemonic: &str, ops: &[String]) -> Result<Vec<Pending>, AsmError> {
    use Pending::Ready;
    match mnemonic {
        "li" => {
            expect_ops(line, mnemonic, ops, 2)?;
            let rd = reg(line, &ops[0])?;
            let v = parse_int(&ops[1])
                .ok_or_else(|| err(line, AsmErrorKind::MalformedOperand(ops[1].clone())))?;
            if let Ok(imm) = i16::try_from(v) {
                Ok(vec![Ready(Instruction::AddI { rd, rs1: Reg::ZERO, imm })])
            } else if (0..=u32::MAX as i64).contains(&v) {
                Ok(vec![
                    Ready(Instruction::Lui { rd, imm: (v >> 16) as u16 }),
                    Ready(Instruction::OrI { rd, rs1: rd, imm: v as u16 }),
                ])
            } else {
                Err(err(line, AsmErrorKind::ImmediateRange(v)))
            }
        }
        "la" => {
            expect_ops(line, mnemonic, ops, 2)?;
            let rd = reg(line, &ops[0])?;
            let sym = single_ident(line, &ops[1])?;
            Ok(vec![Pending::LuiSym { rd, sym: sym.clone() }, Pending::OriSym { rd, sym }])
        }
        "mov" => {
            expect_ops(line, mnemonic, ops, 2)?;
            Ok(vec![Ready(Instruction::AddI { rd: reg(line, &ops[0])?, rs1: reg(line, &ops[1])?, imm: 0 })])
        }
        "j" => lower(line, "jmp", ops),
        _ => {
            let opcode = Opcode::from_mnemonic(mnemonic)
                .ok_or_else(|| err(line, AsmErrorKind::UnknownMnemonic(mnemonic.to_string())))?;
            lower_native(line, opcode, ops).map(|p| vec![p])
        }
    }
}

fn lower_native(line: usize, opcode: Opcode, ops: &[String]) -> Result<Pending, AsmError> {
    use Pending::Ready;
    let m = opcode.mnemonic();
    let alu = |op: AluOp| -> Result<Pending, AsmError> {
        expect_ops(line, m, ops, 3)?;
        Ok(Ready(Instruction::Alu { op, rd: reg(line, &ops[0])?, rs1: reg(line, &ops[1])?, rs2: reg(line, &ops[2])? }))
    };
    let branch = |cond: BranchCond| -> Result<Pending, AsmError> {
        expect_ops(line, m, ops, 3)?;
        Ok(Pending::Branch { cond, rs1: reg(line, &ops[0])?, rs2: reg(line, &ops[1])?, target: target(line, &ops[2])? })
    };
    let load = |width: Width| -> Result<Pending, AsmError> {
        expect_ops(line, m, ops, 2)?;
        let (offset, base) = mem_operand(line, &ops[1])?;
        Ok(Ready(Instruction::Load { width, rd: reg(line, &ops[0])?, base, offset }))
    };
    let store = |width: Width| -> Result<Pending, AsmError> {
        expect_ops(line, m, ops, 2)?;
        let (offset, base) = mem_operand(line, &ops[1])?;
        Ok(Ready(Instruction::Store { width, src: reg(line, &ops[0])?, base, offset }))
    };
    let bare = |i: Instruction| -> Result<Pending, AsmError> {
        expect_ops(line, m, ops, 0)?;
        Ok(Ready(i))
    };
    match opcode {
        Opcode::Halt => bare(Instruction::Halt),
        Opcode::Nop => bare(Instruction::Nop),
        Opcode::Ret => bare(Instruction::Ret),
        Opcode::Zip => bare(Instruction::Zip),
        Opcode::Unzip => bare(Instruction::Unzip),
        Opcode::Out => {
            expect_ops(line, m, ops, 1)?;
            Ok(Ready(Instruction::Out { rs: reg(line, &ops[0])? }))
        }
        Opcode::Add => alu(AluOp::Add),
        Opcode::Sub => alu(AluOp::Sub),
        Opcode::Mul => alu(AluOp::Mul),
        Opcode::And => alu(AluOp::And),
        Opcode::Or => alu(AluOp::Or),
        Opcode::Xor => alu(AluOp::Xor),
        Opcode::Shl => alu(AluOp::Shl),
        Opcode::Shr => alu(AluOp::Shr),
        Opcode::Slt => alu(AluOp::Slt),
        Opcode::Sltu => alu(AluOp::Sltu),
        Opcode::AddI => {
            expect_ops(line, m, ops, 3)?;
            Ok(Ready(Instruction::AddI { rd: reg(line, &ops[0])?, rs1: reg(line, &ops[1])?, imm: imm_i16(line, &ops[2])? }))
        }
        Opcode::OrI => {
            expect_ops(line, m, ops, 3)?;
            Ok(Ready(Instruction::OrI { rd: reg(line, &ops[0])?, rs1: reg(line, &ops[1])?, imm: imm_u16(line, &ops[2])? }))
        }
        Opcode::Lui => {
            expect_ops(line, m, ops, 2)?;
            Ok(Ready(Instruction::Lui { rd: reg(line, &ops[0])?, imm: imm_u16(line, &ops[1])? }))
        }
        Opcode::Ld => load(Width::Word),
        Opcode::Lbu => load(Width::Byte),
        Opcode::Sd => store(Width::Word),
        Opcode::Sb => store(Width::Byte),
        Opcode::Beq => branch(BranchCond::Eq),
        Opcode::Bne => branch(BranchCond::Ne),
        Opcode::Blt => branch(BranchCond::Lt),
        Opcode::Bge => branch(BranchCond::Ge),
        Opcode::Jmp => {
            expect_ops(line, m, ops, 1)?;
            Ok(Pending::Jump(target(line, &ops[0])?))
        }
        Opcode::Call => {
            expect_ops(line, m, ops, 1)?;
            Ok(Pending::Call(target(line, &ops[0])?))
        }
        Opcode::SetJmp => {
            expect_ops(line, m, ops, 1)?;
            Ok(Ready(Instruction::SetJmp { buf: reg(line, &ops[0])? }))
        }
        Opcode::LongJmp => {
            expect_ops(line, m, ops, 2)?;
            Ok(Ready(Instruction::LongJmp { buf: reg(line, &ops[0])?, val: reg(line, &ops[1])? }))
        }
    }
}

/// Open function while walking the statements.
struct OpenFunc {
    name: String,
    line: usize,
    start: usize,
    leaf: bool,
    frame: u64,
    /// Macro-expanded (`.func`) rather than raw (`.proc`).
    instrumented: bool,
}

fn prologue(f: &OpenFunc) -> Vec<Instruction> {
    if !f.instrumented {
        return Vec::new();
    }
    let frame = f.frame as i16;
    if !f.leaf {
        vec![
            Instruction::Zip,
            Instruction::AddI { rd: Reg::SP, rs1: Reg::SP, imm: -frame },
            Instruction::Store { width: Width::Word, src: Reg::RA, base: Reg::SP, offset: frame - 8 },
        ]
    } else if frame > 0 {
        vec![Instruction::AddI { rd: Reg::SP, rs1: Reg::SP, imm: -frame }]
    } else {
        Vec::new()
    }
}

fn epilogue(f: &OpenFunc) -> Vec<Instruction> {
    let frame = f.frame as i16;
    let mut out = Vec::new();
    if f.instrumented && !f.leaf {
        out.push(Instruction::Load { width: Width::Word, rd: Reg::RA, base: Reg::SP, offset: frame - 8 });
        out.push(Instruction::Unzip);
    }
    if f.instrumented && frame > 0 {
        out.push(Instruction::AddI { rd: Reg::SP, rs1: Reg::SP, imm: frame });
    }
    out.push(Instruction::Ret);
    out
}

/// Assembles source text into a [`ProgramImage`].
pub fn assemble(source: &str) -> Result<ProgramImage, AsmError> {
    let stmts = tokenize(source)?;

    let mut section = Section::Text;
    let mut code: Vec<(usize, Pending)> = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut data_fixups: Vec<(usize, usize, String)> = Vec::new();
    // text labels hold instruction indices until the data base is known
    let mut text_labels: Vec<(usize, String, usize)> = Vec::new();
    let mut data_labels: Vec<(usize, String, usize)> = Vec::new();
    let mut entry: Option<(usize, String)> = None;
    let mut open: Option<OpenFunc> = None;
    let mut functions: Vec<(OpenFunc, usize)> = Vec::new();

    for (i, (line, stmt)) in stmts.iter().enumerate() {
        let line = *line;
        match stmt {
            Stmt::Label(name) => match section {
                Section::Text => text_labels.push((line, name.clone(), code.len())),
                Section::Data => data_labels.push((line, name.clone(), data.len())),
            },
            Stmt::Section(s) => section = *s,
            Stmt::Entry(name) => entry = Some((line, name.clone())),
            Stmt::FuncStart { name, locals } | Stmt::ProcStart { name, frame: locals, .. } => {
                if section != Section::Text {
                    return Err(err(line, AsmErrorKind::WrongSection("a function")));
                }
                if open.is_some() {
                    return Err(err(line, AsmErrorKind::NestedFunction));
                }
                let f = match stmt {
                    Stmt::FuncStart { .. } => {
                        let leaf = !stmts[i + 1..]
                            .iter()
                            .take_while(|(_, s)| !matches!(s, Stmt::FuncEnd | Stmt::ProcEnd))
                            .any(|(_, s)| matches!(s, Stmt::Instr { mnemonic, .. } if mnemonic == "call"));
                        let frame = if leaf { *locals } else { *locals + 8 };
                        if frame > i16::MAX as u64 {
                            return Err(err(line, AsmErrorKind::BadLocals(locals.to_string())));
                        }
                        OpenFunc { name: name.clone(), line, start: code.len(), leaf, frame, instrumented: true }
                    }
                    Stmt::ProcStart { leaf, frame, .. } => OpenFunc {
                        name: name.clone(),
                        line,
                        start: code.len(),
                        leaf: *leaf,
                        frame: *frame,
                        instrumented: false,
                    },
                    _ => unreachable!(),
                };
                text_labels.push((line, name.clone(), code.len()));
                code.extend(prologue(&f).into_iter().map(|ins| (line, Pending::Ready(ins))));
                open = Some(f);
            }
            Stmt::FuncEnd | Stmt::ProcEnd => {
                let f = open.take().ok_or_else(|| err(line, AsmErrorKind::UnmatchedEnd))?;
                if matches!(stmt, Stmt::FuncEnd) != f.instrumented {
                    return Err(err(line, AsmErrorKind::UnmatchedEnd));
                }
                functions.push((f, code.len()));
            }
            Stmt::Word(items) => {
                if section != Section::Data {
                    return Err(err(line, AsmErrorKind::WrongSection(".word")));
                }
                for item in items {
                    let value = match parse_int(item) {
                        Some(v) => v as u64,
                        None if is_ident(item) => {
                            data_fixups.push((line, data.len(), item.clone()));
                            0
                        }
                        None => return Err(err(line, AsmErrorKind::MalformedOperand(item.clone()))),
                    };
                    data.extend_from_slice(&value.to_le_bytes());
                }
            }
            Stmt::Byte(items) => {
                if section != Section::Data {
                    return Err(err(line, AsmErrorKind::WrongSection(".byte")));
                }
                for item in items {
                    let v = parse_int(item)
                        .ok_or_else(|| err(line, AsmErrorKind::MalformedOperand(item.clone())))?;
                    if !(-128..=255).contains(&v) {
                        return Err(err(line, AsmErrorKind::ImmediateRange(v)));
                    }
                    data.push(v as u8);
                }
            }
            Stmt::Zero(n) => {
                if section != Section::Data {
                    return Err(err(line, AsmErrorKind::WrongSection(".zero")));
                }
                let v = parse_int(n)
                    .filter(|v| (0..=1 << 24).contains(v))
                    .ok_or_else(|| err(line, AsmErrorKind::MalformedOperand(n.clone())))?;
                data.resize(data.len() + v as usize, 0);
            }
            Stmt::Instr { mnemonic, ops } => {
                if section != Section::Text {
                    return Err(err(line, AsmErrorKind::WrongSection("an instruction")));
                }
                match &open {
                    Some(f) if f.instrumented && mnemonic == "ret" => {
                        expect_ops(line, mnemonic, ops, 0)?;
                        code.extend(epilogue(f).into_iter().map(|ins| (line, Pending::Ready(ins))));
                    }
                    _ => code.extend(lower(line, mnemonic, ops)?.into_iter().map(|p| (line, p))),
                }
            }
        }
    }
    if let Some(f) = open {
        return Err(err(f.line, AsmErrorKind::UnterminatedFunction(f.name)));
    }

    let data_base = data_base_for(code.len());
    let mut symbols: BTreeMap<String, Symbol> = BTreeMap::new();
    let text = text_labels
        .into_iter()
        .map(|(l, n, idx)| (l, n, CODE_BASE + idx as u64 * INSTR_BYTES, Section::Text));
    let datas = data_labels
        .into_iter()
        .map(|(l, n, off)| (l, n, data_base + off as u64, Section::Data));
    for (line, name, addr, section) in text.chain(datas) {
        if symbols.insert(name.clone(), Symbol { addr, section }).is_some() {
            return Err(err(line, AsmErrorKind::DuplicateLabel(name)));
        }
    }

    let lookup = |line: usize, name: &str| -> Result<u64, AsmError> {
        symbols
            .get(name)
            .map(|s| s.addr)
            .ok_or_else(|| err(line, AsmErrorKind::UndefinedSymbol(name.to_string())))
    };
    let code_end = CODE_BASE + code.len() as u64 * INSTR_BYTES;
    let code_target = |line: usize, t: &Target| -> Result<u64, AsmError> {
        let addr = match t {
            Target::Sym(s) => lookup(line, s)?,
            Target::Addr(a) => *a,
        };
        // a label at the very end of the text is a valid jump target only if code follows;
        // the VM rejects it at run time otherwise
        if addr < CODE_BASE || addr > code_end || addr % INSTR_BYTES != 0 {
            return Err(err(line, AsmErrorKind::BadTarget(addr)));
        }
        Ok(addr)
    };

    let mut resolved = Vec::with_capacity(code.len());
    for (idx, (line, p)) in code.into_iter().enumerate() {
        let pc = CODE_BASE + idx as u64 * INSTR_BYTES;
        let instr = match p {
            Pending::Ready(i) => i,
            Pending::Jump(t) => Instruction::Jump { target: code_target(line, &t)? as u32 },
            Pending::Call(t) => Instruction::Call { target: code_target(line, &t)? as u32 },
            Pending::Branch { cond, rs1, rs2, target } => {
                let dest = code_target(line, &target)?;
                let delta = (dest as i64 - pc as i64) / INSTR_BYTES as i64;
                let offset = i16::try_from(delta).map_err(|_| err(line, AsmErrorKind::BranchRange))?;
                Instruction::Branch { cond, rs1, rs2, offset }
            }
            Pending::LuiSym { rd, sym } => {
                let a = lookup(line, &sym)?;
                if a > u32::MAX as u64 {
                    return Err(err(line, AsmErrorKind::ImmediateRange(a as i64)));
                }
                Instruction::Lui { rd, imm: (a >> 16) as u16 }
            }
            Pending::OriSym { rd, sym } => Instruction::OrI { rd, rs1: rd, imm: lookup(line, &sym)? as u16 },
        };
        resolved.push(instr);
    }

    for (line, off, sym) in data_fixups {
        let v = lookup(line, &sym)?;
        data[off..off + 8].copy_from_slice(&v.to_le_bytes());
    }

    let (entry_line, entry_name) = match entry {
        Some(e) => e,
        None => ["_start", "main"]
            .iter()
            .find(|n| symbols.contains_key(**n))
            .map(|n| (0, n.to_string()))
            .ok_or_else(|| err(0, AsmErrorKind::NoEntry))?,
    };
    let entry_sym = symbols
        .get(&entry_name)
        .ok_or_else(|| err(entry_line, AsmErrorKind::UndefinedSymbol(entry_name.clone())))?;
    if entry_sym.section != Section::Text || entry_sym.addr >= code_end {
        return Err(err(entry_line, AsmErrorKind::EntryNotCode(entry_name)));
    }
    let entry = entry_sym.addr;

    let mut functions: Vec<FunctionInfo> = functions
        .into_iter()
        .map(|(f, end)| FunctionInfo {
            name: f.name,
            start: CODE_BASE + f.start as u64 * INSTR_BYTES,
            end: CODE_BASE + end as u64 * INSTR_BYTES,
            leaf: f.leaf,
            frame_bytes: f.frame,
        })
        .collect();
    functions.sort_by_key(|f| f.start);

    Ok(ProgramImage { code_base: CODE_BASE, code: resolved, data_base, data, symbols, entry, functions })
}
