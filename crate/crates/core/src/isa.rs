//! The toy instruction set: 16 registers of 64 bits, fixed 4-byte encoding.
//!
//! Encoding layout (little-endian `u32`, opcode in the low byte):
//!
//! ```text
//! R: [op:8][rd:4][rs1:4][rs2:4][0:12]
//! I: [op:8][rd:4][rs1:4][imm:16]        (stores use rd as the source register)
//! B: [op:8][rs1:4][rs2:4][off:16]       (offset in instructions, relative to pc)
//! J: [op:8][target/4:24]
//! ```

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Instruction size in bytes.
pub const INSTR_BYTES: u64 = 4;
pub const NUM_REGS: usize = 16;

/// A general-purpose register index. `r0` always reads as zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

const REG_NAMES: [&str; NUM_REGS] = [
    "zero", "ra", "sp", "a0", "a1", "a2", "a3", "t0", "t1", "t2", "t3", "t4", "s0", "s1", "s2", "s3",
];

impl Reg {
    pub const ZERO: Reg = Reg(0);
    /// Return address.
    pub const RA: Reg = Reg(1);
    /// Stack pointer.
    pub const SP: Reg = Reg(2);
    /// Return value and exit status.
    pub const A0: Reg = Reg(3);

    pub fn new(index: u8) -> Option<Reg> {
        ((index as usize) < NUM_REGS).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        REG_NAMES[self.0 as usize]
    }

    /// Parses `r0`..`r15` or an ABI alias.
    pub fn parse(s: &str) -> Option<Reg> {
        if let Some(pos) = REG_NAMES.iter().position(|n| *n == s) {
            return Some(Reg(pos as u8));
        }
        let n: u8 = s.strip_prefix('r')?.parse().ok()?;
        Reg::new(n)
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Slt,
    Sltu,
}

impl AluOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a.wrapping_shl((b & 63) as u32),
            AluOp::Shr => a.wrapping_shr((b & 63) as u32),
            AluOp::Slt => ((a as i64) < (b as i64)) as u64,
            AluOp::Sltu => (a < b) as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchCond {
    Eq,
    Ne,
    Lt,
    Ge,
}

impl BranchCond {
    pub fn holds(self, a: u64, b: u64) -> bool {
        match self {
            BranchCond::Eq => a == b,
            BranchCond::Ne => a != b,
            BranchCond::Lt => (a as i64) < (b as i64),
            BranchCond::Ge => (a as i64) >= (b as i64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    Byte,
    Word,
}

impl Width {
    pub fn bytes(self) -> u64 {
        match self {
            Width::Byte => 1,
            Width::Word => 8,
        }
    }
}

/// A decoded instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    Halt,
    Nop,
    /// Appends a register value to the program's output channel.
    Out { rs: Reg },
    Alu { op: AluOp, rd: Reg, rs1: Reg, rs2: Reg },
    AddI { rd: Reg, rs1: Reg, imm: i16 },
    OrI { rd: Reg, rs1: Reg, imm: u16 },
    /// `rd = imm << 16`
    Lui { rd: Reg, imm: u16 },
    Load { width: Width, rd: Reg, base: Reg, offset: i16 },
    Store { width: Width, src: Reg, base: Reg, offset: i16 },
    /// Offset counted in instructions from the branch itself.
    Branch { cond: BranchCond, rs1: Reg, rs2: Reg, offset: i16 },
    Jump { target: u32 },
    Call { target: u32 },
    Ret,
    Zip,
    Unzip,
    /// Saves a jump buffer at the address in `buf`; `a0 = 0`.
    SetJmp { buf: Reg },
    /// Restores from the jump buffer at `buf`; `a0 = val` (or 1 if `val` is zero).
    LongJmp { buf: Reg, val: Reg },
}

/// Opcode numbers; one per instruction shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Opcode {
    Halt = 0x00,
    Nop = 0x01,
    Out = 0x02,
    Add = 0x10,
    Sub = 0x11,
    Mul = 0x12,
    And = 0x13,
    Or = 0x14,
    Xor = 0x15,
    Shl = 0x16,
    Shr = 0x17,
    Slt = 0x18,
    Sltu = 0x19,
    AddI = 0x20,
    OrI = 0x21,
    Lui = 0x22,
    Ld = 0x30,
    Sd = 0x31,
    Lbu = 0x32,
    Sb = 0x33,
    Beq = 0x40,
    Bne = 0x41,
    Blt = 0x42,
    Bge = 0x43,
    Jmp = 0x50,
    Call = 0x51,
    Ret = 0x52,
    Zip = 0x60,
    Unzip = 0x61,
    SetJmp = 0x62,
    LongJmp = 0x63,
}

impl Opcode {
    pub const ALL: [Opcode; 31] = [
        Opcode::Halt,
        Opcode::Nop,
        Opcode::Out,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Slt,
        Opcode::Sltu,
        Opcode::AddI,
        Opcode::OrI,
        Opcode::Lui,
        Opcode::Ld,
        Opcode::Sd,
        Opcode::Lbu,
        Opcode::Sb,
        Opcode::Beq,
        Opcode::Bne,
        Opcode::Blt,
        Opcode::Bge,
        Opcode::Jmp,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Zip,
        Opcode::Unzip,
        Opcode::SetJmp,
        Opcode::LongJmp,
    ];

    pub fn from_byte(b: u8) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| *op as u8 == b)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Halt => "halt",
            Opcode::Nop => "nop",
            Opcode::Out => "out",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Shl => "shl",
            Opcode::Shr => "shr",
            Opcode::Slt => "slt",
            Opcode::Sltu => "sltu",
            Opcode::AddI => "addi",
            Opcode::OrI => "ori",
            Opcode::Lui => "lui",
            Opcode::Ld => "ld",
            Opcode::Sd => "sd",
            Opcode::Lbu => "lbu",
            Opcode::Sb => "sb",
            Opcode::Beq => "beq",
            Opcode::Bne => "bne",
            Opcode::Blt => "blt",
            Opcode::Bge => "bge",
            Opcode::Jmp => "jmp",
            Opcode::Call => "call",
            Opcode::Ret => "ret",
            Opcode::Zip => "zip",
            Opcode::Unzip => "unzip",
            Opcode::SetJmp => "setjmp",
            Opcode::LongJmp => "longjmp",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.mnemonic() == s)
    }

    fn alu(self) -> Option<AluOp> {
        Some(match self {
            Opcode::Add => AluOp::Add,
            Opcode::Sub => AluOp::Sub,
            Opcode::Mul => AluOp::Mul,
            Opcode::And => AluOp::And,
            Opcode::Or => AluOp::Or,
            Opcode::Xor => AluOp::Xor,
            Opcode::Shl => AluOp::Shl,
            Opcode::Shr => AluOp::Shr,
            Opcode::Slt => AluOp::Slt,
            Opcode::Sltu => AluOp::Sltu,
            _ => return None,
        })
    }

    fn branch(self) -> Option<BranchCond> {
        Some(match self {
            Opcode::Beq => BranchCond::Eq,
            Opcode::Bne => BranchCond::Ne,
            Opcode::Blt => BranchCond::Lt,
            Opcode::Bge => BranchCond::Ge,
            _ => return None,
        })
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("invalid opcode {0:#04x}")]
    InvalidOpcode(u8),
    #[error("non-canonical encoding {0:#010x}")]
    NonCanonical(u32),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("jump target {0:#x} is unaligned or beyond the 26-bit range")]
    Target(u32),
}

const MAX_TARGET: u32 = (1 << 26) - 4;

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match *self {
            Instruction::Halt => Opcode::Halt,
            Instruction::Nop => Opcode::Nop,
            Instruction::Out { .. } => Opcode::Out,
            Instruction::Alu { op, .. } => match op {
                AluOp::Add => Opcode::Add,
                AluOp::Sub => Opcode::Sub,
                AluOp::Mul => Opcode::Mul,
                AluOp::And => Opcode::And,
                AluOp::Or => Opcode::Or,
                AluOp::Xor => Opcode::Xor,
                AluOp::Shl => Opcode::Shl,
                AluOp::Shr => Opcode::Shr,
                AluOp::Slt => Opcode::Slt,
                AluOp::Sltu => Opcode::Sltu,
            },
            Instruction::AddI { .. } => Opcode::AddI,
            Instruction::OrI { .. } => Opcode::OrI,
            Instruction::Lui { .. } => Opcode::Lui,
            Instruction::Load { width: Width::Word, .. } => Opcode::Ld,
            Instruction::Load { width: Width::Byte, .. } => Opcode::Lbu,
            Instruction::Store { width: Width::Word, .. } => Opcode::Sd,
            Instruction::Store { width: Width::Byte, .. } => Opcode::Sb,
            Instruction::Branch { cond, .. } => match cond {
                BranchCond::Eq => Opcode::Beq,
                BranchCond::Ne => Opcode::Bne,
                BranchCond::Lt => Opcode::Blt,
                BranchCond::Ge => Opcode::Bge,
            },
            Instruction::Jump { .. } => Opcode::Jmp,
            Instruction::Call { .. } => Opcode::Call,
            Instruction::Ret => Opcode::Ret,
            Instruction::Zip => Opcode::Zip,
            Instruction::Unzip => Opcode::Unzip,
            Instruction::SetJmp { .. } => Opcode::SetJmp,
            Instruction::LongJmp { .. } => Opcode::LongJmp,
        }
    }

    /// True for ZIP and UNZIP, the instructions that drive the MAC unit.
    pub fn is_chain_op(&self) -> bool {
        matches!(self, Instruction::Zip | Instruction::Unzip)
    }

    /// Control-transfer target for branches, jumps and calls at `pc`.
    pub fn static_target(&self, pc: u64) -> Option<u64> {
        match *self {
            Instruction::Branch { offset, .. } => {
                Some(pc.wrapping_add((offset as i64 * INSTR_BYTES as i64) as u64))
            }
            Instruction::Jump { target } | Instruction::Call { target } => Some(target as u64),
            _ => None,
        }
    }

    pub fn encode(&self) -> Result<u32, EncodeError> {
        let op = self.opcode() as u32;
        let r = |reg: Reg| reg.0 as u32;
        let word = match *self {
            Instruction::Halt
            | Instruction::Nop
            | Instruction::Ret
            | Instruction::Zip
            | Instruction::Unzip => op,
            Instruction::Out { rs } => op | r(rs) << 12,
            Instruction::Alu { rd, rs1, rs2, .. } => op | r(rd) << 8 | r(rs1) << 12 | r(rs2) << 16,
            Instruction::AddI { rd, rs1, imm } => {
                op | r(rd) << 8 | r(rs1) << 12 | (imm as u16 as u32) << 16
            }
            Instruction::OrI { rd, rs1, imm } => op | r(rd) << 8 | r(rs1) << 12 | (imm as u32) << 16,
            Instruction::Lui { rd, imm } => op | r(rd) << 8 | (imm as u32) << 16,
            Instruction::Load { rd, base, offset, .. } => {
                op | r(rd) << 8 | r(base) << 12 | (offset as u16 as u32) << 16
            }
            Instruction::Store { src, base, offset, .. } => {
                op | r(src) << 8 | r(base) << 12 | (offset as u16 as u32) << 16
            }
            Instruction::Branch { rs1, rs2, offset, .. } => {
                op | r(rs1) << 8 | r(rs2) << 12 | (offset as u16 as u32) << 16
            }
            Instruction::Jump { target } | Instruction::Call { target } => {
                if target % 4 != 0 || target > MAX_TARGET {
                    return Err(EncodeError::Target(target));
                }
                op | (target >> 2) << 8
            }
            Instruction::SetJmp { buf } => op | r(buf) << 12,
            Instruction::LongJmp { buf, val } => op | r(buf) << 12 | r(val) << 16,
        };
        Ok(word)
    }

    pub fn decode(word: u32) -> Result<Instruction, DecodeError> {
        let opcode =
            Opcode::from_byte(word as u8).ok_or(DecodeError::InvalidOpcode(word as u8))?;
        let f8 = Reg(((word >> 8) & 0xf) as u8);
        let f12 = Reg(((word >> 12) & 0xf) as u8);
        let f16 = Reg(((word >> 16) & 0xf) as u8);
        let imm = (word >> 16) as u16;
        let instr = if let Some(op) = opcode.alu() {
            Instruction::Alu { op, rd: f8, rs1: f12, rs2: f16 }
        } else if let Some(cond) = opcode.branch() {
            Instruction::Branch { cond, rs1: f8, rs2: f12, offset: imm as i16 }
        } else {
            match opcode {
                Opcode::Halt => Instruction::Halt,
                Opcode::Nop => Instruction::Nop,
                Opcode::Ret => Instruction::Ret,
                Opcode::Zip => Instruction::Zip,
                Opcode::Unzip => Instruction::Unzip,
                Opcode::Out => Instruction::Out { rs: f12 },
                Opcode::AddI => Instruction::AddI { rd: f8, rs1: f12, imm: imm as i16 },
                Opcode::OrI => Instruction::OrI { rd: f8, rs1: f12, imm },
                Opcode::Lui => Instruction::Lui { rd: f8, imm },
                Opcode::Ld => Instruction::Load { width: Width::Word, rd: f8, base: f12, offset: imm as i16 },
                Opcode::Lbu => Instruction::Load { width: Width::Byte, rd: f8, base: f12, offset: imm as i16 },
                Opcode::Sd => Instruction::Store { width: Width::Word, src: f8, base: f12, offset: imm as i16 },
                Opcode::Sb => Instruction::Store { width: Width::Byte, src: f8, base: f12, offset: imm as i16 },
                Opcode::Jmp => Instruction::Jump { target: (word >> 8) << 2 },
                Opcode::Call => Instruction::Call { target: (word >> 8) << 2 },
                Opcode::SetJmp => Instruction::SetJmp { buf: f12 },
                Opcode::LongJmp => Instruction::LongJmp { buf: f12, val: f16 },
                _ => unreachable!("alu and branch opcodes handled above"),
            }
        };
        // unused fields must be zero so that decode . encode is a bijection
        if instr.encode().ok() != Some(word) {
            return Err(DecodeError::NonCanonical(word));
        }
        Ok(instr)
    }

    /// Assembly text; `label` may name control-transfer targets.
    pub fn format_at(&self, pc: u64, label: &dyn Fn(u64) -> Option<String>) -> String {
        let target = |addr: u64| label(addr).unwrap_or_else(|| format!("{addr:#x}"));
        let m = self.opcode().mnemonic();
        match *self {
            Instruction::Halt
            | Instruction::Nop
            | Instruction::Ret
            | Instruction::Zip
            | Instruction::Unzip => m.to_string(),
            Instruction::Out { rs } => format!("{m} {rs}"),
            Instruction::Alu { rd, rs1, rs2, .. } => format!("{m} {rd}, {rs1}, {rs2}"),
            Instruction::AddI { rd, rs1, imm } => format!("{m} {rd}, {rs1}, {imm}"),
            Instruction::OrI { rd, rs1, imm } => format!("{m} {rd}, {rs1}, {imm:#x}"),
            Instruction::Lui { rd, imm } => format!("{m} {rd}, {imm:#x}"),
            Instruction::Load { rd, base, offset, .. } => format!("{m} {rd}, {offset}({base})"),
            Instruction::Store { src, base, offset, .. } => format!("{m} {src}, {offset}({base})"),
            Instruction::Branch { rs1, rs2, .. } => {
                format!("{m} {rs1}, {rs2}, {}", target(self.static_target(pc).unwrap()))
            }
            Instruction::Jump { target: t } | Instruction::Call { target: t } => {
                format!("{m} {}", target(t as u64))
            }
            Instruction::SetJmp { buf } => format!("{m} {buf}"),
            Instruction::LongJmp { buf, val } => format!("{m} {buf}, {val}"),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_at(0, &|_| None))
    }
}
