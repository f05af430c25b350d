//! Text assembler, disassembler and binary image format for the toy ISA.
//!
//! # Assembly grammar
//!
//! One statement per line; `;` or `#` starts a comment. Labels end in `:`
//! and may share a line with a statement.
//!
//! ```text
//! .text | .data               switch section
//! .entry SYMBOL               entry point (default: _start, then main)
//! .func NAME [LOCALS]         instrumented function, LOCALS bytes of locals (multiple of 8)
//! .endfunc
//! .proc NAME leaf|nonleaf FRAME   raw function region, no expansion
//! .endproc
//! .word V, ...                8-byte little-endian words (integers or symbols)
//! .byte B, ...
//! .zero N
//! ```
//!
//! Instructions use `op rd, rs1, rs2`, `ld rd, off(base)`, `sd rs, off(base)`,
//! `beq rs1, rs2, target`, `call target`. Pseudo-instructions: `li rd, imm`,
//! `la rd, symbol`, `mov rd, rs`, `j target`.
//!
//! Inside `.func`, a function that contains a `call` is non-leaf. Its
//! prologue is `zip; addi sp, sp, -F; sd ra, F-8(sp)` and every `ret`
//! becomes `ld ra, F-8(sp); unzip; addi sp, sp, F; ret`, with
//! `F = LOCALS + 8`. Leaf functions never spill `ra` and get no ZIP/UNZIP.

mod binary;
mod disasm;
mod parse;

pub use binary::{decode_image, encode_image, ImageFormatError, IMAGE_MAGIC, IMAGE_VERSION};
pub use disasm::disassemble;
pub use parse::{assemble, AsmError, AsmErrorKind};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::isa::{Instruction, INSTR_BYTES};

/// Where assembled code is placed.
pub const CODE_BASE: u64 = 0x1_0000;
/// Data starts at the first boundary of this size after the code.
pub const DATA_ALIGN: u64 = 0x1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Text,
    Data,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Symbol {
    pub addr: u64,
    pub section: Section,
}

/// A function region and its instrumentation class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunctionInfo {
    pub name: String,
    pub start: u64,
    /// One past the last instruction.
    pub end: u64,
    pub leaf: bool,
    /// Stack bytes reserved by the prologue.
    pub frame_bytes: u64,
}

/// An assembled program.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramImage {
    pub code_base: u64,
    pub code: Vec<Instruction>,
    pub data_base: u64,
    pub data: Vec<u8>,
    pub symbols: BTreeMap<String, Symbol>,
    pub entry: u64,
    pub functions: Vec<FunctionInfo>,
}

pub(crate) fn data_base_for(code_len: usize) -> u64 {
    let end = CODE_BASE + code_len as u64 * INSTR_BYTES;
    end.div_ceil(DATA_ALIGN) * DATA_ALIGN
}

impl ProgramImage {
    pub fn code_end(&self) -> u64 {
        self.code_base + self.code.len() as u64 * INSTR_BYTES
    }

    pub fn data_end(&self) -> u64 {
        self.data_base + self.data.len() as u64
    }

    /// True if `addr` is an aligned instruction address inside the code.
    pub fn is_code_addr(&self, addr: u64) -> bool {
        addr >= self.code_base && addr < self.code_end() && (addr - self.code_base).is_multiple_of(INSTR_BYTES)
    }

    pub fn instruction_at(&self, pc: u64) -> Option<&Instruction> {
        if !self.is_code_addr(pc) {
            return None;
        }
        self.code.get(((pc - self.code_base) / INSTR_BYTES) as usize)
    }

    pub fn symbol(&self, name: &str) -> Option<u64> {
        self.symbols.get(name).map(|s| s.addr)
    }

    /// First text symbol at `addr`, preferring function names.
    pub fn code_label(&self, addr: u64) -> Option<&str> {
        if let Some(f) = self.functions.iter().find(|f| f.start == addr) {
            return Some(&f.name);
        }
        self.symbols
            .iter()
            .find(|(_, s)| s.section == Section::Text && s.addr == addr)
            .map(|(n, _)| n.as_str())
    }

    pub fn function(&self, name: &str) -> Option<&FunctionInfo> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_at(&self, pc: u64) -> Option<&FunctionInfo> {
        self.functions.iter().find(|f| pc >= f.start && pc < f.end)
    }

    /// Addresses immediately following each CALL: every legitimate return address.
    pub fn return_sites(&self) -> BTreeSet<u64> {
        self.code
            .iter()
            .enumerate()
            .filter(|(_, i)| matches!(i, Instruction::Call { .. }))
            .map(|(idx, _)| self.code_base + (idx as u64 + 1) * INSTR_BYTES)
            .collect()
    }

    /// Instructions of a function, with their addresses.
    pub fn function_body<'a>(&'a self, f: &FunctionInfo) -> impl Iterator<Item = (u64, &'a Instruction)> + 'a {
        let first = ((f.start - self.code_base) / INSTR_BYTES) as usize;
        let last = ((f.end - self.code_base) / INSTR_BYTES) as usize;
        let start = f.start;
        self.code[first..last]
            .iter()
            .enumerate()
            .map(move |(i, instr)| (start + i as u64 * INSTR_BYTES, instr))
    }
}
