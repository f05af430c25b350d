//! The toy-ISA virtual machine.
//!
//! Zipper mode keeps two registers outside the architectural register file:
//! `top`, the newest MAC of the return-address chain, and the MAC key. Only
//! ZIP, UNZIP, SETJMP and LONGJMP touch `top`; nothing moves the key into a
//! general register or into memory. Host code (tests, the attack harness)
//! can look at both through explicitly named inspection methods.
//!
//! Return addresses use the compressed layout: the low `Na` bits of `ra`
//! hold the address and the high `Nm` bits hold the MAC field.

mod layout;
mod mode;

pub use layout::{MemoryLayout, DEFAULT_MEM_SIZE};
pub use mode::{ParseModeError, ProtectionMode, DEFAULT_SHADOW_OFFSET};

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{encode_image, ProgramImage};
use crate::isa::{Instruction, Opcode, Reg, Width, INSTR_BYTES, NUM_REGS};
use crate::mac::{MacKey, MacRequest, MacUnit, MacValue, MacWidths, KEY_BITS};
use crate::timing::{MacUse, TimingCounters, TimingModel, TimingState};

/// Size of a jump buffer in memory.
pub const JUMP_BUFFER_BYTES: u64 = 40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("memory size {0:#x} unsupported (needs a multiple of 4 KiB, at least 512 KiB)")]
    BadMemorySize(usize),
    #[error("image ends at {end:#x}, beyond the usable limit {limit:#x}")]
    ImageTooLarge { end: u64, limit: u64 },
    #[error("address width {addr_bits} cannot cover {mem_size:#x} bytes of memory")]
    AddressSpaceTooSmall { addr_bits: u32, mem_size: usize },
    #[error("Na + Nm = {0} does not fit in a 64-bit register")]
    WidthsDoNotPack(u32),
    #[error("key width {0} outside 1..=64")]
    BadKeyWidth(u32),
    #[error("shadow stack placement {0:#x} does not fit the shadow region")]
    BadShadowPlacement(u64),
    #[error("pc {0:#x} is not a code address")]
    PcOutOfRange(u64),
    #[error("control transfer to non-code address {target:#x} at pc {pc:#x}")]
    BadControlTarget { pc: u64, target: u64 },
    #[error("memory access of {len} bytes at {addr:#x} out of bounds")]
    MemoryOutOfBounds { addr: u64, len: u64 },
    #[error("write to code at {0:#x}")]
    WriteToCode(u64),
    #[error("machine already stopped")]
    NotRunnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    ReturnMacMismatch,
    ShadowMismatch,
    JumpBufferMacMismatch,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::ReturnMacMismatch => "return-mac-mismatch",
            FaultKind::ShadowMismatch => "shadow-mismatch",
            FaultKind::JumpBufferMacMismatch => "jump-buffer-mac-mismatch",
        })
    }
}

/// A detected attack. Terminal: the machine stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityFault {
    pub kind: FaultKind,
    pub pc_at_fault: u64,
    pub cycle_at_fault: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Halted,
    Faulted,
    CycleLimit,
}

/// Machine configuration beyond mode and seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VmConfig {
    pub mem_size: usize,
    pub widths: MacWidths,
    pub key_bits: u32,
    pub cache_enabled: bool,
    pub trace: bool,
    pub timing: TimingModel,
}

impl Default for VmConfig {
    fn default() -> Self {
        Self {
            mem_size: DEFAULT_MEM_SIZE,
            widths: MacWidths::HARDWARE,
            key_bits: KEY_BITS,
            cache_enabled: true,
            trace: false,
            timing: TimingModel::default(),
        }
    }
}

/// Jump buffer contents, as five little-endian words in memory.
///
/// `saved_ssp` is the compact shadow-stack pointer; it is zero in every
/// other mode and LONGJMP in Zipper mode rejects a nonzero value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JumpBuffer {
    pub saved_pc: u64,
    pub saved_sp: u64,
    pub saved_top: u64,
    pub auth: u64,
    pub saved_ssp: u64,
}

impl JumpBuffer {
    pub fn to_words(self) -> [u64; 5] {
        [self.saved_pc, self.saved_sp, self.saved_top, self.auth, self.saved_ssp]
    }

    pub fn from_words(w: [u64; 5]) -> Self {
        Self { saved_pc: w[0], saved_sp: w[1], saved_top: w[2], auth: w[3], saved_ssp: w[4] }
    }
}

/// `mac(sp mod 2^Na, mac(pc, top))`.
pub fn jump_buffer_auth(unit: &MacUnit, pc: u64, sp: u64, top: MacValue) -> MacValue {
    let inner = unit.mac(MacRequest::new(pc, top));
    unit.mac(MacRequest::new(sp, inner))
}

/// One executed instruction in the trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceLine {
    pub cycle: u64,
    pub pc: u64,
    pub opcode: Opcode,
    pub fault: bool,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = if self.fault { 'F' } else { '.' };
        write!(f, "{:>10} {:#010x} {:<8} {flag}", self.cycle, self.pc, self.opcode.mnemonic())
    }
}

/// Outcome of [`MachineState::run`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub status: RunStatus,
    /// `a0` at HALT.
    pub exit_code: Option<u64>,
    pub fault: Option<SecurityFault>,
    pub cycles: u64,
    pub instructions: u64,
    pub timing: TimingCounters,
    pub output: Vec<u64>,
    pub mode: ProtectionMode,
    pub cache_enabled: bool,
    pub seed: u64,
    pub addr_bits: u32,
    pub mac_bits: u32,
    /// FNV-1a of the encoded image.
    pub image_digest: u64,
    /// FNV-1a of the data segment at the end of the run.
    pub data_digest: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<String>>,
}

impl RunResult {
    /// Mode name, qualified by cache setting in Zipper mode.
    pub fn config_label(&self) -> String {
        match self.mode {
            ProtectionMode::Zipper if self.cache_enabled => "zipper-cache-on".into(),
            ProtectionMode::Zipper => "zipper-cache-off".into(),
            m => m.name().into(),
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

#[derive(Clone)]
pub struct MachineState {
    image: Arc<ProgramImage>,
    image_digest: u64,
    layout: MemoryLayout,
    mode: ProtectionMode,
    seed: u64,
    pc: u64,
    regs: [u64; NUM_REGS],
    mem: Vec<u8>,
    top: MacValue,
    initial_top: MacValue,
    mac: MacUnit,
    timing: TimingState,
    fault: Option<SecurityFault>,
    halted: bool,
    output: Vec<u64>,
    instructions: u64,
    trace: Option<Vec<TraceLine>>,
}

impl fmt::Debug for MachineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MachineState")
            .field("pc", &format_args!("{:#x}", self.pc))
            .field("mode", &self.mode)
            .field("cycle", &self.timing.cycle)
            .field("fault", &self.fault)
            .finish_non_exhaustive()
    }
}

impl PartialEq for MachineState {
    fn eq(&self, o: &Self) -> bool {
        self.image == o.image
            && self.layout == o.layout
            && self.mode == o.mode
            && self.seed == o.seed
            && self.pc == o.pc
            && self.regs == o.regs
            && self.mem == o.mem
            && self.top == o.top
            && self.mac.key() == o.mac.key()
            && self.timing == o.timing
            && self.fault == o.fault
            && self.halted == o.halted
            && self.output == o.output
    }
}

/// Loads `image` with default configuration.
pub fn load_program(image: &ProgramImage, mode: ProtectionMode, seed: u64) -> Result<MachineState, VmError> {
    MachineState::new(Arc::new(image.clone()), mode, seed, VmConfig::default())
}

impl MachineState {
    /// Lays out memory, draws key and initial top from `seed`, and points
    /// `pc` at the entry.
    pub fn new(image: Arc<ProgramImage>, mode: ProtectionMode, seed: u64, config: VmConfig) -> Result<Self, VmError> {
        let widths = config.widths;
        let packed = widths.addr_bits() + widths.mac_bits();
        if packed > 64 {
            return Err(VmError::WidthsDoNotPack(packed));
        }
        if !(1..=KEY_BITS).contains(&config.key_bits) {
            return Err(VmError::BadKeyWidth(config.key_bits));
        }
        if widths.addr_bits() < 64 && (config.mem_size as u64) > (1u64 << widths.addr_bits()) {
            return Err(VmError::AddressSpaceTooSmall { addr_bits: widths.addr_bits(), mem_size: config.mem_size });
        }
        let layout = MemoryLayout::new(config.mem_size, &image)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key_mask = if config.key_bits == 64 { u64::MAX } else { (1u64 << config.key_bits) - 1 };
        let key = MacKey(rng.random::<u64>() & key_mask);
        let top = MacValue(rng.random::<u64>() & widths.mac_mask());
        let placement = rng.random::<u64>();

        let mut mem = vec![0u8; config.mem_size];
        for (i, instr) in image.code.iter().enumerate() {
            let word = instr.encode().expect("assembled instructions encode");
            let at = (image.code_base + i as u64 * INSTR_BYTES) as usize;
            mem[at..at + 4].copy_from_slice(&word.to_le_bytes());
        }
        let db = image.data_base as usize;
        mem[db..db + image.data.len()].copy_from_slice(&image.data);

        let mut regs = [0u64; NUM_REGS];
        regs[Reg::SP.index()] = layout.stack_top;
        let image_digest = fnv1a(&encode_image(&image).expect("image encodes"));
        let mut state = Self {
            pc: image.entry,
            image,
            image_digest,
            layout,
            mode,
            seed,
            regs,
            mem,
            top,
            initial_top: top,
            mac: MacUnit::new(key, widths, config.cache_enabled),
            timing: TimingState::new(config.timing),
            fault: None,
            halted: false,
            output: Vec::new(),
            instructions: 0,
            trace: config.trace.then(Vec::new),
        };
        match mode {
            ProtectionMode::ShadowParallel { offset } => layout.check_parallel_offset(offset)?,
            ProtectionMode::ShadowCompact { base } => {
                let base = match base {
                    Some(b) => {
                        layout.check_compact_base(b)?;
                        b
                    }
                    None => layout.compact_base_from(placement),
                };
                state.write_u64(layout.shadow_ptr, base)?;
            }
            _ => {}
        }
        Ok(state)
    }

    // ---- inspection -------------------------------------------------------

    pub fn image(&self) -> &ProgramImage {
        &self.image
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn mode(&self) -> ProtectionMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn widths(&self) -> MacWidths {
        self.mac.widths()
    }

    pub fn pc(&self) -> u64 {
        self.pc
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn regs(&self) -> &[u64; NUM_REGS] {
        &self.regs
    }

    pub fn memory(&self) -> &[u8] {
        &self.mem
    }

    pub fn data_segment(&self) -> &[u8] {
        &self.mem[self.layout.data_base as usize..self.layout.data_end as usize]
    }

    pub fn output(&self) -> &[u64] {
        &self.output
    }

    pub fn fault(&self) -> Option<SecurityFault> {
        self.fault
    }

    pub fn cycles(&self) -> u64 {
        self.timing.cycle
    }

    pub fn instructions(&self) -> u64 {
        self.instructions
    }

    pub fn timing(&self) -> &TimingState {
        &self.timing
    }

    pub fn status(&self) -> RunStatus {
        if self.fault.is_some() {
            RunStatus::Faulted
        } else if self.halted {
            RunStatus::Halted
        } else {
            RunStatus::Running
        }
    }

    pub fn is_stopped(&self) -> bool {
        self.halted || self.fault.is_some()
    }

    /// Host-side view of the Top register. Guest code cannot read it.
    pub fn chain_top(&self) -> MacValue {
        self.top
    }

    /// Top as drawn at load time.
    pub fn initial_top(&self) -> MacValue {
        self.initial_top
    }

    /// Host-side view of the key register, for oracles and for attackers
    /// granted a key leak. Guest code cannot read it.
    pub fn inspect_key(&self) -> MacKey {
        self.mac.key()
    }

    /// Uncached MAC under this machine's key and widths.
    pub fn mac_oracle(&self, address: u64, prev: MacValue) -> MacValue {
        self.mac.mac(MacRequest::new(address, prev))
    }

    pub fn mac_cache_len(&self) -> usize {
        self.mac.cache_len()
    }

    pub fn trace_lines(&self) -> Option<&[TraceLine]> {
        self.trace.as_deref()
    }

    /// Splits a compressed return-address word into `(addr, mac_field)`.
    pub fn unpack_ra(&self, word: u64) -> (u64, MacValue) {
        let w = self.widths();
        (word & w.addr_mask(), MacValue((word >> (64 - w.mac_bits())) & w.mac_mask()))
    }

    /// Builds a compressed return-address word.
    pub fn pack_ra(&self, addr: u64, mac_field: MacValue) -> u64 {
        let w = self.widths();
        (addr & w.addr_mask()) | ((mac_field.0 & w.mac_mask()) << (64 - w.mac_bits()))
    }

    // ---- host memory and register access -----------------------------------

    fn check(&self, addr: u64, len: u64) -> Result<usize, VmError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.layout.mem_size => Ok(addr as usize),
            _ => Err(VmError::MemoryOutOfBounds { addr, len }),
        }
    }

    pub fn read_bytes(&self, addr: u64, len: u64) -> Result<&[u8], VmError> {
        let a = self.check(addr, len)?;
        Ok(&self.mem[a..a + len as usize])
    }

    /// Writes memory outside the code region.
    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) -> Result<(), VmError> {
        let a = self.check(addr, bytes.len() as u64)?;
        if self.layout.in_code(addr, bytes.len() as u64) {
            return Err(VmError::WriteToCode(addr));
        }
        self.mem[a..a + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, VmError> {
        Ok(u64::from_le_bytes(self.read_bytes(addr, 8)?.try_into().unwrap()))
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) -> Result<(), VmError> {
        self.write_bytes(addr, &v.to_le_bytes())
    }

    /// Sets a general register; writes to `zero` are ignored.
    pub fn set_reg(&mut self, r: Reg, v: u64) {
        if r != Reg::ZERO {
            self.regs[r.index()] = v;
        }
    }

    pub fn set_pc(&mut self, pc: u64) {
        self.pc = pc;
    }

    pub fn read_jump_buffer(&self, addr: u64) -> Result<JumpBuffer, VmError> {
        let mut w = [0u64; 5];
        for (i, slot) in w.iter_mut().enumerate() {
            *slot = self.read_u64(addr.wrapping_add(8 * i as u64))?;
        }
        Ok(JumpBuffer::from_words(w))
    }

    fn write_jump_buffer(&mut self, addr: u64, jb: JumpBuffer) -> Result<(), VmError> {
        self.check(addr, JUMP_BUFFER_BYTES)?;
        for (i, v) in jb.to_words().into_iter().enumerate() {
            self.write_u64(addr + 8 * i as u64, v)?;
        }
        Ok(())
    }

    // ---- execution ----------------------------------------------------------

    fn raise(&mut self, kind: FaultKind) {
        self.fault = Some(SecurityFault { kind, pc_at_fault: self.pc, cycle_at_fault: self.timing.cycle });
    }

    fn next_pc(&self) -> u64 {
        self.pc.wrapping_add(INSTR_BYTES)
    }

    fn jump_to(&mut self, target: u64) -> Result<(), VmError> {
        if !self.image.is_code_addr(target) {
            return Err(VmError::BadControlTarget { pc: self.pc, target });
        }
        self.pc = target;
        Ok(())
    }

    fn mac_tracked(&mut self, address: u64, prev: MacValue, used: &mut MacUse) -> MacValue {
        let (v, hit) = self.mac.mac_cached(MacRequest::new(address, prev));
        used.record(hit);
        v
    }

    /// CALL: `ra = next pc`, push the shadow copy in shadow modes, jump.
    pub fn exec_call(&mut self, target: u64) -> Result<(), VmError> {
        if !self.image.is_code_addr(target) {
            return Err(VmError::BadControlTarget { pc: self.pc, target });
        }
        let ret = self.next_pc();
        match self.mode {
            ProtectionMode::ShadowParallel { offset } => {
                let slot = self.reg(Reg::SP).wrapping_add(offset);
                self.write_u64(slot, ret)?;
            }
            ProtectionMode::ShadowCompact { .. } => {
                let ssp = self.read_u64(self.layout.shadow_ptr)?;
                self.write_u64(ssp, ret)?;
                self.write_u64(self.layout.shadow_ptr, ssp.wrapping_add(8))?;
            }
            _ => {}
        }
        self.set_reg(Reg::RA, ret);
        self.pc = target;
        Ok(())
    }

    /// ZIP: `top' = mac(ra.addr, top)`, old top goes into `ra`'s MAC field.
    /// A no-op outside Zipper mode.
    pub fn exec_zip(&mut self) -> MacUse {
        let mut used = MacUse::NONE;
        if self.mode == ProtectionMode::Zipper {
            let (addr, _) = self.unpack_ra(self.reg(Reg::RA));
            let old = self.top;
            let new = self.mac_tracked(addr, old, &mut used);
            let ra = self.pack_ra(addr, old) | (self.reg(Reg::RA) & self.middle_mask());
            self.set_reg(Reg::RA, ra);
            self.top = new;
        }
        self.pc = self.next_pc();
        used
    }

    /// UNZIP: checks `mac(ra.addr, ra.mac_field) == top`, then pops the
    /// chain. A mismatch raises [`FaultKind::ReturnMacMismatch`].
    pub fn exec_unzip(&mut self) -> MacUse {
        let mut used = MacUse::NONE;
        if self.mode == ProtectionMode::Zipper {
            let ra = self.reg(Reg::RA);
            let (addr, field) = self.unpack_ra(ra);
            if self.mac_tracked(addr, field, &mut used) != self.top {
                self.raise(FaultKind::ReturnMacMismatch);
                return used;
            }
            self.top = field;
            let cleared = ra & !(self.widths().mac_mask() << (64 - self.widths().mac_bits()));
            self.set_reg(Reg::RA, cleared);
        }
        self.pc = self.next_pc();
        used
    }

    /// Bits between the address and MAC fields; unused but preserved.
    fn middle_mask(&self) -> u64 {
        let w = self.widths();
        !(w.addr_mask() | (w.mac_mask() << (64 - w.mac_bits())))
    }

    /// RET: jump to `ra.addr`, checked against the shadow copy in shadow modes.
    pub fn exec_ret(&mut self) -> Result<(), VmError> {
        let target = self.reg(Reg::RA) & self.widths().addr_mask();
        let expected = match self.mode {
            ProtectionMode::ShadowParallel { offset } => {
                Some(self.read_u64(self.reg(Reg::SP).wrapping_add(offset))?)
            }
            ProtectionMode::ShadowCompact { .. } => {
                let ssp = self.read_u64(self.layout.shadow_ptr)?.wrapping_sub(8);
                let v = self.read_u64(ssp)?;
                self.write_u64(self.layout.shadow_ptr, ssp)?;
                Some(v)
            }
            _ => None,
        };
        if expected.is_some_and(|e| e != target) {
            self.raise(FaultKind::ShadowMismatch);
            return Ok(());
        }
        self.jump_to(target)
    }

    /// SETJMP: saves pc, sp and (in Zipper mode) top with an authenticating
    /// MAC at the address in `buf`; `a0 = 0`.
    pub fn exec_setjmp(&mut self, buf_addr: u64) -> Result<MacUse, VmError> {
        self.check(buf_addr, JUMP_BUFFER_BYTES)?;
        let mut used = MacUse::NONE;
        let saved_pc = self.next_pc();
        let saved_sp = self.reg(Reg::SP);
        let jb = match self.mode {
            ProtectionMode::Zipper => {
                let inner = self.mac_tracked(saved_pc, self.top, &mut used);
                let auth = self.mac_tracked(saved_sp, inner, &mut used);
                JumpBuffer { saved_pc, saved_sp, saved_top: self.top.0, auth: auth.0, saved_ssp: 0 }
            }
            ProtectionMode::ShadowCompact { .. } => {
                let ssp = self.read_u64(self.layout.shadow_ptr)?;
                JumpBuffer { saved_pc, saved_sp, saved_top: 0, auth: 0, saved_ssp: ssp }
            }
            _ => JumpBuffer { saved_pc, saved_sp, saved_top: 0, auth: 0, saved_ssp: 0 },
        };
        self.write_jump_buffer(buf_addr, jb)?;
        self.set_reg(Reg::A0, 0);
        self.pc = saved_pc;
        Ok(used)
    }

    /// LONGJMP: restores the state saved by SETJMP; `a0 = val`, or 1 if
    /// `val` is zero. In Zipper mode a buffer whose fields are out of range
    /// or whose MAC does not verify raises
    /// [`FaultKind::JumpBufferMacMismatch`].
    pub fn exec_longjmp(&mut self, buf_addr: u64, val: u64) -> Result<MacUse, VmError> {
        let jb = self.read_jump_buffer(buf_addr)?;
        let mut used = MacUse::NONE;
        if self.mode == ProtectionMode::Zipper {
            let w = self.widths();
            let canonical = jb.saved_pc <= w.addr_mask()
                && jb.saved_sp <= w.addr_mask()
                && jb.saved_top <= w.mac_mask()
                && jb.auth <= w.mac_mask()
                && jb.saved_ssp == 0;
            let inner = self.mac_tracked(jb.saved_pc, MacValue(jb.saved_top), &mut used);
            let auth = self.mac_tracked(jb.saved_sp, inner, &mut used);
            if !canonical || auth.0 != jb.auth {
                self.raise(FaultKind::JumpBufferMacMismatch);
                return Ok(used);
            }
        }
        self.jump_to(jb.saved_pc)?;
        self.set_reg(Reg::SP, jb.saved_sp);
        match self.mode {
            ProtectionMode::Zipper => self.top = MacValue(jb.saved_top),
            ProtectionMode::ShadowCompact { .. } => self.write_u64(self.layout.shadow_ptr, jb.saved_ssp)?,
            _ => {}
        }
        self.set_reg(Reg::A0, if val == 0 { 1 } else { val });
        Ok(used)
    }

    fn load(&self, width: Width, addr: u64) -> Result<u64, VmError> {
        Ok(match width {
            Width::Byte => self.read_bytes(addr, 1)?[0] as u64,
            Width::Word => self.read_u64(addr)?,
        })
    }

    fn store(&mut self, width: Width, addr: u64, v: u64) -> Result<(), VmError> {
        match width {
            Width::Byte => self.write_bytes(addr, &[v as u8]),
            Width::Word => self.write_u64(addr, v),
        }
    }

    fn execute(&mut self, instr: Instruction) -> Result<MacUse, VmError> {
        let r = |s: &Self, reg: Reg| s.regs[reg.index()];
        let next = self.next_pc();
        match instr {
            Instruction::Halt => self.halted = true,
            Instruction::Nop => self.pc = next,
            Instruction::Out { rs } => {
                self.output.push(r(self, rs));
                self.pc = next;
            }
            Instruction::Alu { op, rd, rs1, rs2 } => {
                self.set_reg(rd, op.apply(r(self, rs1), r(self, rs2)));
                self.pc = next;
            }
            Instruction::AddI { rd, rs1, imm } => {
                self.set_reg(rd, r(self, rs1).wrapping_add(imm as i64 as u64));
                self.pc = next;
            }
            Instruction::OrI { rd, rs1, imm } => {
                self.set_reg(rd, r(self, rs1) | imm as u64);
                self.pc = next;
            }
            Instruction::Lui { rd, imm } => {
                self.set_reg(rd, (imm as u64) << 16);
                self.pc = next;
            }
            Instruction::Load { width, rd, base, offset } => {
                let v = self.load(width, r(self, base).wrapping_add(offset as i64 as u64))?;
                self.set_reg(rd, v);
                self.pc = next;
            }
            Instruction::Store { width, src, base, offset } => {
                self.store(width, r(self, base).wrapping_add(offset as i64 as u64), r(self, src))?;
                self.pc = next;
            }
            Instruction::Branch { cond, rs1, rs2, .. } => {
                self.pc = if cond.holds(r(self, rs1), r(self, rs2)) {
                    instr.static_target(self.pc).expect("branch has a target")
                } else {
                    next
                };
            }
            Instruction::Jump { target } => self.jump_to(target as u64)?,
            Instruction::Call { target } => self.exec_call(target as u64)?,
            Instruction::Ret => self.exec_ret()?,
            Instruction::Zip => return Ok(self.exec_zip()),
            Instruction::Unzip => return Ok(self.exec_unzip()),
            Instruction::SetJmp { buf } => return self.exec_setjmp(r(self, buf)),
            Instruction::LongJmp { buf, val } => return self.exec_longjmp(r(self, buf), r(self, val)),
        }
        Ok(MacUse::NONE)
    }

    /// Executes one instruction and charges its cycles.
    pub fn step(&mut self) -> Result<(), VmError> {
        if self.is_stopped() {
            return Err(VmError::NotRunnable);
        }
        let pc = self.pc;
        let instr = *self.image.instruction_at(pc).ok_or(VmError::PcOutOfRange(pc))?;
        let issue = self.timing.cycle;
        let mac = self.execute(instr)?;
        self.timing.account_instruction(&instr, self.mode, mac);
        self.instructions += 1;
        if let Some(f) = &mut self.fault {
            f.cycle_at_fault = self.timing.cycle;
        }
        if let Some(t) = &mut self.trace {
            t.push(TraceLine { cycle: issue, pc, opcode: instr.opcode(), fault: self.fault.is_some() });
        }
        Ok(())
    }

    /// Steps until HALT, a fault, or `cycles() >= max_cycles`.
    pub fn run(&mut self, max_cycles: u64) -> Result<RunResult, VmError> {
        while !self.is_stopped() && self.timing.cycle < max_cycles {
            self.step()?;
        }
        Ok(self.result())
    }

    /// Snapshot of the run so far.
    pub fn result(&self) -> RunResult {
        let status = match self.status() {
            RunStatus::Running => RunStatus::CycleLimit,
            s => s,
        };
        RunResult {
            status,
            exit_code: self.halted.then(|| self.reg(Reg::A0)),
            fault: self.fault,
            cycles: self.timing.cycle,
            instructions: self.instructions,
            timing: self.timing.counters,
            output: self.output.clone(),
            mode: self.mode,
            cache_enabled: self.mac.cache_enabled(),
            seed: self.seed,
            addr_bits: self.widths().addr_bits(),
            mac_bits: self.widths().mac_bits(),
            image_digest: self.image_digest,
            data_digest: fnv1a(self.data_segment()),
            trace: self.trace.as_ref().map(|t| t.iter().map(|l| l.to_string()).collect()),
        }
    }
}

/// Loads and runs an image in one call.
pub fn run_image(
    image: Arc<ProgramImage>,
    mode: ProtectionMode,
    seed: u64,
    config: VmConfig,
    max_cycles: u64,
) -> Result<RunResult, VmError> {
    MachineState::new(image, mode, seed, config)?.run(max_cycles)
}

#[cfg(test)]
mod tests;
