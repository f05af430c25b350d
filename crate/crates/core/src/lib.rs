//! Return-address protection with a chain of MACs, on a small simulated
//! machine.
//!
//! Each non-leaf function folds its return address into a running MAC held
//! in a register the program cannot address (`top`), and stores the previous
//! MAC next to the return address. On the way out the stored pair is checked
//! against `top` before it is trusted. The crate contains the MAC
//! ([`mac`], built on [`keccak`]), the ISA and its assembler ([`isa`],
//! [`asm`]), the VM with baseline, shadow-stack and chained-MAC modes
//! ([`vm`]), a cycle model ([`timing`]), an attack harness ([`redteam`]) and
//! the brute-force arithmetic ([`secanalysis`]).

pub mod asm;
pub mod exec;
pub mod isa;
pub mod keccak;
pub mod mac;
pub mod redteam;
pub mod secanalysis;
pub mod timing;
pub mod vm;
pub mod workloads;

pub use asm::{assemble, disassemble, ProgramImage};
pub use exec::Execution;
pub use mac::{mac, MacKey, MacRequest, MacUnit, MacValue, MacWidths};
pub use vm::{load_program, FaultKind, MachineState, ProtectionMode, RunResult, SecurityFault, VmConfig, VmError};
