use super::*;
use crate::asm::assemble;
use crate::isa::{AluOp, BranchCond};
use crate::mac::mac;
use proptest::prelude::*;

const TRIVIAL: &str = "
    .data
    buf: .zero 64
    .text
    _start:
        nop
        nop
    f:
        nop
        halt";

fn machine(src: &str, mode: ProtectionMode, seed: u64) -> MachineState {
    load_program(&assemble(src).unwrap(), mode, seed).unwrap()
}

fn oracle(m: &MachineState, addr: u64, prev: MacValue) -> MacValue {
    mac(m.inspect_key(), m.widths(), MacRequest::new(addr, prev))
}

fn factorial(n: u64) -> u64 {
    (1..=n).product()
}

#[test]
fn load_is_deterministic() {
    let img = assemble(TRIVIAL).unwrap();
    for mode in ProtectionMode::all() {
        assert_eq!(load_program(&img, mode, 9).unwrap(), load_program(&img, mode, 9).unwrap());
    }
}

#[test]
fn seeds_give_different_secrets() {
    let img = assemble(TRIVIAL).unwrap();
    for s in 0..100u64 {
        let a = load_program(&img, ProtectionMode::Zipper, 2 * s).unwrap();
        let b = load_program(&img, ProtectionMode::Zipper, 2 * s + 1).unwrap();
        assert_ne!((a.chain_top(), a.inspect_key()), (b.chain_top(), b.inspect_key()));
    }
}

#[test]
fn fresh_zipper_state() {
    let m = machine(TRIVIAL, ProtectionMode::Zipper, 1);
    assert!(m.fault().is_none());
    assert!(m.chain_top().0 < 1 << 24);
    assert_eq!(m.cycles(), 0);
    assert_eq!(m.reg(Reg::SP), m.layout().stack_top);
    assert_eq!(m.pc(), m.image().entry);
}

#[test]
fn rejects_bad_configs() {
    let img = Arc::new(assemble(TRIVIAL).unwrap());
    let with = |c: VmConfig, mode| MachineState::new(img.clone(), mode, 0, c).err();
    let w = |na, nm| VmConfig { widths: MacWidths::new(na, nm).unwrap(), ..VmConfig::default() };
    assert_eq!(with(w(48, 24), ProtectionMode::Zipper), Some(VmError::WidthsDoNotPack(72)));
    assert!(matches!(with(w(16, 8), ProtectionMode::Zipper), Some(VmError::AddressSpaceTooSmall { .. })));
    let small = VmConfig { mem_size: 4096, ..VmConfig::default() };
    assert_eq!(with(small, ProtectionMode::Baseline), Some(VmError::BadMemorySize(4096)));
    let off = ProtectionMode::ShadowParallel { offset: 0x1000 };
    assert_eq!(with(VmConfig::default(), off), Some(VmError::BadShadowPlacement(0x1000)));
    let base = ProtectionMode::ShadowCompact { base: Some(0x10) };
    assert_eq!(with(VmConfig::default(), base), Some(VmError::BadShadowPlacement(0x10)));
}

#[test]
fn image_too_large_is_rejected() {
    let src = format!(".data\nbig: .zero {}\n.text\n_start: halt\n", 0x40000);
    let img = assemble(&src).unwrap();
    assert!(matches!(load_program(&img, ProtectionMode::Baseline, 0), Err(VmError::ImageTooLarge { .. })));
}

#[test]
fn alu_and_halt() {
    let mut m = machine("_start:\n li a1, 40\n li a2, 2\n add a0, a1, a2\n halt", ProtectionMode::Baseline, 0);
    let r = m.run(100).unwrap();
    assert_eq!(r.status, RunStatus::Halted);
    assert_eq!(r.exit_code, Some(42));
    assert_eq!(r.instructions, 4);
    assert_eq!(r.cycles, 4);
}

#[test]
fn add_wraps() {
    let mut m = machine("_start:\n add a0, a1, a2\n halt", ProtectionMode::Baseline, 0);
    m.set_reg(Reg::new(4).unwrap(), u64::MAX);
    m.set_reg(Reg::new(5).unwrap(), 2);
    m.step().unwrap();
    assert_eq!(m.reg(Reg::A0), 1);
    assert_eq!(m.pc(), crate::asm::CODE_BASE + 4);
}

#[test]
fn zero_register_is_hardwired() {
    let mut m = machine("_start:\n li zero, 5\n add a0, zero, zero\n halt", ProtectionMode::Baseline, 0);
    m.run(10).unwrap();
    assert_eq!(m.reg(Reg::ZERO), 0);
    assert_eq!(m.reg(Reg::A0), 0);
}

#[test]
fn load_past_end_is_an_error() {
    let mut m = machine("_start:\n ld a0, -8(a1)\n halt", ProtectionMode::Baseline, 0);
    m.set_reg(Reg::new(4).unwrap(), m.layout().mem_size + 4);
    assert!(matches!(m.step(), Err(VmError::MemoryOutOfBounds { .. })));
    let mut m = machine("_start:\n ld a0, 0(a1)\n halt", ProtectionMode::Baseline, 0);
    m.set_reg(Reg::new(4).unwrap(), u64::MAX - 3);
    assert!(matches!(m.step(), Err(VmError::MemoryOutOfBounds { .. })));
}

#[test]
fn code_is_write_protected() {
    let mut m = machine("_start:\n lui a1, 1\n sd a0, 0(a1)\n halt", ProtectionMode::Baseline, 0);
    m.step().unwrap();
    assert_eq!(m.step(), Err(VmError::WriteToCode(0x10000)));
    assert_eq!(m.write_u64(0x10004, 0), Err(VmError::WriteToCode(0x10004)));
}

#[test]
fn pc_out_of_range() {
    let mut m = machine("_start:\n jmp past\n past:", ProtectionMode::Baseline, 0);
    assert!(matches!(m.step(), Err(VmError::BadControlTarget { .. })));
    let mut m = machine("_start:\n nop", ProtectionMode::Baseline, 0);
    m.step().unwrap();
    assert_eq!(m.step(), Err(VmError::PcOutOfRange(0x10004)));
}

#[test]
fn branches() {
    let src = "_start:\n li a1, -1\n blt a1, zero, neg\n li a0, 1\n halt\n neg:\n li a0, 2\n halt";
    assert_eq!(machine(src, ProtectionMode::Baseline, 0).run(100).unwrap().exit_code, Some(2));
    assert!(BranchCond::Ge.holds(0, 0));
    assert_eq!(AluOp::Sltu.apply(u64::MAX, 0), 0);
}

#[test]
fn call_sets_ra_and_jumps() {
    let mut m = machine("_start:\n call f\n halt\n f:\n ret", ProtectionMode::Baseline, 0);
    m.step().unwrap();
    assert_eq!(m.reg(Reg::RA), 0x10004);
    assert_eq!(m.pc(), 0x10008);
}

#[test]
fn call_from_100_sets_ra_104() {
    let mut m = machine(TRIVIAL, ProtectionMode::Baseline, 0);
    m.set_pc(100);
    m.exec_call(0x10008).unwrap();
    assert_eq!(m.reg(Reg::RA), 104);
    assert_eq!(m.pc(), 0x10008);
    assert!(matches!(m.exec_call(0x10002), Err(VmError::BadControlTarget { .. })));
}

#[test]
fn parallel_call_pushes_at_offset() {
    let mut m = machine(TRIVIAL, ProtectionMode::shadow_parallel(), 0);
    m.set_pc(100);
    let sp = m.reg(Reg::SP) - 64;
    m.set_reg(Reg::SP, sp);
    m.exec_call(0x10008).unwrap();
    assert_eq!(m.read_u64(sp + 0x40000).unwrap(), 104);
}

#[test]
fn compact_call_pushes_densely() {
    let mut m = machine(TRIVIAL, ProtectionMode::ShadowCompact { base: Some(0x90000) }, 0);
    let ptr = m.layout().shadow_ptr;
    assert_eq!(m.read_u64(ptr).unwrap(), 0x90000);
    m.exec_call(0x10008).unwrap();
    m.exec_call(0x10008).unwrap();
    assert_eq!(m.read_u64(0x90000).unwrap(), 0x10004);
    assert_eq!(m.read_u64(0x90008).unwrap(), 0x1000c);
    assert_eq!(m.read_u64(ptr).unwrap(), 0x90010);
    m.exec_ret().unwrap();
    assert!(m.fault().is_none());
    assert_eq!(m.read_u64(ptr).unwrap(), 0x90008);
}

#[test]
fn compact_base_depends_on_seed() {
    let img = assemble(TRIVIAL).unwrap();
    let bases: std::collections::BTreeSet<u64> = (0..20)
        .map(|s| {
            let m = load_program(&img, ProtectionMode::shadow_compact(), s).unwrap();
            m.read_u64(m.layout().shadow_ptr).unwrap()
        })
        .collect();
    assert!(bases.len() > 15);
    assert!(bases.iter().all(|b| b % 8 == 0 && *b >= 0x80000 && *b < 0xc0000));
}

#[test]
fn zipper_call_leaves_top() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 5);
    let t = m.chain_top();
    m.exec_call(0x10008).unwrap();
    assert_eq!(m.chain_top(), t);
}

#[test]
fn zip_matches_oracle() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 11);
    let t0 = m.chain_top();
    m.set_reg(Reg::RA, 0x10004);
    let used = m.exec_zip();
    assert_eq!(used.ops, 1);
    assert_eq!(m.chain_top(), oracle(&m, 0x10004, t0));
    assert_eq!(m.unpack_ra(m.reg(Reg::RA)), (0x10004, t0));
    assert_eq!(m.reg(Reg::RA) >> 40, t0.0);
}

#[test]
fn zip_depends_on_prior_top() {
    let a = {
        let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 11);
        m.set_reg(Reg::RA, 0x10004);
        m.exec_zip();
        m.set_reg(Reg::RA, 0x10008);
        m.exec_zip();
        m.chain_top()
    };
    let b = {
        let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 11);
        m.set_reg(Reg::RA, 0x1000c);
        m.exec_zip();
        m.set_reg(Reg::RA, 0x10008);
        m.exec_zip();
        m.chain_top()
    };
    assert_ne!(a, b);
}

#[test]
fn zip_unzip_round_trip() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 3);
    let t0 = m.chain_top();
    m.set_reg(Reg::RA, 0x10004);
    m.exec_zip();
    m.exec_unzip();
    assert!(m.fault().is_none());
    assert_eq!(m.chain_top(), t0);
    assert_eq!(m.reg(Reg::RA), 0x10004);
}

#[test]
fn unzip_detects_flipped_address_bit() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 3);
    m.set_reg(Reg::RA, 0x10004);
    m.exec_zip();
    let ra = m.reg(Reg::RA) ^ (1 << 5);
    let (addr, field) = m.unpack_ra(ra);
    // sanity: the forged word is not a collision under this key
    assert_ne!(oracle(&m, addr, field), m.chain_top());
    m.set_reg(Reg::RA, ra);
    m.exec_unzip();
    assert_eq!(m.fault().unwrap().kind, FaultKind::ReturnMacMismatch);
}

#[test]
fn unzip_rejects_replay_from_other_path() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 21);
    // Path A: outer return 0x10004, then inner 0x10008.
    m.set_reg(Reg::RA, 0x10004);
    m.exec_zip();
    let outer_a = m.reg(Reg::RA);
    m.set_reg(Reg::RA, 0x10008);
    m.exec_zip();
    let captured = m.reg(Reg::RA);
    m.exec_unzip();
    m.set_reg(Reg::RA, outer_a);
    m.exec_unzip();
    assert!(m.fault().is_none());
    // Path B: different outer frame, same inner function.
    m.set_reg(Reg::RA, 0x1000c);
    m.exec_zip();
    let top_b = m.chain_top();
    m.set_reg(Reg::RA, 0x10008);
    m.exec_zip();
    assert_ne!(m.reg(Reg::RA), captured);
    let (a, f) = m.unpack_ra(captured);
    assert_ne!(oracle(&m, a, f), m.chain_top(), "paths collide under this key");
    assert_ne!(f, top_b);
    m.set_reg(Reg::RA, captured);
    m.exec_unzip();
    assert_eq!(m.fault().unwrap().kind, FaultKind::ReturnMacMismatch);
}

#[test]
fn zip_unzip_are_noops_elsewhere() {
    for mode in [ProtectionMode::Baseline, ProtectionMode::shadow_parallel(), ProtectionMode::shadow_compact()] {
        let mut m = machine(TRIVIAL, mode, 3);
        m.set_reg(Reg::RA, 0x10004);
        let t = m.chain_top();
        assert_eq!(m.exec_zip(), MacUse::NONE);
        assert_eq!(m.reg(Reg::RA), 0x10004);
        m.set_reg(Reg::RA, 0xdead_0000_0001_0004);
        m.exec_unzip();
        assert!(m.fault().is_none());
        assert_eq!(m.chain_top(), t);
    }
}

#[test]
fn ret_goes_to_ra() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 0);
    m.set_reg(Reg::RA, 0x10008);
    m.exec_ret().unwrap();
    assert_eq!(m.pc(), 0x10008);
    m.set_reg(Reg::RA, 0x20000);
    assert!(matches!(m.exec_ret(), Err(VmError::BadControlTarget { .. })));
}

#[test]
fn parallel_shadow_bypassed_when_both_copies_tampered() {
    let mut m = machine(TRIVIAL, ProtectionMode::shadow_parallel(), 0);
    m.exec_call(0x10008).unwrap();
    m.set_reg(Reg::RA, 0x1000c);
    m.exec_ret().unwrap();
    assert_eq!(m.fault().unwrap().kind, FaultKind::ShadowMismatch);

    let mut m = machine(TRIVIAL, ProtectionMode::shadow_parallel(), 0);
    m.exec_call(0x10008).unwrap();
    let sp = m.reg(Reg::SP);
    m.write_u64(sp + DEFAULT_SHADOW_OFFSET, 0x1000c).unwrap();
    m.set_reg(Reg::RA, 0x1000c);
    m.exec_ret().unwrap();
    assert!(m.fault().is_none());
    assert_eq!(m.pc(), 0x1000c);
}

#[test]
fn baseline_follows_tampered_ra() {
    let mut m = machine(TRIVIAL, ProtectionMode::Baseline, 0);
    m.exec_call(0x10008).unwrap();
    m.set_reg(Reg::RA, 0x1000c);
    m.exec_ret().unwrap();
    assert_eq!(m.pc(), 0x1000c);
}

fn buf(m: &MachineState) -> u64 {
    m.image().symbol("buf").unwrap()
}

#[test]
fn setjmp_longjmp_round_trip() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 8);
    let t = m.chain_top();
    let b = buf(&m);
    let used = m.exec_setjmp(b).unwrap();
    assert_eq!(used.ops, 2);
    assert_eq!(m.reg(Reg::A0), 0);
    let sp = m.reg(Reg::SP);
    m.set_reg(Reg::SP, sp - 256);
    m.set_reg(Reg::RA, 0x10008);
    m.exec_zip();
    m.exec_longjmp(b, 0).unwrap();
    assert!(m.fault().is_none());
    assert_eq!(m.chain_top(), t);
    assert_eq!(m.reg(Reg::SP), sp);
    assert_eq!(m.pc(), 0x10004);
    assert_eq!(m.reg(Reg::A0), 1);
}

#[test]
fn jump_buffer_auth_matches_oracle() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 8);
    let b = buf(&m);
    m.exec_setjmp(b).unwrap();
    let jb = m.read_jump_buffer(b).unwrap();
    let inner = oracle(&m, jb.saved_pc, m.chain_top());
    let auth = oracle(&m, jb.saved_sp, inner);
    assert_eq!(jb.auth, auth.0);
    assert_eq!(jb.saved_top, m.chain_top().0);
    assert_eq!(jb.saved_pc, 0x10004);
    assert_eq!(jb.saved_ssp, 0);
}

#[test]
fn jump_buffer_unprotected_elsewhere() {
    for mode in [ProtectionMode::Baseline, ProtectionMode::shadow_parallel(), ProtectionMode::shadow_compact()] {
        let mut m = machine(TRIVIAL, mode, 8);
        let b = buf(&m);
        assert_eq!(m.exec_setjmp(b).unwrap(), MacUse::NONE);
        let jb = m.read_jump_buffer(b).unwrap();
        assert_eq!((jb.saved_top, jb.auth), (0, 0));
        m.write_u64(b, 0x10008).unwrap();
        m.exec_longjmp(b, 7).unwrap();
        assert!(m.fault().is_none());
        assert_eq!((m.pc(), m.reg(Reg::A0)), (0x10008, 7));
    }
}

#[test]
fn longjmp_detects_tampered_top() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 8);
    let b = buf(&m);
    m.exec_setjmp(b).unwrap();
    let jb = m.read_jump_buffer(b).unwrap();
    let forged = (jb.saved_top + 1) & 0xff_ffff;
    let inner = oracle(&m, jb.saved_pc, MacValue(forged));
    assert_ne!(oracle(&m, jb.saved_sp, inner).0, jb.auth);
    m.write_u64(b + 16, forged).unwrap();
    m.exec_longjmp(b, 1).unwrap();
    assert_eq!(m.fault().unwrap().kind, FaultKind::JumpBufferMacMismatch);
}

#[test]
fn longjmp_rejects_noncanonical_fields() {
    for (word, value) in [(0u64, 0x10004 | 1 << 50), (1, 1 << 45), (2, 1 << 30), (3, 1 << 30), (4, 8)] {
        let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 8);
        let b = buf(&m);
        m.exec_setjmp(b).unwrap();
        let old = m.read_u64(b + 8 * word).unwrap();
        m.write_u64(b + 8 * word, old | value).unwrap();
        m.exec_longjmp(b, 1).unwrap();
        assert_eq!(m.fault().unwrap().kind, FaultKind::JumpBufferMacMismatch, "word {word}");
    }
}

#[test]
fn setjmp_bounds() {
    let mut m = machine(TRIVIAL, ProtectionMode::Zipper, 8);
    let end = m.layout().mem_size;
    assert!(matches!(m.exec_setjmp(end - 8), Err(VmError::MemoryOutOfBounds { .. })));
    assert!(matches!(m.exec_longjmp(end - 8, 0), Err(VmError::MemoryOutOfBounds { .. })));
}

#[test]
fn factorial_under_every_mode() {
    let img = Arc::new(assemble(crate::workloads::FACTORIAL).unwrap());
    let mut results = Vec::new();
    for mode in ProtectionMode::all() {
        let mut m = MachineState::new(img.clone(), mode, 4, VmConfig::default()).unwrap();
        let r = m.run(1_000_000).unwrap();
        assert_eq!(r.status, RunStatus::Halted, "{mode}");
        assert_eq!(r.exit_code, Some(factorial(10)));
        let mut regs = *m.regs();
        regs[Reg::RA.index()] &= m.widths().addr_mask();
        results.push((regs, m.data_segment().to_vec(), r.output, r.cycles));
    }
    for r in &results[1..] {
        assert_eq!((r.0, &r.1, &r.2), (results[0].0, &results[0].1, &results[0].2));
    }
    assert!(results[3].3 > results[0].3);
}

#[test]
fn zero_cycle_budget() {
    let mut m = machine(crate::workloads::FACTORIAL, ProtectionMode::Zipper, 0);
    let r = m.run(0).unwrap();
    assert_eq!((r.cycles, r.instructions, r.status), (0, 0, RunStatus::CycleLimit));
}

#[test]
fn step_after_halt_is_refused() {
    let mut m = machine("_start: halt", ProtectionMode::Baseline, 0);
    m.run(10).unwrap();
    assert_eq!(m.step(), Err(VmError::NotRunnable));
}

#[test]
fn trace_format_is_stable() {
    let img = Arc::new(assemble("_start:\n call f\n halt\n .func f\n ret\n .endfunc").unwrap());
    let cfg = VmConfig { trace: true, ..VmConfig::default() };
    let r = MachineState::new(img, ProtectionMode::Zipper, 0, cfg).unwrap().run(100).unwrap();
    let t = r.trace.unwrap();
    assert_eq!(t[0], "         0 0x00010000 call     .");
    assert_eq!(t[1], "         1 0x00010008 ret      .");
    assert_eq!(t[2], "         2 0x00010004 halt     .");
}

#[test]
fn fault_is_terminal_and_flagged() {
    let src = "_start:\n call f\n halt\n .func f 8\n li t0, 0x10008\n sd t0, 8(sp)\n call g\n ret\n .endfunc\n .func g\n ret\n .endfunc";
    let img = Arc::new(assemble(src).unwrap());
    let cfg = VmConfig { trace: true, ..VmConfig::default() };
    let mut m = MachineState::new(img, ProtectionMode::Zipper, 0, cfg).unwrap();
    let r = m.run(1000).unwrap();
    assert_eq!(r.status, RunStatus::Faulted);
    let f = r.fault.unwrap();
    assert_eq!(f.kind, FaultKind::ReturnMacMismatch);
    assert_eq!(f.cycle_at_fault, r.cycles);
    assert!(r.trace.unwrap().last().unwrap().ends_with("unzip    F"));
    assert_eq!(m.image().instruction_at(f.pc_at_fault), Some(&Instruction::Unzip));
    assert_eq!(m.step(), Err(VmError::NotRunnable));
}

#[test]
fn run_result_json_round_trip() {
    let r = machine(crate::workloads::FACTORIAL, ProtectionMode::Zipper, 0).run(100_000).unwrap();
    let j = serde_json::to_string(&r).unwrap();
    assert!(j.contains("\"mode\":\"zipper\""));
    assert_eq!(serde_json::from_str::<RunResult>(&j).unwrap(), r);
}

/// Every opcode, with random register and memory contents: the key never
/// shows up in a register or in memory, and `top` only moves for the four
/// chain instructions.
#[test]
fn opcode_audit_top_and_key_unreachable() {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for op in Opcode::ALL {
        for trial in 0..50 {
            let regs: Vec<u64> = (0..NUM_REGS).map(|_| rng.random_range(0x40000..0x7f000u64) & !7).collect();
            let instr = sample_instruction(op, &mut rng);
            let img = ProgramImage {
                code_base: crate::asm::CODE_BASE,
                code: vec![instr, Instruction::Nop, Instruction::Nop, Instruction::Halt],
                data_base: 0x11000,
                data: vec![0; 64],
                symbols: Default::default(),
                entry: crate::asm::CODE_BASE,
                functions: vec![],
            };
            let mut m = MachineState::new(Arc::new(img), ProtectionMode::Zipper, trial, VmConfig::default()).unwrap();
            for (i, v) in regs.iter().enumerate().skip(1) {
                m.set_reg(Reg::new(i as u8).unwrap(), *v);
            }
            // a plausible return address so RET and LONGJMP have somewhere to go
            m.set_reg(Reg::RA, 0x10008);
            let key = m.inspect_key().0;
            let top = m.chain_top();
            let before = m.memory().to_vec();
            let _ = m.step();
            assert!(m.regs().iter().all(|r| *r != key), "{op:?} leaked key to a register");
            for i in (0..before.len()).filter(|i| before[*i] != m.memory()[*i]) {
                assert_ne!(m.read_u64((i & !7) as u64).unwrap(), key, "{op:?} leaked key to memory");
            }
            let chain_op = matches!(op, Opcode::Zip | Opcode::Unzip | Opcode::SetJmp | Opcode::LongJmp);
            if !chain_op {
                assert_eq!(m.chain_top(), top, "{op:?} moved top");
            }
        }
    }
}

fn sample_instruction(op: Opcode, rng: &mut ChaCha8Rng) -> Instruction {
    use rand::Rng;
    let r = |rng: &mut ChaCha8Rng| Reg::new(rng.random_range(3..16)).unwrap();
    let word = match op {
        Opcode::Jmp | Opcode::Call => op as u32 | (0x10008 >> 2) << 8,
        _ => {
            let mut w = op as u32;
            if matches!(op, Opcode::Out | Opcode::SetJmp | Opcode::LongJmp) {
                w |= (r(rng).index() as u32) << 12;
                if op == Opcode::LongJmp {
                    w |= (r(rng).index() as u32) << 16;
                }
            } else if !matches!(op, Opcode::Halt | Opcode::Nop | Opcode::Ret | Opcode::Zip | Opcode::Unzip) {
                w |= (r(rng).index() as u32) << 8;
                if op != Opcode::Lui {
                    w |= (r(rng).index() as u32) << 12;
                }
                let is_alu = (0x10..=0x19).contains(&(op as u8));
                if is_alu {
                    w |= (r(rng).index() as u32) << 16;
                } else {
                    w |= (rng.random_range(0..64u32) & !7) << 16;
                }
            }
            w
        }
    };
    Instruction::decode(word).unwrap_or_else(|e| panic!("{op:?}: {e}"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// k nested ZIPs undone by k UNZIPs return top to its initial value.
    #[test]
    fn chain_integrity(seed in any::<u64>(), addrs in prop::collection::vec(0u64..0x4000, 1..64)) {
        let mut m = machine(TRIVIAL, ProtectionMode::Zipper, seed);
        let t0 = m.chain_top();
        let mut spilled = Vec::new();
        for a in &addrs {
            m.set_reg(Reg::RA, 0x10000 + a * 4);
            m.exec_zip();
            spilled.push(m.reg(Reg::RA));
        }
        for w in spilled.into_iter().rev() {
            m.set_reg(Reg::RA, w);
            m.exec_unzip();
            prop_assert!(m.fault().is_none());
        }
        prop_assert_eq!(m.chain_top(), t0);
    }

    /// The cache never changes what the machine computes.
    #[test]
    fn cache_is_transparent(seed in any::<u64>()) {
        let img = Arc::new(assemble(crate::workloads::DEEP_RECURSION).unwrap());
        let on = run_image(img.clone(), ProtectionMode::Zipper, seed, VmConfig::default(), u64::MAX).unwrap();
        let off_cfg = VmConfig { cache_enabled: false, ..VmConfig::default() };
        let off = run_image(img, ProtectionMode::Zipper, seed, off_cfg, u64::MAX).unwrap();
        prop_assert_eq!((on.exit_code, on.data_digest, on.instructions), (off.exit_code, off.data_digest, off.instructions));
        prop_assert!(on.cycles <= off.cycles);
    }
}
