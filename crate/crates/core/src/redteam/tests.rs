use super::*;

fn run(name: &str, mode: ProtectionMode, seed: u64) -> AttackReport {
    let s = builtin_scenarios().into_iter().find(|s| s.name == name).unwrap();
    let mut vm = MachineState::new(victim_image(), mode, seed, VmConfig::default()).unwrap();
    attach_and_run(&mut vm, &s, ATTACK_MAX_CYCLES).unwrap()
}

fn zipper_fault() -> Verdict {
    Verdict::Detected { fault: FaultKind::ReturnMacMismatch, pc: 0 }
}

fn same_kind(a: &Verdict, b: &Verdict) -> bool {
    match (a, b) {
        (Verdict::Detected { fault: x, .. }, Verdict::Detected { fault: y, .. }) => x == y,
        _ => a.label() == b.label(),
    }
}

#[test]
fn library_has_the_expected_scenarios() {
    let names: Vec<String> = builtin_scenarios().into_iter().map(|s| s.name).collect();
    assert_eq!(
        names,
        [
            "direct_overwrite",
            "rop_chain_overwrite",
            "replay_old_path",
            "forge_with_leaked_key",
            "parallel_shadow_attack",
            "compact_shadow_attack",
            "brute_force_top",
        ]
    );
}

#[test]
fn victim_runs_clean_in_every_mode() {
    for mode in ProtectionMode::all() {
        let r = MachineState::new(victim_image(), mode, 3, VmConfig::default()).unwrap().run(ATTACK_MAX_CYCLES).unwrap();
        assert_eq!(r.status, RunStatus::Halted, "{mode}");
        assert_eq!(r.output, vec![1, 2], "{mode}");
    }
}

#[test]
fn baseline_falls_to_every_scenario() {
    for s in builtin_scenarios() {
        let r = run(&s.name, ProtectionMode::Baseline, 1);
        assert_eq!(r.verdict, Verdict::Bypassed, "{}: {:?}", s.name, r);
    }
}

#[test]
fn zipper_detects_every_scenario() {
    for s in builtin_scenarios() {
        let r = run(&s.name, ProtectionMode::Zipper, 1);
        assert!(same_kind(&r.verdict, &zipper_fault()), "{}: {:?}", s.name, r);
    }
}

#[test]
fn shadow_stacks_fall_to_their_layout_attacks() {
    let parallel = ProtectionMode::shadow_parallel();
    let compact = ProtectionMode::shadow_compact();
    assert_eq!(run("parallel_shadow_attack", parallel, 1).verdict, Verdict::Bypassed);
    assert_eq!(run("compact_shadow_attack", compact, 1).verdict, Verdict::Bypassed);
    let shadow = Verdict::Detected { fault: FaultKind::ShadowMismatch, pc: 0 };
    for name in ["direct_overwrite", "rop_chain_overwrite", "replay_old_path", "forge_with_leaked_key"] {
        for m in [parallel, compact] {
            assert!(same_kind(&run(name, m, 1).verdict, &shadow), "{name} under {m}");
        }
    }
    assert!(same_kind(&run("parallel_shadow_attack", compact, 1).verdict, &shadow));
    assert!(same_kind(&run("compact_shadow_attack", parallel, 1).verdict, &shadow));
}

#[test]
fn replay_is_caught_at_worker() {
    let r = run("replay_old_path", ProtectionMode::Zipper, 9);
    let Verdict::Detected { pc, .. } = r.verdict else { panic!("{r:?}") };
    let worker = victim_image().function("worker").unwrap().clone();
    assert!(pc >= worker.start && pc < worker.end, "{pc:#x}");
}

#[test]
fn missed_trigger_fails() {
    let s = parse_scenarios("scenario late\n goal win\n at vuln_exit#3\n write-word slot0 @win\nend").unwrap().remove(0);
    let mut vm = MachineState::new(victim_image(), ProtectionMode::Baseline, 0, VmConfig::default()).unwrap();
    let r = attach_and_run(&mut vm, &s, ATTACK_MAX_CYCLES).unwrap();
    assert!(matches!(&r.verdict, Verdict::Failed { reason } if reason.contains("never triggered")), "{r:?}");
    assert_eq!(r.stages_fired, 0);
}

#[test]
fn unknown_symbols_are_rejected_before_running() {
    let s = parse_scenarios("scenario x\n goal nowhere\n at vuln_exit\n write-word slot0 @win\nend").unwrap().remove(0);
    let mut vm = MachineState::new(victim_image(), ProtectionMode::Baseline, 0, VmConfig::default()).unwrap();
    assert_eq!(attach_and_run(&mut vm, &s, 100).unwrap_err(), ScenarioError::UnknownSymbol("nowhere".into()));
    assert_eq!(vm.cycles(), 0);
}

#[test]
fn refused_writes_are_noted_not_fatal() {
    let s = parse_scenarios("scenario x\n goal win\n at vuln_exit\n write-word 0x10000 0\n write-word 0xffffffffff 0\nend")
        .unwrap()
        .remove(0);
    let mut vm = MachineState::new(victim_image(), ProtectionMode::Baseline, 0, VmConfig::default()).unwrap();
    let r = attach_and_run(&mut vm, &s, ATTACK_MAX_CYCLES).unwrap();
    assert_eq!(r.notes.len(), 2, "{:?}", r.notes);
    assert!(matches!(r.verdict, Verdict::Failed { .. }));
}

#[test]
fn cycle_trigger_fires() {
    let s = parse_scenarios("scenario x\n goal win\n at cycle 5\n write-reg t0 7\n read sp 8\nend").unwrap().remove(0);
    let mut vm = MachineState::new(victim_image(), ProtectionMode::Baseline, 0, VmConfig::default()).unwrap();
    let r = attach_and_run(&mut vm, &s, ATTACK_MAX_CYCLES).unwrap();
    assert_eq!(r.stages_fired, 1);
    assert!(r.notes[0].starts_with("read "), "{:?}", r.notes);
}

#[test]
fn guesses_are_seed_deterministic() {
    let a = run("brute_force_top", ProtectionMode::Zipper, 77);
    let b = run("brute_force_top", ProtectionMode::Zipper, 77);
    assert_eq!(a, b);
}

#[test]
fn matrix_shape_and_summary() {
    let modes = ProtectionMode::all();
    let seeds: Vec<u64> = (0..4).collect();
    let scenarios = builtin_scenarios();
    let m = run_matrix(victim_image(), &scenarios, &modes, &seeds, VmConfig::default(), Execution::default()).unwrap();
    assert_eq!(m.reports.len(), scenarios.len() * modes.len() * seeds.len());
    let base = m.summary_for(ProtectionMode::Baseline).unwrap();
    assert_eq!((base.secured, base.bypassed), (0, scenarios.len()));
    let zip = m.summary_for(ProtectionMode::Zipper).unwrap();
    assert_eq!((zip.secured, zip.bypassed, zip.benign_faults), (scenarios.len(), 0, 0));
    assert_eq!(m.secures_deterministic(ProtectionMode::Zipper), Some(true));
    let shadow = m.shadow_stacks.as_ref().unwrap();
    assert_eq!((shadow.secured, shadow.bypassed), (scenarios.len() - 2, 2));
    assert_eq!(m.secures_deterministic(ProtectionMode::shadow_parallel()), Some(false));
    let t = m.table();
    assert!(t.contains("direct_overwrite") && t.contains("brute_force_top*"), "{t}");
    let seq = run_matrix(victim_image(), &scenarios, &modes, &seeds, VmConfig::default(), Execution::Sequential).unwrap();
    assert_eq!(seq, m);
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<DetectionMatrix>(&json).unwrap(), m);
}

#[test]
fn bad_mode_configuration_is_a_setup_error() {
    let cfg = VmConfig { mem_size: 1 << 20, ..VmConfig::default() };
    let bad = ProtectionMode::ShadowParallel { offset: 8 };
    let e = run_matrix(victim_image(), &builtin_scenarios(), &[bad], &[0], cfg, Execution::Sequential).unwrap_err();
    assert!(matches!(e, AttackError::Setup { .. }));
}
