use pkscope::deprivilege::{
    corpus, rewrite, scan, verify_equivalence, Class, RewriteOptions, StubTable, Strategy, TargetSeq, UnintendedKind,
    VerifySetup,
};
use pkscope::isa::{decode_all, encode_all, run, Cpu, DirectPrivilege, FlatBus, Instr, Op, Reg, RunOutcome};
use proptest::prelude::*;
use std::collections::BTreeSet;

const STUB: u32 = 0x8000;

fn stubs() -> StubTable {
    StubTable::new(STUB)
}

/// Independent oracle: every window of two bytes equal to a target
/// sequence, with the instruction boundaries from the decoder deciding
/// whether the window straddles two instructions.
fn naive_windows(bytes: &[u8]) -> Vec<(usize, bool)> {
    let starts: BTreeSet<usize> = decode_all(bytes).unwrap().iter().map(|(o, _)| *o).collect();
    let targets: [[u8; 2]; 4] = [[0x0F, 0x30], [0x0F, 0x22], [0x0F, 0x20], [0x0F, 0x01]];
    (0..bytes.len().saturating_sub(1))
        .filter(|&i| targets.contains(&[bytes[i], bytes[i + 1]]))
        .map(|i| (i, starts.contains(&(i + 1))))
        .collect()
}

#[test]
fn exact_opcode_is_intended() {
    let occ = scan(&[0x0F, 0x30]).unwrap();
    assert_eq!(occ.len(), 1);
    assert_eq!((occ[0].offset, occ[0].seq, occ[0].class), (0, TargetSeq::Wrmsr, Class::Intended));
}

#[test]
fn boundary_case_matches_oracle() {
    let b = [0xB0, 0x0F, 0x30, 0xC0];
    let occ = scan(&b).unwrap();
    assert_eq!(naive_windows(&b), vec![(1, true)]);
    assert_eq!(occ.len(), 1);
    assert_eq!(occ[0].offset, 1);
    assert_eq!(occ[0].class, Class::Unintended(UnintendedKind::SpansBoundary));
}

#[test]
fn immediate_case_matches_oracle() {
    let b = [0xB8, 0x0F, 0x30, 0x00, 0x00];
    assert_eq!(naive_windows(&b), vec![(1, false)]);
    let occ = scan(&b).unwrap();
    assert_eq!(occ.len(), 1);
    assert_eq!(occ[0].offset, 1);
    assert_eq!(occ[0].class, Class::Unintended(UnintendedKind::InImmediate));
}

fn run_flat(code: &[u8], cpu: &mut Cpu) -> RunOutcome {
    let base = 0x1000;
    let mut bus = FlatBus::new(base, code.to_vec(), 0x10_0000, 0x100);
    cpu.ip = base;
    run(cpu, &mut bus, &mut DirectPrivilege, base + code.len() as u32, 100)
}

#[test]
fn boundary_rewrite_inserts_one_nop() {
    let b = [0xB0, 0x0F, 0x30, 0xC0];
    let out = rewrite(&b, stubs(), RewriteOptions::default()).unwrap();
    assert_eq!(out.bytes, vec![0xB0, 0x0F, 0x90, 0x30, 0xC0]);
    assert_eq!(out.plan.steps[0].strategy, Strategy::InsertNop);
    let (mut a, mut c) = (Cpu::default(), Cpu::default());
    a.set_reg(Reg::Rax, 0x1234_5678);
    c.set_reg(Reg::Rax, 0x1234_5678);
    assert!(matches!(run_flat(&b, &mut a), RunOutcome::Halted { .. }));
    assert!(matches!(run_flat(&out.bytes, &mut c), RunOutcome::Halted { .. }));
    assert_eq!(a.reg(Reg::Rax) & 0xFF, c.reg(Reg::Rax) & 0xFF);
    assert_eq!(a.gpr, c.gpr);
}

#[test]
fn immediate_rewrite_is_two_clean_instructions() {
    let b = [0xB8, 0x0F, 0x30, 0x00, 0x00];
    let out = rewrite(&b, stubs(), RewriteOptions::default()).unwrap();
    assert!(scan(&out.bytes).unwrap().is_empty());
    let instrs = decode_all(&out.bytes).unwrap();
    assert_eq!(instrs.len(), 2);
    assert_eq!(out.plan.steps[0].strategy, Strategy::DataAdjust);
    let mut cpu = Cpu::default();
    cpu.set_reg(Reg::Rax, u64::MAX);
    assert!(matches!(run_flat(&out.bytes, &mut cpu), RunOutcome::Halted { .. }));
    assert_eq!(cpu.reg(Reg::Rax), 0x300F);
}

#[test]
fn intended_wrmsr_becomes_stub_call_with_same_effect() {
    let prog = encode_all(&[
        Instr::new(Op::MovImm32 { dst: Reg::Rcx, imm: 0x6E1 }),
        Instr::new(Op::MovImm32 { dst: Reg::Rax, imm: 0x5555_5554 }),
        Instr::new(Op::MovImm32 { dst: Reg::Rdx, imm: 0 }),
        Instr::new(Op::Wrmsr),
    ]);
    let out = rewrite(&prog, stubs(), RewriteOptions::default()).unwrap();
    let ops: Vec<Op> = decode_all(&out.bytes).unwrap().into_iter().map(|(_, i)| i.op).collect();
    assert!(matches!(ops.last(), Some(Op::Call { .. })));
    assert!(ops.iter().all(|o| o.privileged().is_none()));
    assert_eq!(out.stubs.ops.len(), 1);

    let setup = VerifySetup::default();
    let mut direct = Cpu::with_pkrs(0);
    let mut bus = FlatBus::new(setup.code_base, prog.clone(), setup.data_base, 0x100);
    direct.ip = setup.code_base;
    run(&mut direct, &mut bus, &mut DirectPrivilege, setup.code_base + prog.len() as u32, 100);

    let mut stubbed = Cpu::with_pkrs(0);
    let mut bus = FlatBus::new(setup.code_base, out.bytes.clone(), setup.data_base, 0x100);
    stubbed.ip = setup.code_base;
    let r = run(
        &mut stubbed,
        &mut bus,
        &mut pkscope::deprivilege::StubHooks { stubs: &out.stubs },
        setup.code_base + out.bytes.len() as u32,
        100,
    );
    assert!(matches!(r, RunOutcome::Halted { .. }));
    assert_eq!(direct.pkrs(), 0x5555_5554);
    assert_eq!(stubbed.pkrs(), direct.pkrs());
}

#[test]
fn identity_and_nop_insertion_pass_verification() {
    let setup = VerifySetup::default();
    let b = [0xB0, 0x0F, 0x30, 0xC0];
    let v = verify_equivalence(&b, &b, &stubs(), &BTreeSet::new(), 100, 1, &setup).unwrap();
    assert!(v.is_pass());
    let out = rewrite(&b, stubs(), RewriteOptions::default()).unwrap();
    let v = verify_equivalence(&b, &out.bytes, &out.stubs, &out.plan.scratch, 100, 2, &setup).unwrap();
    assert!(v.is_pass());
}

#[test]
fn broken_fixup_constant_is_caught() {
    let b = [0xB8, 0x0F, 0x30, 0x00, 0x00];
    let out = rewrite(&b, stubs(), RewriteOptions::default()).unwrap();
    let mut instrs: Vec<Instr> = decode_all(&out.bytes).unwrap().into_iter().map(|(_, i)| i).collect();
    if let Op::AluImm { imm, .. } = &mut instrs[1].op {
        *imm ^= 1;
    } else {
        panic!("expected an arithmetic fix-up, got {}", instrs[1].op);
    }
    let broken = encode_all(&instrs);
    let v = verify_equivalence(&b, &broken, &out.stubs, &out.plan.scratch, 10, 3, &VerifySetup::default()).unwrap();
    assert!(!v.is_pass());
}

#[test]
fn displacement_and_sib_cases() {
    // mov [rsi+0x300F], eax
    let disp = [0x89, 0x86, 0x0F, 0x30, 0x00, 0x00];
    // mov [rdi+rcx*1+0x30], eax ; mov eax, 0 (rdi/rcx stay live)
    let sib = [0x89, 0x44, 0x0F, 0x30, 0x01, 0xCF];
    let setup = VerifySetup::default();
    for b in [&disp[..], &sib[..]] {
        let out = rewrite(b, stubs(), RewriteOptions::default()).unwrap();
        assert!(scan(&out.bytes).unwrap().is_empty(), "{:02x?}", out.bytes);
        let v = verify_equivalence(b, &out.bytes, &out.stubs, &out.plan.scratch, 100, 4, &setup).unwrap();
        assert!(v.is_pass(), "{:?}", v);
    }
}

#[test]
fn reorder_swaps_independent_pair() {
    // mov bl, 0x0F ; xor al, dl  (30 d0): disjoint registers
    let b = [0xB3, 0x0F, 0x30, 0xD0];
    let opts = RewriteOptions {
        reorder: true,
        ..RewriteOptions::default()
    };
    let out = rewrite(&b, stubs(), opts).unwrap();
    assert_eq!(out.bytes, vec![0x30, 0xD0, 0xB3, 0x0F]);
    assert_eq!(out.plan.steps[0].strategy, Strategy::Reorder);
    let v = verify_equivalence(&b, &out.bytes, &out.stubs, &BTreeSet::new(), 100, 5, &VerifySetup::default()).unwrap();
    assert!(v.is_pass());
}

#[test]
fn corpus_rewrites_are_clean_equivalent_and_idempotent() {
    let setup = VerifySetup::default();
    for seed in 0..60 {
        let p = corpus::random_program(seed, 64);
        let out = rewrite(&p, stubs(), RewriteOptions::default()).unwrap_or_else(|e| panic!("seed {}: {}", seed, e));
        assert!(scan(&out.bytes).unwrap().is_empty(), "seed {}", seed);
        let again = rewrite(&out.bytes, stubs(), RewriteOptions::default()).unwrap();
        assert_eq!(again.bytes, out.bytes, "seed {}", seed);
        let v = verify_equivalence(&p, &out.bytes, &out.stubs, &out.plan.scratch, 20, seed, &setup).unwrap();
        assert!(v.is_pass(), "seed {}: {:?}", seed, v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scan_agrees_with_byte_window_oracle(seed in any::<u64>()) {
        let p = corpus::random_program(seed, 64);
        let occ = scan(&p).unwrap();
        let naive = naive_windows(&p);
        prop_assert_eq!(occ.len(), naive.len());
        for (o, (off, spans)) in occ.iter().zip(naive) {
            prop_assert_eq!(o.offset, off);
            prop_assert_eq!(o.class == Class::Unintended(UnintendedKind::SpansBoundary), spans);
        }
        prop_assert!(occ.windows(2).all(|w| w[0].offset < w[1].offset));
    }

    #[test]
    fn rewrite_progress_is_monotone(seed in any::<u64>()) {
        let p = corpus::random_program(seed, 64);
        if let Ok(out) = rewrite(&p, stubs(), RewriteOptions::default()) {
            prop_assert!(out.plan.iterations <= pkscope::deprivilege::MAX_ITERATIONS);
            prop_assert!(out.plan.progress.windows(2).all(|w| w[1] < w[0]));
            prop_assert_eq!(*out.plan.progress.last().unwrap(), (0, 0));
        }
    }
}
