use iced_x86::{Decoder, DecoderOptions, Instruction, Mnemonic, OpKind, Register};
use pkscope::deprivilege::corpus;
use pkscope::isa::{
    decode, decode_all, encode, encode_all, listing, reencode, step, AluOp, BranchTarget, Bus, Cpu, DecodeError,
    Deprived, DirectPrivilege, FlatBus, Instr, MemRef, Node, Op, PrivOpcode, PrivilegeHooks, Reg, Reg8, Rm, Rm8,
    StepFault, StepOutcome, TableOp,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BASE: u32 = 0x1000;

// An independent disassembler (iced-x86, 64-bit mode) serves as the oracle
// for lengths, mnemonics and operands.

fn iced_at(bytes: &[u8], offset: usize) -> Instruction {
    let mut d = Decoder::with_ip(64, &bytes[offset..], BASE as u64 + offset as u64, DecoderOptions::NONE);
    d.decode()
}

fn r64(r: Reg) -> Register {
    [Register::RAX, Register::RCX, Register::RDX, Register::RBX, Register::RSP, Register::RBP, Register::RSI, Register::RDI]
        [r.index() as usize]
}

fn r32(r: Reg) -> Register {
    [Register::EAX, Register::ECX, Register::EDX, Register::EBX, Register::ESP, Register::EBP, Register::ESI, Register::EDI]
        [r.index() as usize]
}

fn r8(r: Reg8) -> Register {
    [Register::AL, Register::CL, Register::DL, Register::BL, Register::AH, Register::CH, Register::DH, Register::BH]
        [r.index() as usize]
}

fn cr(n: u8) -> Register {
    match n {
        0 => Register::CR0,
        2 => Register::CR2,
        3 => Register::CR3,
        4 => Register::CR4,
        8 => Register::CR8,
        _ => Register::None,
    }
}

#[derive(Debug, PartialEq)]
enum Operand {
    Reg(Register),
    Imm(u64),
    Mem { base: Register, index: Register, scale: u32, disp: u64 },
    Target(u64),
}

fn mem(m: &MemRef) -> Operand {
    Operand::Mem {
        base: m.base.map_or(Register::None, r64),
        index: m.index.map_or(Register::None, r64),
        scale: if m.index.is_some() { 1 << m.scale } else { 1 },
        disp: m.disp.value() as i64 as u64,
    }
}

fn rm(x: &Rm, wide: bool) -> Operand {
    match x {
        Rm::Reg(r) => Operand::Reg(if wide { r64(*r) } else { r32(*r) }),
        Rm::Mem(m) => mem(m),
    }
}

/// Mnemonic and operands our decoder claims, in iced's vocabulary.
fn expected(op: &Op, ip: u64, len: u64) -> (Mnemonic, Vec<Operand>) {
    let reg = |r: Reg, wide: bool| Operand::Reg(if wide { r64(r) } else { r32(r) });
    let alu = |o: AluOp| match o {
        AluOp::Add => Mnemonic::Add,
        AluOp::Xor => Mnemonic::Xor,
    };
    match op {
        Op::Nop => (Mnemonic::Nop, vec![]),
        Op::MovImm32 { dst, imm } => (Mnemonic::Mov, vec![reg(*dst, false), Operand::Imm(*imm as u64)]),
        Op::MovImm8 { dst, imm } => (Mnemonic::Mov, vec![Operand::Reg(r8(*dst)), Operand::Imm(*imm as u64)]),
        Op::Mov { wide, dst, src } => (Mnemonic::Mov, vec![rm(dst, *wide), reg(*src, *wide)]),
        Op::Add { wide, dst, src } => (Mnemonic::Add, vec![rm(dst, *wide), reg(*src, *wide)]),
        Op::Xor8 { dst, src } => {
            let d = match dst {
                Rm8::Reg(r) => Operand::Reg(r8(*r)),
                Rm8::Mem(m) => mem(m),
            };
            (Mnemonic::Xor, vec![d, Operand::Reg(r8(*src))])
        }
        Op::AluImm { wide, op, dst, imm } => {
            let v = if *wide { *imm as i32 as i64 as u64 } else { *imm as u64 };
            (alu(*op), vec![rm(dst, *wide), Operand::Imm(v)])
        }
        Op::Push(r) => (Mnemonic::Push, vec![Operand::Reg(r64(*r))]),
        Op::Pop(r) => (Mnemonic::Pop, vec![Operand::Reg(r64(*r))]),
        Op::Jmp { rel, .. } => (Mnemonic::Jmp, vec![Operand::Target((ip + len).wrapping_add(*rel as i64 as u64))]),
        Op::Call { rel } => (Mnemonic::Call, vec![Operand::Target((ip + len).wrapping_add(*rel as i64 as u64))]),
        Op::Ret => (Mnemonic::Ret, vec![]),
        Op::Wrmsr => (Mnemonic::Wrmsr, vec![]),
        Op::Rdmsr => (Mnemonic::Rdmsr, vec![]),
        Op::MovToCr { cr: n, src } => (Mnemonic::Mov, vec![Operand::Reg(cr(*n)), Operand::Reg(r64(*src))]),
        Op::MovFromCr { dst, cr: n } => (Mnemonic::Mov, vec![Operand::Reg(r64(*dst)), Operand::Reg(cr(*n))]),
        Op::SysTable { op, mem: m } => {
            let mn = match op {
                TableOp::Sgdt => Mnemonic::Sgdt,
                TableOp::Sidt => Mnemonic::Sidt,
                TableOp::Lgdt => Mnemonic::Lgdt,
                TableOp::Lidt => Mnemonic::Lidt,
            };
            (mn, vec![mem(m)])
        }
    }
}

fn observed(i: &Instruction) -> (Mnemonic, Vec<Operand>) {
    let ops = (0..i.op_count())
        .map(|k| match i.op_kind(k) {
            OpKind::Register => Operand::Reg(i.op_register(k)),
            OpKind::Memory => Operand::Mem {
                base: i.memory_base(),
                index: i.memory_index(),
                // The scale bits mean nothing without an index register.
                scale: if i.memory_index() == Register::None { 1 } else { i.memory_index_scale() },
                disp: i.memory_displacement64(),
            },
            OpKind::NearBranch64 | OpKind::NearBranch32 | OpKind::NearBranch16 => Operand::Target(i.near_branch_target()),
            _ => Operand::Imm(i.immediate(k)),
        })
        .collect();
    (i.mnemonic(), ops)
}

fn agree_with_oracle(bytes: &[u8]) -> Result<usize, String> {
    let mut n = 0;
    for (off, ins) in decode_all(bytes).map_err(|e| e.to_string())? {
        let o = iced_at(bytes, off);
        if o.is_invalid() {
            return Err(format!("{:#x}: oracle rejects {:02x?}", off, &bytes[off..off + ins.len as usize]));
        }
        if o.len() != ins.len as usize {
            return Err(format!("{:#x}: length {} vs oracle {}", off, ins.len, o.len()));
        }
        let want = expected(&ins.op, BASE as u64 + off as u64, ins.len as u64);
        let got = observed(&o);
        if want != got {
            return Err(format!("{:#x}: {} decoded as {:?}, oracle {:?}", off, ins.op, want, got));
        }
        n += 1;
    }
    Ok(n)
}

#[test]
fn documented_examples() {
    let nop = decode(&[0x90], 0).unwrap();
    assert_eq!((nop.op, nop.len), (Op::Nop, 1));
    let w = decode(&[0x0F, 0x30], 0).unwrap();
    assert_eq!((w.op, w.len), (Op::Wrmsr, 2));
    let b = [0xB8, 0x0F, 0x30, 0x00, 0x00];
    let m = decode(&b, 0).unwrap();
    assert_eq!((m.op, m.len), (Op::MovImm32 { dst: Reg::Rax, imm: 0x300F }, 5));
    let o = iced_at(&b, 0);
    assert_eq!((o.mnemonic(), o.op0_register(), o.immediate32(), o.len()), (Mnemonic::Mov, Register::EAX, 0x300F, 5));
}

#[test]
fn decode_errors() {
    assert!(matches!(decode(&[0x0F], 0), Err(DecodeError::TruncatedInstruction { .. })));
    assert!(matches!(decode(&[0xB8, 1, 2], 0), Err(DecodeError::TruncatedInstruction { .. })));
    assert!(matches!(decode(&[0xCC], 0), Err(DecodeError::UnknownOpcode { byte: 0xCC, .. })));
    // REX.W is accepted on 89/01/81 only.
    assert!(decode(&[0x48, 0xB8, 0, 0, 0, 0], 0).is_err());
    assert!(decode(&[0x41, 0x90], 0).is_err());
}

#[test]
fn corpus_agrees_with_independent_disassembler() {
    let mut total = 0;
    for seed in 0..300 {
        let p = corpus::random_program(seed, 64);
        total += agree_with_oracle(&p).unwrap_or_else(|e| panic!("seed {}: {}", seed, e));
    }
    assert!(total > 5000);
}

#[test]
fn every_register_and_cr_form_agrees() {
    let mut prog = Vec::new();
    for r in Reg::ALL {
        for s in Reg::ALL {
            for wide in [false, true] {
                prog.push(Instr::new(Op::Mov { wide, dst: Rm::Reg(r), src: s }));
                prog.push(Instr::new(Op::Add { wide, dst: Rm::Reg(r), src: s }));
            }
            prog.push(Instr::new(Op::Xor8 {
                dst: Rm8::Reg(Reg8::new(r.index())),
                src: Reg8::new(s.index()),
            }));
        }
        for c in [0u8, 2, 3, 4, 8] {
            prog.push(Instr::new(Op::MovToCr { cr: c, src: r }));
            prog.push(Instr::new(Op::MovFromCr { dst: r, cr: c }));
        }
        prog.push(Instr::new(Op::Push(r)));
        prog.push(Instr::new(Op::Pop(r)));
        prog.push(Instr::new(Op::MovImm32 { dst: r, imm: 0xDEAD_BEEF }));
        prog.push(Instr::new(Op::MovImm8 { dst: Reg8::new(r.index()), imm: 0x7F }));
    }
    for op in [TableOp::Sgdt, TableOp::Sidt, TableOp::Lgdt, TableOp::Lidt] {
        for base in [None, Some(Reg::Rsp), Some(Reg::Rbp), Some(Reg::Rsi)] {
            for disp in [0, 0x7F, -0x80, 0x1234] {
                prog.push(Instr::new(Op::SysTable {
                    op,
                    mem: MemRef::canonical(base, Some(Reg::Rcx), 3, disp),
                }));
                prog.push(Instr::new(Op::SysTable {
                    op,
                    mem: MemRef::canonical(base, None, 0, disp),
                }));
            }
        }
    }
    prog.push(Instr::new(Op::Rdmsr));
    prog.push(Instr::new(Op::Ret));
    let bytes = encode_all(&prog);
    assert_eq!(agree_with_oracle(&bytes).unwrap(), prog.len());
}

#[test]
fn listing_format() {
    let text = listing(&[0xB8, 0x05, 0, 0, 0, 0x0F, 0x30]).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, vec!["0000: b8 05 00 00 00  mov eax, 0x5", "0005: 0f 30  wrmsr"]);
}

// ---------------------------------------------------------------- interpreter

fn step_once(code: &[u8], cpu: &mut Cpu, hooks: &mut dyn PrivilegeHooks) -> Result<StepOutcome, StepFault> {
    let mut bus = FlatBus::new(BASE, code.to_vec(), 0x10_0000, 0x1000);
    cpu.ip = BASE;
    step(cpu, &mut bus, hooks)
}

#[test]
fn mov_imm_sets_accumulator_and_advances() {
    let mut cpu = Cpu::default();
    step_once(&[0xB8, 5, 0, 0, 0], &mut cpu, &mut Deprived).unwrap();
    assert_eq!(cpu.reg(Reg::Rax), 5);
    assert_eq!(cpu.ip, BASE + 5);
}

#[test]
fn deprived_wrmsr_traps_without_effect() {
    let mut cpu = Cpu::with_pkrs(0x5555_5554);
    cpu.set_reg(Reg::Rcx, 0x6E1);
    let before = cpu.clone();
    let r = step_once(&[0x0F, 0x30], &mut cpu, &mut Deprived);
    assert_eq!(r, Err(StepFault::PrivilegeTrap(PrivOpcode::Wrmsr)));
    assert_eq!(cpu.pkrs(), before.pkrs());
}

struct Counting(usize);

impl PrivilegeHooks for Counting {
    fn privileged(&mut self, _: &mut Cpu, _: &mut dyn Bus, _: &Instr) -> Result<(), StepFault> {
        self.0 += 1;
        Ok(())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    /// Any buffer our decoder accepts, the oracle decodes to the same
    /// length, mnemonic and operands; and re-encoding reproduces the bytes.
    #[test]
    fn random_bytes_round_trip_and_agree(bytes in proptest::collection::vec(any::<u8>(), 1..16), lead in 0usize..24) {
        // Bias towards opcodes in the subset.
        let firsts = [0x90, 0xB8, 0xB3, 0x89, 0x01, 0x30, 0x81, 0x48, 0x53, 0x5B, 0xEB, 0xE9, 0xE8, 0xC3, 0x0F, 0x0F, 0x0F, 0x0F, 0x48, 0x48, 0x89, 0x81, 0x01, 0x30];
        let mut b = bytes;
        b[0] = firsts[lead];
        if b.len() > 1 && b[0] == 0x0F {
            b[1] = [0x30, 0x32, 0x22, 0x20, 0x01][b[1] as usize % 5];
        }
        if let Ok(ins) = decode(&b, 0) {
            let used = &b[..ins.len as usize];
            let o = iced_at(used, 0);
            prop_assert!(!o.is_invalid(), "oracle rejects {:02x?}", used);
            prop_assert_eq!(o.len(), ins.len as usize);
            prop_assert_eq!(expected(&ins.op, BASE as u64, ins.len as u64), observed(&o));
            let mut out = Vec::new();
            encode(&ins.op, &mut out);
            prop_assert_eq!(&out[..], used);
        }
    }

    #[test]
    fn corpus_round_trips(seed in any::<u64>()) {
        let p = corpus::random_program(seed, 64);
        let instrs: Vec<Instr> = decode_all(&p).unwrap().into_iter().map(|(_, i)| i).collect();
        prop_assert_eq!(encode_all(&instrs), p.clone());
        let consumed: usize = instrs.iter().map(|i| i.len as usize).sum();
        prop_assert_eq!(consumed, p.len());
        prop_assert_eq!(reencode(&pkscope::isa::lift(&p, BASE).unwrap(), BASE).unwrap(), p);
    }

    /// Every privileged instruction either reaches the hook or traps.
    #[test]
    fn privileged_instructions_never_run_silently(seed in any::<u64>()) {
        let p = corpus::random_program(seed, 64);
        for (off, ins) in decode_all(&p).unwrap() {
            let Some(class) = ins.op.privileged() else { continue };
            let code = &p[off..off + ins.len as usize];
            let mut cpu = Cpu::default();
            prop_assert_eq!(step_once(code, &mut cpu, &mut Deprived), Err(StepFault::PrivilegeTrap(class)));
            let mut c = Counting(0);
            let mut cpu = Cpu::default();
            prop_assert!(matches!(step_once(code, &mut cpu, &mut c), Ok(StepOutcome::Hooked(_))));
            prop_assert_eq!(c.0, 1);
        }
    }

    #[test]
    fn step_is_deterministic(seed in any::<u64>()) {
        let p = corpus::random_program(seed, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Cpu::with_pkrs(rng.gen());
        for r in Reg::ALL {
            a.set_reg(r, rng.gen());
        }
        a.set_reg(Reg::Rsi, 0x10_0000);
        a.set_reg(Reg::Rsp, 0x10_3000);
        let mut b = a.clone();
        let mut bus_a = FlatBus::new(BASE, p.clone(), 0x10_0000, 0x4000);
        let mut bus_b = bus_a.clone();
        a.ip = BASE;
        b.ip = BASE;
        for _ in 0..64 {
            let ra = step(&mut a, &mut bus_a, &mut DirectPrivilege);
            let rb = step(&mut b, &mut bus_b, &mut DirectPrivilege);
            prop_assert_eq!(&ra, &rb);
            prop_assert_eq!(&a, &b);
            if ra.is_err() || a.ip == BASE + p.len() as u32 {
                break;
            }
        }
        prop_assert_eq!(bus_a.data, bus_b.data);
    }
}

// ---------------------------------------------------------------- oracle interpreter

/// A second interpreter, driven by its own instruction table and its own
/// byte encodings, for straight-line register/memory code.
#[derive(Debug, Clone, Copy)]
enum Mini {
    MovImm(u8, u32),
    MovImm8(u8, u8),
    Add32(u8, u8),
    Add64(u8, u8),
    Xor8(u8, u8),
    XorImm(u8, u32),
    Push(u8),
    Pop(u8),
    Store(u8, i8),
}

impl Mini {
    fn random(rng: &mut impl Rng) -> Mini {
        // Register 4 (rsp) and 7 (rdi, the data pointer) are never targets.
        let pick = |rng: &mut dyn rand::RngCore| [0u8, 1, 2, 3, 5, 6][rng.gen_range(0..6)];
        match rng.gen_range(0..9) {
            0 => Mini::MovImm(pick(rng), rng.gen()),
            1 => Mini::MovImm8(rng.gen_range(0..8), rng.gen()),
            2 => Mini::Add32(pick(rng), rng.gen_range(0..8)),
            3 => Mini::Add64(pick(rng), rng.gen_range(0..8)),
            4 => Mini::Xor8(rng.gen_range(0..8), rng.gen_range(0..8)),
            5 => Mini::XorImm(pick(rng), rng.gen()),
            6 => Mini::Push(rng.gen_range(0..8)),
            7 => Mini::Pop(pick(rng)),
            _ => Mini::Store(rng.gen_range(0..8), rng.gen_range(-32i8..32) * 4),
        }
    }

    fn bytes(self) -> Vec<u8> {
        let modrm = |reg: u8, rm: u8| 0xC0 | reg << 3 | rm;
        match self {
            Mini::MovImm(r, v) => [vec![0xB8 + r], v.to_le_bytes().to_vec()].concat(),
            Mini::MovImm8(r, v) => vec![0xB0 + r, v],
            Mini::Add32(d, s) => vec![0x01, modrm(s, d)],
            Mini::Add64(d, s) => vec![0x48, 0x01, modrm(s, d)],
            Mini::Xor8(d, s) => vec![0x30, modrm(s, d)],
            Mini::XorImm(d, v) => [vec![0x81, modrm(6, d)], v.to_le_bytes().to_vec()].concat(),
            Mini::Push(r) => vec![0x50 + r],
            Mini::Pop(r) => vec![0x58 + r],
            // mov [rdi+disp8], r32
            Mini::Store(s, d) => vec![0x89, 0x40 | s << 3 | 7, d as u8],
        }
    }

    fn exec(self, g: &mut [u64; 8], mem: &mut [u8], mem_base: u64) {
        let byte_get = |g: &[u64; 8], r: u8| if r < 4 { g[r as usize] as u8 } else { (g[r as usize - 4] >> 8) as u8 };
        match self {
            Mini::MovImm(r, v) => g[r as usize] = v as u64,
            Mini::MovImm8(r, v) => {
                let (i, sh) = if r < 4 { (r as usize, 0) } else { (r as usize - 4, 8) };
                g[i] = g[i] & !(0xFF << sh) | (v as u64) << sh;
            }
            Mini::Add32(d, s) => g[d as usize] = (g[d as usize] as u32).wrapping_add(g[s as usize] as u32) as u64,
            Mini::Add64(d, s) => g[d as usize] = g[d as usize].wrapping_add(g[s as usize]),
            Mini::Xor8(d, s) => {
                let v = byte_get(g, d) ^ byte_get(g, s);
                Mini::MovImm8(d, v).exec(g, mem, mem_base);
            }
            Mini::XorImm(d, v) => g[d as usize] = (g[d as usize] as u32 ^ v) as u64,
            Mini::Push(r) => {
                let v = g[r as usize];
                g[4] -= 8;
                let o = (g[4] - mem_base) as usize;
                mem[o..o + 8].copy_from_slice(&v.to_le_bytes());
            }
            Mini::Pop(r) => {
                let o = (g[4] - mem_base) as usize;
                g[4] += 8;
                g[r as usize] = u64::from_le_bytes(mem[o..o + 8].try_into().unwrap());
            }
            Mini::Store(s, d) => {
                let o = (g[7] as i64 + d as i64 - mem_base as i64) as usize;
                mem[o..o + 4].copy_from_slice(&(g[s as usize] as u32).to_le_bytes());
            }
        }
    }
}

#[test]
fn ten_instruction_programs_match_the_oracle_interpreter() {
    const DATA: u32 = 0x10_0000;
    for seed in 0..500 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prog: Vec<Mini> = (0..10).map(|_| Mini::random(&mut rng)).collect();
        let code: Vec<u8> = prog.iter().flat_map(|m| m.bytes()).collect();
        let mut g: [u64; 8] = rng.gen();
        g[4] = DATA as u64 + 0x800;
        g[7] = DATA as u64 + 0x100;
        let mut mem: Vec<u8> = (0..0x1000).map(|_| rng.gen()).collect();

        let mut cpu = Cpu::default();
        cpu.gpr = g;
        cpu.ip = BASE;
        let mut bus = FlatBus::new(BASE, code.clone(), DATA, mem.len());
        bus.data.copy_from_slice(&mem);
        for _ in 0..10 {
            step(&mut cpu, &mut bus, &mut Deprived).unwrap_or_else(|e| panic!("seed {}: {}", seed, e));
        }
        for m in &prog {
            m.exec(&mut g, &mut mem, DATA as u64);
        }
        assert_eq!(cpu.ip, BASE + code.len() as u32, "seed {}", seed);
        assert_eq!(cpu.gpr, g, "seed {} {:?}", seed, prog);
        assert_eq!(bus.data, mem, "seed {}", seed);
    }
}

// ---------------------------------------------------------------- layout

#[test]
fn reencode_simple_cases() {
    assert_eq!(reencode(&[Node::plain(Op::Nop)], BASE).unwrap(), vec![0x90]);
    let j = Node {
        op: Op::Jmp { rel: 0, short: true },
        target: Some(BranchTarget::Label(1)),
    };
    assert_eq!(reencode(&[j], BASE).unwrap(), vec![0xEB, 0x00]);
}

#[test]
fn short_jump_is_promoted_when_it_outgrows_rel8() {
    // jmp over 127 bytes of nops: exactly fits rel8.
    let mut nodes = vec![Node {
        op: Op::Jmp { rel: 0, short: true },
        target: Some(BranchTarget::Label(128)),
    }];
    nodes.extend((0..127).map(|_| Node::plain(Op::Nop)));
    nodes.push(Node::plain(Op::Ret));
    let fits = reencode(&nodes, BASE).unwrap();
    assert_eq!(&fits[..2], &[0xEB, 0x7F]);

    // Two more nops push the displacement to 129.
    let mut grown = nodes.clone();
    for _ in 0..2 {
        grown.insert(1, Node::plain(Op::Nop));
    }
    if let Some(BranchTarget::Label(l)) = &mut grown[0].target {
        *l += 2;
    }
    let out = reencode(&grown, BASE).unwrap();
    let first = iced_at(&out, 0);
    assert_eq!(first.len(), 5);
    assert_eq!(out[0], 0xE9);
    let ret_at = out.len() as u64 - 1;
    assert_eq!(first.near_branch_target(), BASE as u64 + ret_at);
    assert_eq!(out[ret_at as usize], 0xC3);
}
