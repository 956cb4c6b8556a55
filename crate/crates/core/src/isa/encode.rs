use super::{AluOp, Disp, Instr, MemRef, Op, Rm, Rm8};

fn emit_mem(reg: u8, m: &MemRef, out: &mut Vec<u8>) {
    debug_assert!(m.is_valid(), "invalid memory operand form {:?}", m);
    let md = match (m.base, m.disp) {
        (None, _) => 0,
        (_, Disp::None) => 0,
        (_, Disp::D8(_)) => 1,
        (_, Disp::D32(_)) => 2,
    };
    if m.sib {
        out.push((md << 6) | (reg << 3) | 4);
        let idx = m.index.map_or(4, |r| r.index());
        let base = m.base.map_or(5, |r| r.index());
        out.push((m.scale << 6) | (idx << 3) | base);
    } else {
        let base = m.base.expect("non-SIB operand has a base").index();
        out.push((md << 6) | (reg << 3) | base);
    }
    match m.disp {
        Disp::None => {}
        Disp::D8(d) => out.push(d as u8),
        Disp::D32(d) => out.extend_from_slice(&d.to_le_bytes()),
    }
}

fn emit_rm(reg: u8, rm: &Rm, out: &mut Vec<u8>) {
    match rm {
        Rm::Reg(r) => out.push(0xC0 | (reg << 3) | r.index()),
        Rm::Mem(m) => emit_mem(reg, m, out),
    }
}

/// Appends the encoding of `op` to `out`.
pub fn encode(op: &Op, out: &mut Vec<u8>) {
    match op {
        Op::Nop => out.push(0x90),
        Op::MovImm32 { dst, imm } => {
            out.push(0xB8 + dst.index());
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Op::MovImm8 { dst, imm } => {
            out.push(0xB0 + dst.index());
            out.push(*imm);
        }
        Op::Mov { wide, dst, src } | Op::Add { wide, dst, src } => {
            if *wide {
                out.push(0x48);
            }
            out.push(if matches!(op, Op::Mov { .. }) { 0x89 } else { 0x01 });
            emit_rm(src.index(), dst, out);
        }
        Op::Xor8 { dst, src } => {
            out.push(0x30);
            match dst {
                Rm8::Reg(r) => out.push(0xC0 | (src.index() << 3) | r.index()),
                Rm8::Mem(m) => emit_mem(src.index(), m, out),
            }
        }
        Op::AluImm { wide, op, dst, imm } => {
            if *wide {
                out.push(0x48);
            }
            out.push(0x81);
            let ext = match op {
                AluOp::Add => 0,
                AluOp::Xor => 6,
            };
            emit_rm(ext, dst, out);
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Op::Push(r) => out.push(0x50 + r.index()),
        Op::Pop(r) => out.push(0x58 + r.index()),
        Op::Jmp { rel, short: true } => {
            out.push(0xEB);
            out.push(i8::try_from(*rel).expect("short jmp displacement fits rel8") as u8);
        }
        Op::Jmp { rel, short: false } => {
            out.push(0xE9);
            out.extend_from_slice(&rel.to_le_bytes());
        }
        Op::Call { rel } => {
            out.push(0xE8);
            out.extend_from_slice(&rel.to_le_bytes());
        }
        Op::Ret => out.push(0xC3),
        Op::Wrmsr => out.extend_from_slice(&[0x0F, 0x30]),
        Op::Rdmsr => out.extend_from_slice(&[0x0F, 0x32]),
        Op::MovToCr { cr, src } => out.extend_from_slice(&[0x0F, 0x22, 0xC0 | (cr << 3) | src.index()]),
        Op::MovFromCr { dst, cr } => out.extend_from_slice(&[0x0F, 0x20, 0xC0 | (cr << 3) | dst.index()]),
        Op::SysTable { op, mem } => {
            out.extend_from_slice(&[0x0F, 0x01]);
            emit_mem(op.reg_field(), mem, out);
        }
    }
}

pub fn encode_all<'a>(instrs: impl IntoIterator<Item = &'a Instr>) -> Vec<u8> {
    let mut out = Vec::new();
    for i in instrs {
        encode(&i.op, &mut out);
    }
    out
}
