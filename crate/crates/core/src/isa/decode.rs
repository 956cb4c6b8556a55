use super::{AluOp, Disp, Instr, MemRef, Op, Reg, Reg8, Rm, Rm8, TableOp};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown opcode {byte:#04x} at offset {offset}")]
    UnknownOpcode { offset: usize, byte: u8 },
    #[error("truncated instruction at offset {offset}")]
    TruncatedInstruction { offset: usize },
    #[error("unsupported encoding at offset {offset}: {detail}")]
    UnsupportedEncoding { offset: usize, detail: &'static str },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    start: usize,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(DecodeError::TruncatedInstruction { offset: self.start })?;
        self.pos += 1;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let mut v = [0u8; 4];
        for b in &mut v {
            *b = self.u8()?;
        }
        Ok(u32::from_le_bytes(v))
    }

    fn unsupported(&self, detail: &'static str) -> DecodeError {
        DecodeError::UnsupportedEncoding {
            offset: self.start,
            detail,
        }
    }
}

enum ModRm {
    Reg(u8, u8),
    Mem(u8, MemRef),
}

impl ModRm {
    fn reg_field(&self) -> u8 {
        match self {
            ModRm::Reg(r, _) | ModRm::Mem(r, _) => *r,
        }
    }

    fn into_rm(self) -> Rm {
        match self {
            ModRm::Reg(_, rm) => Rm::Reg(Reg::from_index(rm)),
            ModRm::Mem(_, m) => Rm::Mem(m),
        }
    }

    fn into_rm8(self) -> Rm8 {
        match self {
            ModRm::Reg(_, rm) => Rm8::Reg(Reg8::new(rm)),
            ModRm::Mem(_, m) => Rm8::Mem(m),
        }
    }
}

fn modrm(c: &mut Cursor) -> Result<ModRm, DecodeError> {
    let b = c.u8()?;
    let md = b >> 6;
    let reg = (b >> 3) & 7;
    let rm = b & 7;
    if md == 3 {
        return Ok(ModRm::Reg(reg, rm));
    }
    let (sib, base, index, scale) = if rm == 4 {
        let s = c.u8()?;
        let scale = s >> 6;
        let idx = (s >> 3) & 7;
        let base = s & 7;
        let index = (idx != 4).then(|| Reg::from_index(idx));
        let base = if base == 5 && md == 0 {
            None
        } else {
            Some(Reg::from_index(base))
        };
        (true, base, index, scale)
    } else if rm == 5 && md == 0 {
        return Err(c.unsupported("rip-relative addressing"));
    } else {
        (false, Some(Reg::from_index(rm)), None, 0)
    };
    let disp = match (md, base) {
        (0, None) => Disp::D32(c.u32()? as i32),
        (0, _) => Disp::None,
        (1, _) => Disp::D8(c.u8()? as i8),
        _ => Disp::D32(c.u32()? as i32),
    };
    Ok(ModRm::Mem(
        reg,
        MemRef {
            base,
            index,
            scale,
            disp,
            sib,
        },
    ))
}

/// Decodes the instruction starting at `offset`.
pub fn decode(bytes: &[u8], offset: usize) -> Result<Instr, DecodeError> {
    if offset >= bytes.len() {
        return Err(DecodeError::TruncatedInstruction { offset });
    }
    let mut c = Cursor {
        bytes,
        start: offset,
        pos: offset,
    };
    let mut wide = false;
    let mut op = c.u8()?;
    if op == 0x48 {
        wide = true;
        op = c.u8()?;
        if !matches!(op, 0x89 | 0x01 | 0x81) {
            return Err(c.unsupported("REX.W only valid on 89/01/81"));
        }
    }
    let decoded = match op {
        0x90 => Op::Nop,
        0xB8..=0xBF => Op::MovImm32 {
            dst: Reg::from_index(op - 0xB8),
            imm: c.u32()?,
        },
        0xB0..=0xB7 => Op::MovImm8 {
            dst: Reg8::new(op - 0xB0),
            imm: c.u8()?,
        },
        0x89 | 0x01 => {
            let m = modrm(&mut c)?;
            let src = Reg::from_index(m.reg_field());
            let dst = m.into_rm();
            if op == 0x89 {
                Op::Mov { wide, dst, src }
            } else {
                Op::Add { wide, dst, src }
            }
        }
        0x30 => {
            let m = modrm(&mut c)?;
            let src = Reg8::new(m.reg_field());
            Op::Xor8 {
                dst: m.into_rm8(),
                src,
            }
        }
        0x81 => {
            let m = modrm(&mut c)?;
            let alu = match m.reg_field() {
                0 => AluOp::Add,
                6 => AluOp::Xor,
                _ => return Err(c.unsupported("81 group: only /0 and /6")),
            };
            let dst = m.into_rm();
            let imm = c.u32()?;
            Op::AluImm {
                wide,
                op: alu,
                dst,
                imm,
            }
        }
        0x50..=0x57 => Op::Push(Reg::from_index(op - 0x50)),
        0x58..=0x5F => Op::Pop(Reg::from_index(op - 0x58)),
        0xEB => Op::Jmp {
            rel: c.u8()? as i8 as i32,
            short: true,
        },
        0xE9 => Op::Jmp {
            rel: c.u32()? as i32,
            short: false,
        },
        0xE8 => Op::Call {
            rel: c.u32()? as i32,
        },
        0xC3 => Op::Ret,
        0x0F => {
            let op2 = c.u8()?;
            match op2 {
                0x30 => Op::Wrmsr,
                0x32 => Op::Rdmsr,
                0x20 | 0x22 => {
                    let m = modrm(&mut c)?;
                    let ModRm::Reg(cr, r) = m else {
                        return Err(c.unsupported("control-register move needs mod=11"));
                    };
                    if !matches!(cr, 0 | 2 | 3 | 4 | 8) {
                        return Err(c.unsupported("no such control register"));
                    }
                    let r = Reg::from_index(r);
                    if op2 == 0x22 {
                        Op::MovToCr { cr, src: r }
                    } else {
                        Op::MovFromCr { dst: r, cr }
                    }
                }
                0x01 => {
                    let m = modrm(&mut c)?;
                    match m {
                        ModRm::Reg(..) => {
                            return Err(c.unsupported("0F 01 register forms"));
                        }
                        ModRm::Mem(r, mem) => {
                            let Some(t) = TableOp::from_reg_field(r) else {
                                return Err(c.unsupported("0F 01 group: only /0../3"));
                            };
                            Op::SysTable { op: t, mem }
                        }
                    }
                }
                _ => {
                    return Err(DecodeError::UnknownOpcode {
                        offset: offset + 1,
                        byte: op2,
                    })
                }
            }
        }
        _ => return Err(DecodeError::UnknownOpcode { offset, byte: op }),
    };
    Ok(Instr {
        op: decoded,
        len: (c.pos - offset) as u8,
    })
}

/// Decodes the buffer from offset 0 to the end with no gaps.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<(usize, Instr)>, DecodeError> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < bytes.len() {
        let ins = decode(bytes, off)?;
        out.push((off, ins));
        off += ins.len as usize;
    }
    Ok(out)
}
