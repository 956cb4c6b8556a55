//! A small x86-64 instruction subset: decoder, encoder and a reference
//! interpreter.
//!
//! The subset is chosen so that every class of privileged instruction the
//! simulator deprives (PKRS writes through `wrmsr`, control-register moves
//! and the descriptor-table group `0F 01`) can appear both as a real
//! instruction and embedded inside other instructions.
//!
//! Supported encodings:
//!
//! ```text
//! 90                 nop
//! B8+r id            mov r32, imm32
//! B0+r ib            mov r8, imm8
//! [48] 89 /r         mov r/m, r
//! [48] 01 /r         add r/m, r
//! 30 /r              xor r/m8, r8
//! [48] 81 /0 id      add r/m, imm32
//! [48] 81 /6 id      xor r/m, imm32
//! 50+r / 58+r        push r64 / pop r64
//! EB cb / E9 cd      jmp rel8 / rel32
//! E8 cd              call rel32
//! C3                 ret
//! 0F 30 / 0F 32      wrmsr / rdmsr
//! 0F 22 /r           mov CRn, r64
//! 0F 20 /r           mov r64, CRn
//! 0F 01 /0../3       sgdt / sidt / lgdt / lidt m
//! ```
//!
//! Only the REX.W prefix (`0x48`) is accepted, and only on the `89`, `01`
//! and `81` forms.

mod decode;
mod encode;
mod interp;
mod layout;

pub use decode::{decode, decode_all, DecodeError};
pub use encode::{encode, encode_all};
pub use interp::{
    execute_privileged, run, AccessKind, Bus, Cpu, Deprived, DirectPrivilege, FlatBus, PrivilegeHooks,
    RunOutcome, StepFault, StepOutcome, CR4_PKS, MSR_PKRS,
};
pub use interp::step;
pub use layout::{lift, reencode, BranchTarget, LayoutError, Node};

use std::fmt;

/// Longest encoding the subset can produce (REX + opcode + ModRM + SIB + disp32 + imm32).
pub const MAX_INSTR_LEN: usize = 12;

/// 64-bit general purpose registers reachable without REX.R/X/B.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Reg {
    Rax = 0,
    Rcx = 1,
    Rdx = 2,
    Rbx = 3,
    Rsp = 4,
    Rbp = 5,
    Rsi = 6,
    Rdi = 7,
}

impl Reg {
    pub const ALL: [Reg; 8] = [
        Reg::Rax,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rbx,
        Reg::Rsp,
        Reg::Rbp,
        Reg::Rsi,
        Reg::Rdi,
    ];

    pub fn from_index(i: u8) -> Reg {
        Reg::ALL[(i & 7) as usize]
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name64(self) -> &'static str {
        ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi"][self as usize]
    }

    pub fn name32(self) -> &'static str {
        ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"][self as usize]
    }
}

/// Legacy 8-bit register: indices 0..=3 are `al..bl`, 4..=7 are `ah..bh`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Reg8(u8);

impl Reg8 {
    pub const AL: Reg8 = Reg8(0);

    pub fn new(index: u8) -> Reg8 {
        Reg8(index & 7)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// The full register holding this byte and the bit shift of the byte.
    pub fn location(self) -> (Reg, u32) {
        if self.0 < 4 {
            (Reg::from_index(self.0), 0)
        } else {
            (Reg::from_index(self.0 - 4), 8)
        }
    }

    pub fn name(self) -> &'static str {
        ["al", "cl", "dl", "bl", "ah", "ch", "dh", "bh"][self.0 as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Disp {
    None,
    D8(i8),
    D32(i32),
}

impl Disp {
    pub fn value(self) -> i32 {
        match self {
            Disp::None => 0,
            Disp::D8(d) => d as i32,
            Disp::D32(d) => d,
        }
    }

    pub fn size(self) -> u8 {
        match self {
            Disp::None => 0,
            Disp::D8(_) => 1,
            Disp::D32(_) => 4,
        }
    }
}

/// A memory operand, keeping enough of its encoding form (SIB or not,
/// displacement width, scale bits) to re-encode it byte-for-byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub scale: u8,
    pub disp: Disp,
    pub sib: bool,
}

impl MemRef {
    /// Shortest valid encoding form for `[base + index<<scale + disp]`.
    pub fn canonical(base: Option<Reg>, index: Option<Reg>, scale: u8, disp: i32) -> MemRef {
        assert!(index != Some(Reg::Rsp), "rsp cannot be an index register");
        let sib = base.is_none() || index.is_some() || base == Some(Reg::Rsp);
        let disp = match base {
            None => Disp::D32(disp),
            Some(b) => {
                if disp == 0 && b != Reg::Rbp {
                    Disp::None
                } else if let Ok(d) = i8::try_from(disp) {
                    Disp::D8(d)
                } else {
                    Disp::D32(disp)
                }
            }
        };
        MemRef {
            base,
            index,
            scale: if index.is_some() { scale & 3 } else { 0 },
            disp,
            sib,
        }
    }

    /// Same operand with the displacement replaced, re-choosing the width.
    pub fn with_disp(self, disp: i32) -> MemRef {
        let mut m = MemRef::canonical(self.base, self.index, self.scale, disp);
        m.sib = m.sib || self.sib;
        m
    }

    pub fn uses(self, reg: Reg) -> bool {
        self.base == Some(reg) || self.index == Some(reg)
    }

    pub(crate) fn is_valid(&self) -> bool {
        if self.index == Some(Reg::Rsp) {
            return false;
        }
        if !self.sib {
            if self.index.is_some() || self.scale != 0 {
                return false;
            }
            return match self.base {
                None | Some(Reg::Rsp) => false,
                Some(Reg::Rbp) => self.disp != Disp::None,
                Some(_) => true,
            };
        }
        match self.base {
            None => matches!(self.disp, Disp::D32(_)),
            Some(Reg::Rbp) => self.disp != Disp::None,
            Some(_) => true,
        }
    }
}

impl fmt::Display for MemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        let mut first = true;
        if let Some(b) = self.base {
            write!(f, "{}", b.name64())?;
            first = false;
        }
        if let Some(i) = self.index {
            if !first {
                write!(f, "+")?;
            }
            write!(f, "{}*{}", i.name64(), 1u8 << self.scale)?;
            first = false;
        }
        let d = self.disp.value();
        match (first, d) {
            (true, d) => write!(f, "{:#x}", d as u32)?,
            (false, 0) if self.disp == Disp::None => {}
            (false, d) if d < 0 => write!(f, "-{:#x}", (d as i64).unsigned_abs())?,
            (false, d) => write!(f, "+{:#x}", d)?,
        }
        write!(f, "]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rm {
    Reg(Reg),
    Mem(MemRef),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rm8 {
    Reg(Reg8),
    Mem(MemRef),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Xor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TableOp {
    Sgdt,
    Sidt,
    Lgdt,
    Lidt,
}

impl TableOp {
    pub fn from_reg_field(r: u8) -> Option<TableOp> {
        match r {
            0 => Some(TableOp::Sgdt),
            1 => Some(TableOp::Sidt),
            2 => Some(TableOp::Lgdt),
            3 => Some(TableOp::Lidt),
            _ => None,
        }
    }

    pub fn reg_field(self) -> u8 {
        self as u8
    }

    pub fn is_store(self) -> bool {
        matches!(self, TableOp::Sgdt | TableOp::Sidt)
    }
}

/// One instruction of the subset, with operand encoding forms retained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Nop,
    MovImm32 { dst: Reg, imm: u32 },
    MovImm8 { dst: Reg8, imm: u8 },
    Mov { wide: bool, dst: Rm, src: Reg },
    Add { wide: bool, dst: Rm, src: Reg },
    Xor8 { dst: Rm8, src: Reg8 },
    AluImm { wide: bool, op: AluOp, dst: Rm, imm: u32 },
    Push(Reg),
    Pop(Reg),
    Jmp { rel: i32, short: bool },
    Call { rel: i32 },
    Ret,
    Wrmsr,
    Rdmsr,
    MovToCr { cr: u8, src: Reg },
    MovFromCr { dst: Reg, cr: u8 },
    SysTable { op: TableOp, mem: MemRef },
}

/// The privileged opcode families the simulator tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrivOpcode {
    Wrmsr,
    Rdmsr,
    MovToCr,
    MovFromCr,
    SysTable,
}

impl fmt::Display for PrivOpcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrivOpcode::Wrmsr => "wrmsr",
            PrivOpcode::Rdmsr => "rdmsr",
            PrivOpcode::MovToCr => "mov-to-cr",
            PrivOpcode::MovFromCr => "mov-from-cr",
            PrivOpcode::SysTable => "sys-table",
        })
    }
}

/// Byte counts of each encoding field, in order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FieldLayout {
    pub prefix: u8,
    pub opcode: u8,
    pub modrm: u8,
    pub sib: u8,
    pub disp: u8,
    pub imm: u8,
}

/// Which encoding field a byte of an instruction belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Prefix,
    Opcode,
    ModRm,
    Sib,
    Displacement,
    Immediate,
}

impl FieldLayout {
    pub fn len(&self) -> usize {
        (self.prefix + self.opcode + self.modrm + self.sib + self.disp + self.imm) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Field containing byte `i` of the encoding.
    pub fn field_at(&self, i: usize) -> Option<Field> {
        let spans = [
            (self.prefix, Field::Prefix),
            (self.opcode, Field::Opcode),
            (self.modrm, Field::ModRm),
            (self.sib, Field::Sib),
            (self.disp, Field::Displacement),
            (self.imm, Field::Immediate),
        ];
        let mut at = 0usize;
        for (n, field) in spans {
            if i < at + n as usize {
                return Some(field);
            }
            at += n as usize;
        }
        None
    }
}

fn mem_fields(m: &MemRef) -> (u8, u8) {
    (m.sib as u8, m.disp.size())
}

fn rm_fields(rm: &Rm) -> (u8, u8) {
    match rm {
        Rm::Reg(_) => (0, 0),
        Rm::Mem(m) => mem_fields(m),
    }
}

impl Op {
    pub fn layout(&self) -> FieldLayout {
        let mut l = FieldLayout::default();
        match self {
            Op::Nop | Op::Ret | Op::Push(_) | Op::Pop(_) => l.opcode = 1,
            Op::MovImm32 { .. } => {
                l.opcode = 1;
                l.imm = 4;
            }
            Op::MovImm8 { .. } => {
                l.opcode = 1;
                l.imm = 1;
            }
            Op::Mov { wide, dst, .. } | Op::Add { wide, dst, .. } => {
                l.prefix = *wide as u8;
                l.opcode = 1;
                l.modrm = 1;
                (l.sib, l.disp) = rm_fields(dst);
            }
            Op::Xor8 { dst, .. } => {
                l.opcode = 1;
                l.modrm = 1;
                if let Rm8::Mem(m) = dst {
                    (l.sib, l.disp) = mem_fields(m);
                }
            }
            Op::AluImm { wide, dst, .. } => {
                l.prefix = *wide as u8;
                l.opcode = 1;
                l.modrm = 1;
                (l.sib, l.disp) = rm_fields(dst);
                l.imm = 4;
            }
            Op::Jmp { short, .. } => {
                l.opcode = 1;
                l.imm = if *short { 1 } else { 4 };
            }
            Op::Call { .. } => {
                l.opcode = 1;
                l.imm = 4;
            }
            Op::Wrmsr | Op::Rdmsr => l.opcode = 2,
            Op::MovToCr { .. } | Op::MovFromCr { .. } => {
                l.opcode = 2;
                l.modrm = 1;
            }
            Op::SysTable { mem, .. } => {
                l.opcode = 2;
                l.modrm = 1;
                (l.sib, l.disp) = mem_fields(mem);
            }
        }
        l
    }

    pub fn encoded_len(&self) -> usize {
        self.layout().len()
    }

    pub fn privileged(&self) -> Option<PrivOpcode> {
        match self {
            Op::Wrmsr => Some(PrivOpcode::Wrmsr),
            Op::Rdmsr => Some(PrivOpcode::Rdmsr),
            Op::MovToCr { .. } => Some(PrivOpcode::MovToCr),
            Op::MovFromCr { .. } => Some(PrivOpcode::MovFromCr),
            Op::SysTable { .. } => Some(PrivOpcode::SysTable),
            _ => None,
        }
    }

    /// Relative displacement of a jmp/call, if any.
    pub fn branch_rel(&self) -> Option<i32> {
        match self {
            Op::Jmp { rel, .. } | Op::Call { rel } => Some(*rel),
            _ => None,
        }
    }

    pub fn is_control_flow(&self) -> bool {
        matches!(self, Op::Jmp { .. } | Op::Call { .. } | Op::Ret)
    }
}

/// A decoded instruction: the operation plus the number of bytes it occupied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instr {
    pub op: Op,
    pub len: u8,
}

impl Instr {
    pub fn new(op: Op) -> Instr {
        Instr {
            len: op.encoded_len() as u8,
            op,
        }
    }

    pub fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len as usize);
        encode(&self.op, &mut out);
        out
    }
}

fn rm_str(rm: &Rm, wide: bool) -> String {
    match rm {
        Rm::Reg(r) => if wide { r.name64() } else { r.name32() }.to_string(),
        Rm::Mem(m) => format!("{} {}", if wide { "qword" } else { "dword" }, m),
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reg = |r: &Reg, wide: bool| if wide { r.name64() } else { r.name32() };
        match self {
            Op::Nop => write!(f, "nop"),
            Op::MovImm32 { dst, imm } => write!(f, "mov {}, {:#x}", dst.name32(), imm),
            Op::MovImm8 { dst, imm } => write!(f, "mov {}, {:#x}", dst.name(), imm),
            Op::Mov { wide, dst, src } => write!(f, "mov {}, {}", rm_str(dst, *wide), reg(src, *wide)),
            Op::Add { wide, dst, src } => write!(f, "add {}, {}", rm_str(dst, *wide), reg(src, *wide)),
            Op::Xor8 { dst, src } => match dst {
                Rm8::Reg(d) => write!(f, "xor {}, {}", d.name(), src.name()),
                Rm8::Mem(m) => write!(f, "xor byte {}, {}", m, src.name()),
            },
            Op::AluImm { wide, op, dst, imm } => {
                let m = match op {
                    AluOp::Add => "add",
                    AluOp::Xor => "xor",
                };
                write!(f, "{} {}, {:#x}", m, rm_str(dst, *wide), imm)
            }
            Op::Push(r) => write!(f, "push {}", r.name64()),
            Op::Pop(r) => write!(f, "pop {}", r.name64()),
            Op::Jmp { rel, short } => {
                write!(f, "jmp {} {:+}", if *short { "short" } else { "near" }, rel)
            }
            Op::Call { rel } => write!(f, "call {:+}", rel),
            Op::Ret => write!(f, "ret"),
            Op::Wrmsr => write!(f, "wrmsr"),
            Op::Rdmsr => write!(f, "rdmsr"),
            Op::MovToCr { cr, src } => write!(f, "mov cr{}, {}", cr, src.name64()),
            Op::MovFromCr { dst, cr } => write!(f, "mov {}, cr{}", dst.name64(), cr),
            Op::SysTable { op, mem } => {
                let m = match op {
                    TableOp::Sgdt => "sgdt",
                    TableOp::Sidt => "sidt",
                    TableOp::Lgdt => "lgdt",
                    TableOp::Lidt => "lidt",
                };
                write!(f, "{} {}", m, mem)
            }
        }
    }
}

/// A flat code buffer loaded at `base`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    pub bytes: Vec<u8>,
    pub base: u32,
    pub labels: std::collections::BTreeMap<String, u32>,
}

impl Program {
    pub fn new(bytes: Vec<u8>, base: u32) -> Program {
        Program {
            bytes,
            base,
            labels: Default::default(),
        }
    }

    pub fn end(&self) -> u32 {
        self.base.wrapping_add(self.bytes.len() as u32)
    }

    /// Decodes the whole buffer; fails if any gap or truncation exists.
    pub fn decode(&self) -> Result<Vec<(usize, Instr)>, DecodeError> {
        decode_all(&self.bytes)
    }
}

/// Debug dump: one `offset: hex-bytes  mnemonic operands` line per instruction.
pub fn listing(bytes: &[u8]) -> Result<String, DecodeError> {
    let mut out = String::new();
    for (off, ins) in decode_all(bytes)? {
        let hex: Vec<String> = bytes[off..off + ins.len as usize]
            .iter()
            .map(|b| format!("{:02x}", b))
            .collect();
        out.push_str(&format!("{:04x}: {}  {}\n", off, hex.join(" "), ins.op));
    }
    Ok(out)
}
