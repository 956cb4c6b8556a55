//! Reference interpreter for the instruction subset.
//!
//! Every memory access goes through a [`Bus`]; every privileged instruction
//! goes through [`PrivilegeHooks`]. Faults are precise: a faulting step
//! leaves the register file and memory untouched.

use super::{decode, AluOp, DecodeError, Instr, MemRef, Op, PrivOpcode, Reg, Rm, Rm8, TableOp, MAX_INSTR_LEN};
pub use crate::mmu::{AccessKind, DenyReason};
use std::collections::BTreeMap;
use thiserror::Error;

/// Architectural index of the supervisor protection-key rights MSR.
pub const MSR_PKRS: u32 = 0x6E1;
/// CR4 bit enabling supervisor protection keys.
pub const CR4_PKS: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepFault {
    #[error("decode fault at {ip:#x}: {err}")]
    DecodeFault { ip: u32, err: DecodeError },
    #[error("{kind} access to {addr:#x} denied: {reason}")]
    AccessFault {
        addr: u32,
        kind: AccessKind,
        reason: DenyReason,
    },
    #[error("privilege trap on {0}")]
    PrivilegeTrap(PrivOpcode),
    #[error("monitor rejected delegated {op}: {reason}")]
    MonitorRejected { op: PrivOpcode, reason: String },
}

/// Register file of one simulated hardware thread.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cpu {
    pub gpr: [u64; 8],
    pub ip: u32,
    /// CR0..CR8; CR3 holds `pgdir_frame << 12 | asid`.
    pub cr: [u64; 9],
    pkrs: u32,
    pub msrs: BTreeMap<u32, u64>,
    pub gdtr: (u16, u64),
    pub idtr: (u16, u64),
}

impl Default for Cpu {
    fn default() -> Self {
        Cpu::with_pkrs(0)
    }
}

impl Cpu {
    pub fn with_pkrs(pkrs: u32) -> Cpu {
        let mut cr = [0u64; 9];
        cr[4] = CR4_PKS;
        Cpu {
            gpr: [0; 8],
            ip: 0,
            cr,
            pkrs,
            msrs: BTreeMap::new(),
            gdtr: (0, 0),
            idtr: (0, 0),
        }
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.gpr[r as usize]
    }

    pub fn set_reg(&mut self, r: Reg, v: u64) {
        self.gpr[r as usize] = v;
    }

    pub fn pkrs(&self) -> u32 {
        self.pkrs
    }

    /// The only mutation path for the PKRS slot: a privileged MSR write.
    pub(crate) fn write_pkrs(&mut self, v: u32) {
        self.pkrs = v;
    }

    fn reg8(&self, r: super::Reg8) -> u8 {
        let (full, shift) = r.location();
        (self.reg(full) >> shift) as u8
    }

    fn set_reg8(&mut self, r: super::Reg8, v: u8) {
        let (full, shift) = r.location();
        let old = self.reg(full);
        self.set_reg(full, (old & !(0xFFu64 << shift)) | ((v as u64) << shift));
    }

    pub fn effective_address(&self, m: &MemRef) -> u32 {
        let mut ea = m.disp.value() as i64 as u64;
        if let Some(b) = m.base {
            ea = ea.wrapping_add(self.reg(b));
        }
        if let Some(i) = m.index {
            ea = ea.wrapping_add(self.reg(i) << m.scale);
        }
        ea as u32
    }
}

/// Memory as seen by one executing context.
pub trait Bus {
    /// Fetches up to `buf.len()` instruction bytes at `addr`. Returns how
    /// many were fetched and, if it stopped early, the fault that stopped it.
    fn fetch(&mut self, addr: u32, buf: &mut [u8]) -> (usize, Option<StepFault>);
    /// All-or-nothing read.
    fn read(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), StepFault>;
    /// All-or-nothing write.
    fn write(&mut self, addr: u32, data: &[u8]) -> Result<(), StepFault>;
}

pub trait PrivilegeHooks {
    fn privileged(&mut self, cpu: &mut Cpu, bus: &mut dyn Bus, instr: &Instr) -> Result<(), StepFault>;

    /// Called for every `call`; returns `Some` when `target` is a monitor
    /// stub that was handled in place of the call.
    fn stub_call(&mut self, _cpu: &mut Cpu, _bus: &mut dyn Bus, _target: u32) -> Option<Result<(), StepFault>> {
        None
    }
}

/// Deprived context: every privileged instruction traps.
#[derive(Debug, Default, Clone, Copy)]
pub struct Deprived;

impl PrivilegeHooks for Deprived {
    fn privileged(&mut self, _cpu: &mut Cpu, _bus: &mut dyn Bus, instr: &Instr) -> Result<(), StepFault> {
        Err(StepFault::PrivilegeTrap(
            instr.op.privileged().expect("hook called for privileged op"),
        ))
    }
}

/// Fully privileged context: privileged instructions take effect directly.
#[derive(Debug, Default, Clone, Copy)]
pub struct DirectPrivilege;

impl PrivilegeHooks for DirectPrivilege {
    fn privileged(&mut self, cpu: &mut Cpu, bus: &mut dyn Bus, instr: &Instr) -> Result<(), StepFault> {
        execute_privileged(cpu, bus, instr)
    }
}

/// Native semantics of the privileged instructions.
pub fn execute_privileged(cpu: &mut Cpu, bus: &mut dyn Bus, instr: &Instr) -> Result<(), StepFault> {
    match instr.op {
        Op::Wrmsr => {
            let msr = cpu.reg(Reg::Rcx) as u32;
            let value = (cpu.reg(Reg::Rdx) << 32) | (cpu.reg(Reg::Rax) & 0xFFFF_FFFF);
            if msr == MSR_PKRS {
                cpu.write_pkrs(value as u32);
            } else {
                cpu.msrs.insert(msr, value);
            }
        }
        Op::Rdmsr => {
            let msr = cpu.reg(Reg::Rcx) as u32;
            let value = if msr == MSR_PKRS {
                cpu.pkrs() as u64
            } else {
                cpu.msrs.get(&msr).copied().unwrap_or(0)
            };
            cpu.set_reg(Reg::Rax, value & 0xFFFF_FFFF);
            cpu.set_reg(Reg::Rdx, value >> 32);
        }
        Op::MovToCr { cr, src } => cpu.cr[cr as usize] = cpu.reg(src),
        Op::MovFromCr { dst, cr } => cpu.set_reg(dst, cpu.cr[cr as usize]),
        Op::SysTable { op, mem } => {
            let ea = cpu.effective_address(&mem);
            if op.is_store() {
                let (limit, base) = if op == TableOp::Sgdt { cpu.gdtr } else { cpu.idtr };
                let mut buf = [0u8; 10];
                buf[..2].copy_from_slice(&limit.to_le_bytes());
                buf[2..].copy_from_slice(&base.to_le_bytes());
                bus.write(ea, &buf)?;
            } else {
                let mut buf = [0u8; 10];
                bus.read(ea, &mut buf)?;
                let v = (
                    u16::from_le_bytes([buf[0], buf[1]]),
                    u64::from_le_bytes(buf[2..].try_into().unwrap()),
                );
                if op == TableOp::Lgdt {
                    cpu.gdtr = v;
                } else {
                    cpu.idtr = v;
                }
            }
        }
        _ => unreachable!("not a privileged instruction"),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Executed(Instr),
    /// A privileged instruction or monitor stub completed through the hooks.
    Hooked(Instr),
}

fn read_u(bus: &mut dyn Bus, addr: u32, n: usize) -> Result<u64, StepFault> {
    let mut b = [0u8; 8];
    bus.read(addr, &mut b[..n])?;
    Ok(u64::from_le_bytes(b))
}

fn width(wide: bool) -> (usize, u64) {
    if wide {
        (8, u64::MAX)
    } else {
        (4, 0xFFFF_FFFF)
    }
}

fn rmw(
    cpu: &mut Cpu,
    bus: &mut dyn Bus,
    dst: &Rm,
    wide: bool,
    f: impl Fn(u64) -> u64,
) -> Result<(), StepFault> {
    let (n, mask) = width(wide);
    match dst {
        Rm::Reg(r) => {
            let v = f(cpu.reg(*r)) & mask;
            cpu.set_reg(*r, v);
        }
        Rm::Mem(m) => {
            let ea = cpu.effective_address(m);
            let old = read_u(bus, ea, n)?;
            let v = f(old) & mask;
            bus.write(ea, &v.to_le_bytes()[..n])?;
        }
    }
    Ok(())
}

/// Executes exactly one instruction at `cpu.ip`.
pub fn step(cpu: &mut Cpu, bus: &mut dyn Bus, hooks: &mut dyn PrivilegeHooks) -> Result<StepOutcome, StepFault> {
    let ip = cpu.ip;
    let mut buf = [0u8; MAX_INSTR_LEN];
    let (n, fetch_fault) = bus.fetch(ip, &mut buf);
    let instr = match decode(&buf[..n], 0) {
        Ok(i) => i,
        Err(DecodeError::TruncatedInstruction { .. }) if fetch_fault.is_some() => {
            return Err(fetch_fault.unwrap());
        }
        Err(err) => return Err(StepFault::DecodeFault { ip, err }),
    };
    let next = ip.wrapping_add(instr.len as u32);
    let mut outcome = StepOutcome::Executed(instr);
    match instr.op {
        Op::Nop => {}
        Op::MovImm32 { dst, imm } => cpu.set_reg(dst, imm as u64),
        Op::MovImm8 { dst, imm } => cpu.set_reg8(dst, imm),
        Op::Mov { wide, dst, src } => {
            let v = cpu.reg(src);
            rmw(cpu, bus, &dst, wide, |_| v)?;
        }
        Op::Add { wide, dst, src } => {
            let v = cpu.reg(src);
            rmw(cpu, bus, &dst, wide, |old| old.wrapping_add(v))?;
        }
        Op::AluImm { wide, op, dst, imm } => {
            let imm = imm as i32 as i64 as u64;
            match op {
                AluOp::Add => rmw(cpu, bus, &dst, wide, |old| old.wrapping_add(imm))?,
                AluOp::Xor => rmw(cpu, bus, &dst, wide, |old| old ^ imm)?,
            }
        }
        Op::Xor8 { dst, src } => {
            let s = cpu.reg8(src);
            match dst {
                Rm8::Reg(d) => {
                    let v = cpu.reg8(d) ^ s;
                    cpu.set_reg8(d, v);
                }
                Rm8::Mem(m) => {
                    let ea = cpu.effective_address(&m);
                    let mut b = [0u8];
                    bus.read(ea, &mut b)?;
                    bus.write(ea, &[b[0] ^ s])?;
                }
            }
        }
        Op::Push(r) => {
            let v = cpu.reg(r);
            let sp = cpu.reg(Reg::Rsp).wrapping_sub(8);
            bus.write(sp as u32, &v.to_le_bytes())?;
            cpu.set_reg(Reg::Rsp, sp);
        }
        Op::Pop(r) => {
            let sp = cpu.reg(Reg::Rsp);
            let v = read_u(bus, sp as u32, 8)?;
            cpu.set_reg(Reg::Rsp, sp.wrapping_add(8));
            cpu.set_reg(r, v);
        }
        Op::Jmp { rel, .. } => {
            cpu.ip = next.wrapping_add(rel as u32);
            return Ok(outcome);
        }
        Op::Call { rel } => {
            let target = next.wrapping_add(rel as u32);
            if let Some(r) = hooks.stub_call(cpu, bus, target) {
                r?;
                cpu.ip = next;
                return Ok(StepOutcome::Hooked(instr));
            }
            let sp = cpu.reg(Reg::Rsp).wrapping_sub(8);
            bus.write(sp as u32, &(next as u64).to_le_bytes())?;
            cpu.set_reg(Reg::Rsp, sp);
            cpu.ip = target;
            return Ok(outcome);
        }
        Op::Ret => {
            let sp = cpu.reg(Reg::Rsp);
            let v = read_u(bus, sp as u32, 8)?;
            cpu.set_reg(Reg::Rsp, sp.wrapping_add(8));
            cpu.ip = v as u32;
            return Ok(outcome);
        }
        Op::Wrmsr | Op::Rdmsr | Op::MovToCr { .. } | Op::MovFromCr { .. } | Op::SysTable { .. } => {
            hooks.privileged(cpu, bus, &instr)?;
            outcome = StepOutcome::Hooked(instr);
        }
    }
    cpu.ip = next;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    /// Execution fell through to the end address.
    Halted { steps: usize },
    Fault { fault: StepFault, steps: usize },
    StepLimit,
}

/// Steps until `cpu.ip == end`, a fault, or `max_steps`.
pub fn run(
    cpu: &mut Cpu,
    bus: &mut dyn Bus,
    hooks: &mut dyn PrivilegeHooks,
    end: u32,
    max_steps: usize,
) -> RunOutcome {
    for steps in 0..max_steps {
        if cpu.ip == end {
            return RunOutcome::Halted { steps };
        }
        if let Err(fault) = step(cpu, bus, hooks) {
            return RunOutcome::Fault { fault, steps };
        }
    }
    if cpu.ip == end {
        RunOutcome::Halted { steps: max_steps }
    } else {
        RunOutcome::StepLimit
    }
}

/// Flat memory for running subset programs outside a full machine: a code
/// image (fetch only) and one read/write data window. Everything else faults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatBus {
    pub code_base: u32,
    pub code: Vec<u8>,
    pub data_base: u32,
    pub data: Vec<u8>,
}

impl FlatBus {
    pub fn new(code_base: u32, code: Vec<u8>, data_base: u32, data_len: usize) -> FlatBus {
        FlatBus {
            code_base,
            code,
            data_base,
            data: vec![0; data_len],
        }
    }

    fn data_range(&self, addr: u32, len: usize, kind: AccessKind) -> Result<usize, StepFault> {
        let off = addr.wrapping_sub(self.data_base) as usize;
        if off < self.data.len() && off + len <= self.data.len() {
            Ok(off)
        } else {
            Err(StepFault::AccessFault {
                addr,
                kind,
                reason: DenyReason::Unmapped,
            })
        }
    }
}

impl Bus for FlatBus {
    fn fetch(&mut self, addr: u32, buf: &mut [u8]) -> (usize, Option<StepFault>) {
        let off = addr.wrapping_sub(self.code_base) as usize;
        let avail = self.code.len().saturating_sub(off);
        let n = avail.min(buf.len());
        if off < self.code.len() {
            buf[..n].copy_from_slice(&self.code[off..off + n]);
        }
        let fault = (n < buf.len()).then(|| StepFault::AccessFault {
            addr: addr.wrapping_add(n as u32),
            kind: AccessKind::Execute,
            reason: DenyReason::Unmapped,
        });
        (n, fault)
    }

    fn read(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), StepFault> {
        let off = self.data_range(addr, buf.len(), AccessKind::Read)?;
        buf.copy_from_slice(&self.data[off..off + buf.len()]);
        Ok(())
    }

    fn write(&mut self, addr: u32, data: &[u8]) -> Result<(), StepFault> {
        let off = self.data_range(addr, data.len(), AccessKind::Write)?;
        self.data[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }
}
