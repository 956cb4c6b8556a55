//! The monitor: sole writer of PKRS, CR3, page tables and the gate table.
//!
//! Compartments reach it through gate stubs (`monitor_call`); switch gates
//! use `delegate` directly. Both validate the request against the caller's
//! identity before the effect happens.

use crate::isa::{Cpu, Op, Reg, TableOp, CR4_PKS, MSR_PKRS};
use crate::machine::{Compartment, Machine, MachineBus, SAVE_BASE, SAVE_SLOT};
use crate::mmu::{
    cr3_parts, page_base, page_of, Actor, CompartmentId, MmuError, PageDescriptor, Pkey, PkrsValue,
};
use crate::isa::Bus;
use crate::policy::{validate_transfer, TransferError};
use std::collections::BTreeSet;
use thiserror::Error;

/// Nesting bound of the per-thread saved-PKRS stack.
pub const MAX_INTERRUPT_DEPTH: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorState {
    /// Restricted rights installed on interrupt entry.
    pub default_pkrs: PkrsValue,
    pub monitor_pkrs: PkrsValue,
}

impl MonitorState {
    pub fn new(compartments: &[Compartment], xom: bool) -> MonitorState {
        MonitorState {
            default_pkrs: compartments[CompartmentId::CORE.0 as usize].pkrs,
            monitor_pkrs: crate::machine::monitor_pkrs(xom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Caller {
    Gate(u32),
    Compartment(CompartmentId),
}

impl std::fmt::Display for Caller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Caller::Gate(id) => write!(f, "gate{}", id),
            Caller::Compartment(c) => write!(f, "{}", c),
        }
    }
}

/// A privileged effect requested of the monitor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrivilegedOp {
    WritePkrs(u32),
    ReadPkrs,
    WriteCr3(u64),
    WriteCr4(u64),
    WriteCr { cr: u8, value: u64 },
    ReadCr { cr: u8, dst: Reg },
    WriteMsr { msr: u32, value: u64 },
    ReadMsr { msr: u32 },
    SysTable { op: TableOp, addr: u32 },
    AllocHeap { pages: u32 },
    JitWrite { vaddr: u32, bytes: Vec<u8> },
}

impl PrivilegedOp {
    /// The request a deprivileged instruction stands for, given the
    /// register state at the call site.
    pub fn from_instruction(op: &Op, cpu: &Cpu) -> PrivilegedOp {
        match *op {
            Op::Wrmsr => {
                let msr = cpu.reg(Reg::Rcx) as u32;
                let value = (cpu.reg(Reg::Rdx) << 32) | (cpu.reg(Reg::Rax) & 0xFFFF_FFFF);
                if msr == MSR_PKRS {
                    PrivilegedOp::WritePkrs(value as u32)
                } else {
                    PrivilegedOp::WriteMsr { msr, value }
                }
            }
            Op::Rdmsr => {
                let msr = cpu.reg(Reg::Rcx) as u32;
                if msr == MSR_PKRS {
                    PrivilegedOp::ReadPkrs
                } else {
                    PrivilegedOp::ReadMsr { msr }
                }
            }
            Op::MovToCr { cr: 3, src } => PrivilegedOp::WriteCr3(cpu.reg(src)),
            Op::MovToCr { cr: 4, src } => PrivilegedOp::WriteCr4(cpu.reg(src)),
            Op::MovToCr { cr, src } => PrivilegedOp::WriteCr { cr, value: cpu.reg(src) },
            Op::MovFromCr { dst, cr } => PrivilegedOp::ReadCr { cr, dst },
            Op::SysTable { op, mem } => PrivilegedOp::SysTable {
                op,
                addr: cpu.effective_address(&mem),
            },
            _ => panic!("{} is not privileged", op),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PrivilegedOp::WritePkrs(_) => "write-pkrs",
            PrivilegedOp::ReadPkrs => "read-pkrs",
            PrivilegedOp::WriteCr3(_) => "write-cr3",
            PrivilegedOp::WriteCr4(_) => "write-cr4",
            PrivilegedOp::WriteCr { .. } => "write-cr",
            PrivilegedOp::ReadCr { .. } => "read-cr",
            PrivilegedOp::WriteMsr { .. } => "write-msr",
            PrivilegedOp::ReadMsr { .. } => "read-msr",
            PrivilegedOp::SysTable { .. } => "sys-table",
            PrivilegedOp::AllocHeap { .. } => "alloc-heap",
            PrivilegedOp::JitWrite { .. } => "jit-write",
        }
    }

    fn detail(&self) -> String {
        match self {
            PrivilegedOp::WritePkrs(v) => format!("value={}", PkrsValue(*v)),
            PrivilegedOp::WriteCr3(v) | PrivilegedOp::WriteCr4(v) => format!("value={:#x}", v),
            PrivilegedOp::WriteCr { cr, value } => format!("cr{} value={:#x}", cr, value),
            PrivilegedOp::ReadCr { cr, .. } => format!("cr{}", cr),
            PrivilegedOp::WriteMsr { msr, value } => format!("msr={:#x} value={:#x}", msr, value),
            PrivilegedOp::ReadMsr { msr } => format!("msr={:#x}", msr),
            PrivilegedOp::SysTable { op, addr } => format!("{:?} {:#x}", op, addr),
            PrivilegedOp::AllocHeap { pages } => format!("pages={}", pages),
            PrivilegedOp::JitWrite { vaddr, bytes } => format!("{:#x} len={}", vaddr, bytes.len()),
            PrivilegedOp::ReadPkrs => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorReject {
    #[error("PKRS value {0} is not registered")]
    UnregisteredPkrs(PkrsValue),
    #[error("CR3 value {0:#x} names no registered address space")]
    ForgedPgdir(u64),
    #[error("attempt to clear CR4.PKS")]
    PksDisableAttempt,
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error(transparent)]
    Mmu(#[from] MmuError),
}

impl MonitorReject {
    pub fn label(&self) -> &'static str {
        match self {
            MonitorReject::UnregisteredPkrs(_) => "unregistered-pkrs",
            MonitorReject::ForgedPgdir(_) => "forged-pgdir",
            MonitorReject::PksDisableAttempt => "pks-disable",
            MonitorReject::PolicyViolation(_) => "policy-violation",
            MonitorReject::Mmu(_) => "mmu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum InterruptError {
    #[error("interrupt nesting deeper than {MAX_INTERRUPT_DEPTH}")]
    NestingTooDeep,
    #[error("interrupt exit without a matching entry")]
    UnbalancedExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TransferDenied {
    #[error("address is not a shared page")]
    NotShared,
    #[error("faulting compartment already owns the page")]
    SameOwner,
    #[error("no transfer rule")]
    NoTransferRule,
    #[error("field at offset {offset} holds {value}, outside its legal ranges")]
    RangeViolation { offset: u16, value: u64 },
}

impl TransferDenied {
    pub fn label(&self) -> &'static str {
        match self {
            TransferDenied::NotShared => "not-shared",
            TransferDenied::SameOwner => "same-owner",
            TransferDenied::NoTransferRule => "no-rule",
            TransferDenied::RangeViolation { .. } => "range-violation",
        }
    }
}

/// Outcome of an interrupt delivered to a thread.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterruptReport<T> {
    pub handler_pkrs: PkrsValue,
    pub resumed_pkrs: PkrsValue,
    pub result: T,
}

impl Machine {
    /// Every PKRS value a gate may install.
    pub fn pkrs_whitelist(&self) -> BTreeSet<PkrsValue> {
        let mut w = self.sgt.target_values();
        w.insert(self.monitor.default_pkrs);
        w
    }

    /// A compartment's request through a gate stub: enter the monitor, check
    /// and perform the operation, return to the caller's rights.
    pub fn monitor_call(&mut self, tid: usize, op: PrivilegedOp) -> Result<(), MonitorReject> {
        let cid = self.current_compartment(tid).unwrap_or(self.threads[tid].home);
        let caller_pkrs = self.pkrs(tid);
        let actor = Actor::Compartment(cid);
        self.metrics.monitor_entries += 1;
        self.mmu.trace.record("monitor-entry", actor, format!("t{} {}", tid, op.name()), "ok");
        let mpkrs = self.monitor.monitor_pkrs;
        self.write_live_pkrs(tid, mpkrs, "monitor-entry");
        let r = self.delegate_inner(tid, Caller::Compartment(cid), op, caller_pkrs);
        let back = match &r {
            Ok(Some(v)) => *v,
            _ => caller_pkrs,
        };
        self.write_live_pkrs(tid, back, "monitor-exit");
        self.metrics.monitor_exits += 1;
        let verdict = match &r {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("rejected:{}", e.label()),
        };
        self.mmu.trace.record("monitor-exit", actor, format!("t{}", tid), verdict);
        r.map(|_| ())
    }

    /// A gate micro-step's request. The gate runs on monitor-owned code, so
    /// no entry or exit transition is recorded.
    pub fn delegate(&mut self, tid: usize, gate: u32, op: PrivilegedOp) -> Result<(), MonitorReject> {
        let live = self.pkrs(tid);
        match self.delegate_inner(tid, Caller::Gate(gate), op, live)? {
            Some(v) => {
                self.write_live_pkrs(tid, v, &format!("gate{}", gate));
                Ok(())
            }
            None => Ok(()),
        }
    }

    /// Validates and performs `op`. Returns the PKRS value the caller should
    /// resume with if the operation changed it.
    fn delegate_inner(
        &mut self,
        tid: usize,
        caller: Caller,
        op: PrivilegedOp,
        caller_pkrs: PkrsValue,
    ) -> Result<Option<PkrsValue>, MonitorReject> {
        let name = op.name();
        let detail = op.detail();
        let r = self.perform(tid, caller, op, caller_pkrs);
        let verdict = match &r {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("rejected:{}", e.label()),
        };
        let actor = match caller {
            Caller::Gate(_) => Actor::Monitor,
            Caller::Compartment(c) => Actor::Compartment(c),
        };
        self.mmu
            .trace
            .record("delegate", actor, format!("{} {} by={}", name, detail, caller), verdict);
        r
    }

    fn perform(
        &mut self,
        tid: usize,
        caller: Caller,
        op: PrivilegedOp,
        caller_pkrs: PkrsValue,
    ) -> Result<Option<PkrsValue>, MonitorReject> {
        let is_core = caller == Caller::Compartment(CompartmentId::CORE);
        let module = match caller {
            Caller::Compartment(c) if !is_core && c != CompartmentId::MONITOR => Some(c),
            _ => None,
        };
        match op {
            PrivilegedOp::WritePkrs(v) => {
                let v = PkrsValue(v);
                let ok = match caller {
                    Caller::Gate(_) => self.pkrs_whitelist().contains(&v),
                    // A compartment may only reinstate its own rights.
                    Caller::Compartment(c) => v == self.compartment(c).pkrs,
                };
                match (ok, caller) {
                    (true, _) => Ok(Some(v)),
                    (false, Caller::Gate(_)) => Err(MonitorReject::UnregisteredPkrs(v)),
                    (false, Caller::Compartment(_)) => Err(MonitorReject::PolicyViolation(format!(
                        "{} is not the caller's own rights",
                        v
                    ))),
                }
            }
            PrivilegedOp::ReadPkrs => {
                let cpu = &mut self.threads[tid].cpu;
                cpu.set_reg(Reg::Rax, caller_pkrs.0 as u64);
                cpu.set_reg(Reg::Rdx, 0);
                Ok(None)
            }
            PrivilegedOp::WriteCr3(v) => {
                let (pgdir, asid) = cr3_parts(v);
                let registered = self
                    .mmu
                    .space(asid)
                    .is_some_and(|s| s.pgdir == pgdir && s.cr3() == v);
                let permitted = match caller {
                    Caller::Gate(_) => registered,
                    Caller::Compartment(c) => {
                        registered && self.compartment(c).asid.is_none_or(|own| own == asid)
                    }
                };
                if !permitted {
                    return Err(MonitorReject::ForgedPgdir(v));
                }
                self.threads[tid].cpu.cr[3] = v;
                self.mmu.switch_address_space(asid, Actor::Monitor)?;
                Ok(None)
            }
            PrivilegedOp::WriteCr4(v) => {
                if v & CR4_PKS == 0 {
                    return Err(MonitorReject::PksDisableAttempt);
                }
                if module.is_some() {
                    return Err(MonitorReject::PolicyViolation("cr4 write by a module".into()));
                }
                self.threads[tid].cpu.cr[4] = v;
                Ok(None)
            }
            PrivilegedOp::WriteCr { cr, value } => {
                if module.is_some() || cr as usize >= self.threads[tid].cpu.cr.len() {
                    return Err(MonitorReject::PolicyViolation(format!("cr{} write", cr)));
                }
                self.threads[tid].cpu.cr[cr as usize] = value;
                Ok(None)
            }
            PrivilegedOp::ReadCr { cr, dst } => {
                let cpu = &mut self.threads[tid].cpu;
                let v = cpu.cr.get(cr as usize).copied().unwrap_or(0);
                cpu.set_reg(dst, v);
                Ok(None)
            }
            PrivilegedOp::WriteMsr { msr, value } => {
                if module.is_some() {
                    return Err(MonitorReject::PolicyViolation(format!("msr {:#x} write by a module", msr)));
                }
                self.threads[tid].cpu.msrs.insert(msr, value);
                Ok(None)
            }
            PrivilegedOp::ReadMsr { msr } => {
                let cpu = &mut self.threads[tid].cpu;
                let v = cpu.msrs.get(&msr).copied().unwrap_or(0);
                cpu.set_reg(Reg::Rax, v & 0xFFFF_FFFF);
                cpu.set_reg(Reg::Rdx, v >> 32);
                Ok(None)
            }
            PrivilegedOp::SysTable { op, addr } => {
                if !op.is_store() && module.is_some() {
                    return Err(MonitorReject::PolicyViolation(format!("{:?} by a module", op)));
                }
                let actor = match caller {
                    Caller::Compartment(c) => Actor::Compartment(c),
                    Caller::Gate(_) => Actor::Monitor,
                };
                // Memory operands are accessed with the caller's rights.
                let mut cpu = self.threads[tid].cpu.clone();
                cpu.write_pkrs(caller_pkrs.0);
                let instr = crate::isa::Instr::new(Op::SysTable {
                    op,
                    mem: crate::isa::MemRef::canonical(None, None, 0, addr as i32),
                });
                let mut bus = MachineBus::new(&mut self.mmu, caller_pkrs.0, actor);
                crate::isa::execute_privileged(&mut cpu, &mut bus, &instr)
                    .map_err(|f| MonitorReject::PolicyViolation(f.to_string()))?;
                let t = &mut self.threads[tid].cpu;
                t.gdtr = cpu.gdtr;
                t.idtr = cpu.idtr;
                Ok(None)
            }
            PrivilegedOp::AllocHeap { pages } => {
                let c = module.ok_or_else(|| MonitorReject::PolicyViolation("heap request by non-module".into()))?;
                let mut pool = self.compartments[c.0 as usize]
                    .pool
                    .clone()
                    .ok_or_else(|| MonitorReject::PolicyViolation(format!("{} has no private pool", c)))?;
                let r = self.mmu.alloc_private(&mut pool, pages, Actor::Monitor);
                self.compartments[c.0 as usize].pool = Some(pool);
                let r = r?;
                let heap = &mut self.compartments[c.0 as usize].heap;
                heap.end = heap.end.max(r.end);
                self.threads[tid].cpu.set_reg(Reg::Rax, r.start as u64);
                Ok(None)
            }
            PrivilegedOp::JitWrite { vaddr, bytes } => {
                let c = match caller {
                    Caller::Compartment(c) => c,
                    Caller::Gate(_) => return Err(MonitorReject::PolicyViolation("jit write by a gate".into())),
                };
                let comp = self.compartment(c);
                let end = vaddr as u64 + bytes.len() as u64;
                if !comp.jit || vaddr < comp.code.start || end > comp.code.end as u64 {
                    return Err(MonitorReject::PolicyViolation(format!(
                        "jit write to {:#x} outside own code",
                        vaddr
                    )));
                }
                self.jit_write(tid, vaddr, &bytes)?;
                Ok(None)
            }
        }
    }

    /// Transiently grants the monitor write access to the code pages in
    /// range, writes, and restores execute-only tagging.
    fn jit_write(&mut self, tid: usize, vaddr: u32, bytes: &[u8]) -> Result<(), MonitorReject> {
        let asid = self.mmu.active_space().asid;
        let pages: Vec<u32> = (page_of(vaddr)..=page_of(vaddr + bytes.len().max(1) as u32 - 1)).collect();
        for &vpn in &pages {
            let d = self.mmu.lookup_in(asid, page_base(vpn)).ok_or(MmuError::UnmappedAddress(page_base(vpn)))?;
            self.mmu.map(asid, page_base(vpn), PageDescriptor::data(d.frame, Pkey::MONITOR), Actor::Monitor)?;
            self.mmu
                .trace
                .record("jit-grant", Actor::Monitor, format!("t{} {:#x}", tid, page_base(vpn)), "ok");
        }
        let r = {
            let mut bus = MachineBus::new(&mut self.mmu, self.monitor.monitor_pkrs.0, Actor::Monitor);
            bus.write(vaddr, bytes)
        };
        for &vpn in &pages {
            let d = self.mmu.lookup_in(asid, page_base(vpn)).expect("granted page");
            self.mmu.map(asid, page_base(vpn), PageDescriptor::code(d.frame), Actor::Monitor)?;
            self.mmu
                .trace
                .record("jit-revoke", Actor::Monitor, format!("t{} {:#x}", tid, page_base(vpn)), "ok");
        }
        r.map_err(|f| MonitorReject::PolicyViolation(f.to_string()))
    }

    fn save_slot(tid: usize) -> u32 {
        SAVE_BASE + tid as u32 * SAVE_SLOT
    }

    fn read_u32(&self, vaddr: u32) -> u32 {
        let mut b = [0u8; 4];
        self.mmu
            .phys_read(self.mmu.active_space().asid, vaddr, &mut b)
            .expect("save area mapped");
        u32::from_le_bytes(b)
    }

    fn write_u32(&mut self, vaddr: u32, v: u32) {
        let asid = self.mmu.active_space().asid;
        self.mmu.phys_write(asid, vaddr, &v.to_le_bytes()).expect("save area mapped");
    }

    pub fn interrupt_depth(&self, tid: usize) -> u32 {
        self.read_u32(Self::save_slot(tid))
    }

    /// Hardware interrupt arrives on `tid`: push the live PKRS to the
    /// thread's save stack and drop to the restricted default.
    pub fn interrupt_entry(&mut self, tid: usize) -> Result<(), InterruptError> {
        let slot = Self::save_slot(tid);
        let depth = self.read_u32(slot);
        if depth >= MAX_INTERRUPT_DEPTH {
            self.mmu.trace.record("interrupt-entry", Actor::Hardware, format!("t{}", tid), "nesting-too-deep");
            return Err(InterruptError::NestingTooDeep);
        }
        let live = self.pkrs(tid);
        self.write_u32(slot + 4 + depth * 4, live.0);
        self.write_u32(slot, depth + 1);
        self.metrics.interrupts += 1;
        self.mmu.trace.record(
            "interrupt-entry",
            Actor::Hardware,
            format!("t{} depth={} saved={}", tid, depth + 1, live),
            "ok",
        );
        if self.defenses.interrupt_reset {
            let d = self.monitor.default_pkrs;
            self.write_live_pkrs(tid, d, "interrupt-entry");
        }
        Ok(())
    }

    pub fn interrupt_exit(&mut self, tid: usize) -> Result<(), InterruptError> {
        let slot = Self::save_slot(tid);
        let depth = self.read_u32(slot);
        if depth == 0 {
            self.mmu.trace.record("interrupt-exit", Actor::Hardware, format!("t{}", tid), "unbalanced");
            return Err(InterruptError::UnbalancedExit);
        }
        let saved = PkrsValue(self.read_u32(slot + 4 + (depth - 1) * 4));
        self.write_u32(slot, depth - 1);
        self.write_live_pkrs(tid, saved, "interrupt-exit");
        self.mmu.trace.record(
            "interrupt-exit",
            Actor::Hardware,
            format!("t{} depth={} restored={}", tid, depth - 1, saved),
            "ok",
        );
        Ok(())
    }

    /// Delivers an interrupt and runs `handler` in the handler context.
    pub fn run_interrupt<T>(
        &mut self,
        tid: usize,
        handler: impl FnOnce(&mut Machine, usize) -> T,
    ) -> Result<InterruptReport<T>, InterruptError> {
        self.interrupt_entry(tid)?;
        let handler_pkrs = self.pkrs(tid);
        let result = handler(self, tid);
        self.interrupt_exit(tid)?;
        Ok(InterruptReport {
            handler_pkrs,
            resumed_pkrs: self.pkrs(tid),
            result,
        })
    }

    /// Pkey-fault handler for shared pages: retags the page to the faulting
    /// compartment if a transfer rule for the pair admits the page contents.
    pub fn handle_page_fault(&mut self, tid: usize, vaddr: u32) -> Result<(), TransferDenied> {
        let r = self.try_transfer(tid, vaddr);
        let actor = self.actor_of(tid);
        let verdict = match &r {
            Ok(_) => "resumed".to_string(),
            Err(e) => format!("denied:{}", e.label()),
        };
        if r.is_ok() {
            self.metrics.transfers += 1;
        }
        self.mmu.trace.record("page-fault", actor, format!("t{} {:#x}", tid, vaddr), verdict);
        r
    }

    fn try_transfer(&mut self, tid: usize, vaddr: u32) -> Result<(), TransferDenied> {
        if self.mmu.raw_root().is_some() {
            return Err(TransferDenied::NotShared);
        }
        let asid = self.mmu.active_space().asid;
        let info = *self
            .shared_pages
            .get(&(asid, page_of(vaddr)))
            .ok_or(TransferDenied::NotShared)?;
        let tgt = self.current_compartment(tid).ok_or(TransferDenied::NoTransferRule)?;
        let desc = self.mmu.lookup_in(asid, vaddr).ok_or(TransferDenied::NotShared)?;
        let src = self
            .compartments
            .iter()
            .find(|c| c.pkey == desc.pkey && c.asid.map_or(c.id == CompartmentId::CORE, |a| a == asid))
            .map(|c| c.id)
            .ok_or(TransferDenied::NoTransferRule)?;
        if src == tgt {
            return Err(TransferDenied::SameOwner);
        }
        let base = page_base(page_of(vaddr));
        let rule = self
            .policy
            .transfer_rules
            .iter()
            .find(|r| r.src == src && r.tgt == tgt && r.class == info.class)
            .ok_or(TransferDenied::NoTransferRule)?;
        if self.defenses.transfer_validation {
            let mut page = vec![0u8; crate::mmu::PAGE_SIZE];
            self.mmu.phys_read(asid, base, &mut page).expect("shared page mapped");
            match validate_transfer(std::slice::from_ref(rule), src, tgt, &page) {
                Ok(_) => {}
                Err(TransferError::NoMatchingRule) => return Err(TransferDenied::NoTransferRule),
                Err(TransferError::RangeViolation { offset, value }) => {
                    return Err(TransferDenied::RangeViolation { offset, value })
                }
            }
        }
        let pkey = self.compartment(tgt).pkey;
        self.mmu
            .set_pkey(asid, base, pkey, Actor::Monitor)
            .expect("monitor retag of a mapped page");
        Ok(())
    }
}
