//! The simulated machine: MMU, compartments, threads, and the glue that runs
//! subset programs inside a compartment.
//!
//! Virtual layout (directory slots of 2 MiB):
//!
//! ```text
//! dir 0  shared   core kernel heap and stack              pkey0
//! dir 1  shared   code of every compartment, gate stubs   pkey1 (XOM)
//! dir 2  shared   switch gate table, saved PKRS slots     pkey2
//! dir 3  shared   page-table pool                         pkey2
//! dir 4  private  module heaps (16-page pool per slot)    module pkey
//! dir 5  private  module stacks                           module pkey
//! dir 6  private  shared-object pages                     owner pkey
//! dir 7  private  unused
//! ```

use crate::isa::{self, Bus, Cpu, Instr, Op, PrivOpcode, PrivilegeHooks, Reg, StepFault};
use crate::metrics::Metrics;
use crate::mmu::{
    dir_base, page_of, AccessKind, Actor, Asid, CompartmentId, DenyReason, FrameId, Mmu, MmuError,
    PageDescriptor, Pkey, PkrsValue, PrivatePool, DIR_CODE, DIR_CORE, DIR_MONITOR, PAGE_SIZE,
};
use crate::monitor::MonitorState;
use crate::policy::{ClassKey, CompiledPolicy};
use crate::sgt::SwitchGateTable;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use thiserror::Error;

const P: u32 = PAGE_SIZE as u32;

pub const MAX_COMPARTMENTS: usize = 240;
pub const MAX_THREADS: usize = 256;
pub const CODE_PAGES: u32 = 2;
pub const HEAP_POOL_PAGES: u32 = 16;
pub const STACK_PAGES: u32 = 2;

pub const CORE_HEAP: u32 = dir_base(DIR_CORE) + P;
pub const CORE_HEAP_PAGES: u32 = 4;
pub const CORE_STACK: u32 = dir_base(DIR_CORE) + 256 * P;
pub const STUB_BASE: u32 = dir_base(DIR_CODE) + 496 * P;
pub const STUB_PAGES: u32 = 16;
pub const SGT_BASE: u32 = dir_base(DIR_MONITOR);
pub const SGT_PAGES: u32 = 8;
pub const SAVE_BASE: u32 = dir_base(DIR_MONITOR) + 16 * P;
pub const SAVE_PAGES: u32 = 4;
pub const SAVE_SLOT: u32 = 64;
pub const MONITOR_STACK: u32 = dir_base(DIR_MONITOR) + 32 * P;
pub const HEAP_BASE: u32 = dir_base(4);
pub const STACK_BASE: u32 = dir_base(5);
pub const SHARED_BASE: u32 = dir_base(6);
/// Never mapped by the machine; free for forged mappings in tests.
pub const SCRATCH_BASE: u32 = dir_base(7);

pub fn code_base(id: CompartmentId) -> u32 {
    dir_base(DIR_CODE) + id.0 as u32 * CODE_PAGES * P
}

/// A protection that can be switched off to show it is load-bearing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Defense {
    Xom,
    PtProtection,
    Deprivation,
    Loopback,
    InterruptReset,
    TransferValidation,
}

impl Defense {
    pub const ALL: [Defense; 6] = [
        Defense::Xom,
        Defense::PtProtection,
        Defense::Deprivation,
        Defense::Loopback,
        Defense::InterruptReset,
        Defense::TransferValidation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Defense::Xom => "no-xom",
            Defense::PtProtection => "no-pt-protection",
            Defense::Deprivation => "no-deprivation",
            Defense::Loopback => "no-loopback-check",
            Defense::InterruptReset => "no-interrupt-reset",
            Defense::TransferValidation => "no-transfer-validation",
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Defenses {
    pub xom: bool,
    pub pt_protection: bool,
    pub deprivation: bool,
    pub loopback: bool,
    pub interrupt_reset: bool,
    pub transfer_validation: bool,
}

impl Default for Defenses {
    fn default() -> Self {
        Defenses {
            xom: true,
            pt_protection: true,
            deprivation: true,
            loopback: true,
            interrupt_reset: true,
            transfer_validation: true,
        }
    }
}

impl Defenses {
    pub fn without(mut self, d: Defense) -> Defenses {
        *self.flag(d) = false;
        self
    }

    pub fn enabled(mut self, d: Defense) -> bool {
        *self.flag(d)
    }

    fn flag(&mut self, d: Defense) -> &mut bool {
        match d {
            Defense::Xom => &mut self.xom,
            Defense::PtProtection => &mut self.pt_protection,
            Defense::Deprivation => &mut self.deprivation,
            Defense::Loopback => &mut self.loopback,
            Defense::InterruptReset => &mut self.interrupt_reset,
            Defense::TransferValidation => &mut self.transfer_validation,
        }
    }
}

/// Rights of a compartment owning `own`: full access to its pkey, read-only
/// monitor data, everything else disabled. Code is execute-only unless XOM
/// is switched off.
pub fn compartment_pkrs(own: Pkey, xom: bool) -> PkrsValue {
    let v = PkrsValue::ALL_DISABLED
        .with(own, false, false)
        .with(Pkey::MONITOR, true, false);
    if xom {
        v
    } else {
        v.with(Pkey::CODE, true, false)
    }
}

pub fn monitor_pkrs(xom: bool) -> PkrsValue {
    let v = PkrsValue::ALL_DISABLED.with(Pkey::MONITOR, false, false);
    if xom {
        v
    } else {
        v.with(Pkey::CODE, true, false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compartment {
    pub id: CompartmentId,
    pub name: String,
    /// `None` for the core kernel and the monitor.
    pub asid: Option<Asid>,
    pub pkey: Pkey,
    pub pkrs: PkrsValue,
    pub code: Range<u32>,
    pub heap: Range<u32>,
    pub stack: Range<u32>,
    pub pool: Option<PrivatePool>,
    pub jit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thread {
    pub cpu: Cpu,
    /// Compartment the thread was spawned in.
    pub home: CompartmentId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedPageInfo {
    pub class: ClassKey,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error(transparent)]
    Mmu(#[from] MmuError),
    #[error("too many compartments ({0})")]
    TooManyCompartments(usize),
    #[error("too many threads")]
    TooManyThreads,
    #[error("program of {0} bytes does not fit the code region")]
    ProgramTooLarge(usize),
    #[error("shared class {0} has no module member")]
    BadSharedClass(ClassKey),
    #[error("gate registration failed: {0}")]
    Gate(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProgramOutcome {
    Halted { steps: usize },
    Fault { fault: StepFault, steps: usize },
    StepLimit,
}

impl ProgramOutcome {
    pub fn is_halted(&self) -> bool {
        matches!(self, ProgramOutcome::Halted { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub mmu: Mmu,
    pub policy: CompiledPolicy,
    pub defenses: Defenses,
    pub compartments: Vec<Compartment>,
    pub threads: Vec<Thread>,
    pub sgt: SwitchGateTable,
    pub monitor: MonitorState,
    pub shared_pages: BTreeMap<(Asid, u32), SharedPageInfo>,
    pub metrics: Metrics,
    pub stubs: Option<crate::deprivilege::StubTable>,
}

impl Machine {
    pub fn new(policy: CompiledPolicy, defenses: Defenses) -> Result<Machine, MachineError> {
        let n = policy.compartments.len();
        if n > MAX_COMPARTMENTS {
            return Err(MachineError::TooManyCompartments(n));
        }
        let pt_pkey = if defenses.pt_protection { Pkey::MONITOR } else { Pkey::CORE };
        let mut mmu = Mmu::with_pt_pkey(pt_pkey);
        let m = Actor::Monitor;
        for asid in policy.spaces.keys() {
            mmu.create_space(*asid, m)?;
        }
        let any = *policy.spaces.keys().next().unwrap();
        let map_range = |mmu: &mut Mmu, asid: Asid, base: u32, pages: u32, pkey: Pkey| -> Result<(), MmuError> {
            for i in 0..pages {
                let f = mmu.phys.alloc();
                mmu.map(asid, base + i * P, PageDescriptor::data(f, pkey), m)?;
            }
            Ok(())
        };
        map_range(&mut mmu, any, CORE_HEAP, CORE_HEAP_PAGES, Pkey::CORE)?;
        map_range(&mut mmu, any, CORE_STACK, STACK_PAGES, Pkey::CORE)?;
        map_range(&mut mmu, any, SGT_BASE, SGT_PAGES, Pkey::MONITOR)?;
        map_range(&mut mmu, any, SAVE_BASE, SAVE_PAGES, Pkey::MONITOR)?;
        map_range(&mut mmu, any, MONITOR_STACK, STACK_PAGES, Pkey::MONITOR)?;
        for i in 0..STUB_PAGES {
            let f = mmu.phys.alloc();
            mmu.phys.frame_mut(f).fill(0xC3);
            mmu.map(any, STUB_BASE + i * P, PageDescriptor::code(f), m)?;
        }

        let xom = defenses.xom;
        let mut compartments = Vec::with_capacity(n);
        for info in &policy.compartments {
            let code = code_base(info.id)..code_base(info.id) + CODE_PAGES * P;
            for i in 0..CODE_PAGES {
                let f = mmu.phys.alloc();
                mmu.phys.frame_mut(f).fill(0x90);
                mmu.map(any, code.start + i * P, PageDescriptor::code(f), m)?;
            }
            let (pkrs, heap, stack, pool) = match info.id {
                CompartmentId::CORE => (
                    compartment_pkrs(Pkey::CORE, xom),
                    CORE_HEAP..CORE_HEAP + CORE_HEAP_PAGES * P,
                    CORE_STACK..CORE_STACK + STACK_PAGES * P,
                    None,
                ),
                CompartmentId::MONITOR => (
                    monitor_pkrs(xom),
                    SGT_BASE..SGT_BASE,
                    MONITOR_STACK..MONITOR_STACK + STACK_PAGES * P,
                    None,
                ),
                _ => {
                    let asid = info.asid.unwrap();
                    let slot = (info.pkey.value() - Pkey::FIRST_MODULE) as u32;
                    let mut pool = PrivatePool::new(
                        asid,
                        info.pkey,
                        page_of(HEAP_BASE) + slot * HEAP_POOL_PAGES,
                        HEAP_POOL_PAGES,
                    );
                    let heap = mmu.alloc_private(&mut pool, info.heap_pages.min(HEAP_POOL_PAGES), m)?;
                    let sbase = STACK_BASE + slot * 2 * STACK_PAGES * P;
                    map_range(&mut mmu, asid, sbase, STACK_PAGES, info.pkey)?;
                    (
                        compartment_pkrs(info.pkey, xom),
                        heap,
                        sbase..sbase + STACK_PAGES * P,
                        Some(pool),
                    )
                }
            };
            compartments.push(Compartment {
                id: info.id,
                name: info.name.clone(),
                asid: info.asid,
                pkey: info.pkey,
                pkrs,
                code,
                heap,
                stack,
                pool,
                jit: info.jit,
            });
        }

        let mut shared_pages = BTreeMap::new();
        let mut next_shared: BTreeMap<Asid, u32> = BTreeMap::new();
        for (index, page) in policy.layout.pages.iter().enumerate() {
            let ClassKey(a, b) = page.class;
            let asid = compartments[a.0 as usize]
                .asid
                .or(compartments[b.0 as usize].asid)
                .ok_or(MachineError::BadSharedClass(page.class))?;
            let owner = &compartments[a.0 as usize];
            let slot = next_shared.entry(asid).or_insert(0);
            let va = SHARED_BASE + *slot * P;
            *slot += 1;
            map_range(&mut mmu, asid, va, 1, owner.pkey)?;
            shared_pages.insert((asid, page_of(va)), SharedPageInfo { class: page.class, index });
        }

        let monitor = MonitorState::new(&compartments, xom);
        let mut machine = Machine {
            mmu,
            policy,
            defenses,
            compartments,
            threads: Vec::new(),
            sgt: SwitchGateTable::new(SGT_BASE, SGT_PAGES * P / crate::sgt::ENTRY_SIZE),
            monitor,
            shared_pages,
            metrics: Metrics::default(),
            stubs: None,
        };
        machine.register_monitor_gates();
        let gates = machine.policy.gates.clone();
        for (name, from, to) in gates {
            machine
                .register_gate(&name, from, to, Actor::Monitor)
                .map_err(|e| MachineError::Gate(format!("{}: {}", name, e)))?;
        }
        Ok(machine)
    }

    pub fn compartment(&self, id: CompartmentId) -> &Compartment {
        &self.compartments[id.0 as usize]
    }

    pub fn compartment_by_name(&self, name: &str) -> Option<&Compartment> {
        self.compartments.iter().find(|c| c.name == name)
    }

    /// Address space a compartment runs in; the core kernel and the monitor
    /// run in whichever space is active.
    pub fn space_of(&self, id: CompartmentId) -> Asid {
        self.compartment(id).asid.unwrap_or_else(|| self.mmu.active_space().asid)
    }

    pub fn cr3_of(&self, asid: Asid) -> u64 {
        self.mmu.space(asid).expect("registered space").cr3()
    }

    pub fn spawn_thread(&mut self, home: CompartmentId) -> Result<usize, MachineError> {
        if self.threads.len() >= MAX_THREADS {
            return Err(MachineError::TooManyThreads);
        }
        let c = self.compartment(home).clone();
        let asid = self.space_of(home);
        let mut cpu = Cpu::with_pkrs(c.pkrs.0);
        cpu.cr[3] = self.cr3_of(asid);
        cpu.ip = c.code.start;
        cpu.set_reg(Reg::Rsp, c.stack.end as u64);
        self.threads.push(Thread { cpu, home });
        Ok(self.threads.len() - 1)
    }

    pub fn pkrs(&self, tid: usize) -> PkrsValue {
        PkrsValue(self.threads[tid].cpu.pkrs())
    }

    /// Compartment identified by the thread's live PKRS within the active
    /// address space.
    pub fn current_compartment(&self, tid: usize) -> Option<CompartmentId> {
        let pkrs = self.pkrs(tid);
        let asid = self.mmu.active_space().asid;
        self.compartments
            .iter()
            .find(|c| c.pkrs == pkrs && c.asid.is_none_or(|a| a == asid))
            .map(|c| c.id)
    }

    pub fn actor_of(&self, tid: usize) -> Actor {
        Actor::Compartment(self.current_compartment(tid).unwrap_or(self.threads[tid].home))
    }

    /// Makes the thread's address space the active one (a context switch,
    /// performed by the monitor).
    pub fn activate(&mut self, tid: usize) -> Result<(), MmuError> {
        if self.mmu.raw_root().is_some() {
            return Ok(());
        }
        let (_, asid) = crate::mmu::cr3_parts(self.threads[tid].cpu.cr[3]);
        if self.mmu.active_space().asid != asid {
            self.mmu.switch_address_space(asid, Actor::Monitor)?;
        }
        Ok(())
    }

    /// The single path by which the monitor changes a thread's live PKRS.
    pub(crate) fn write_live_pkrs(&mut self, tid: usize, v: PkrsValue, via: &str) {
        let old = self.pkrs(tid);
        self.threads[tid].cpu.write_pkrs(v.0);
        self.mmu
            .trace
            .record("pkrs-write", Actor::Monitor, format!("t{} {} -> {} via={}", tid, old, v, via), "ok");
    }

    /// A data access attempted by the thread under its live rights.
    pub fn try_read(&mut self, tid: usize, vaddr: u32, len: usize) -> Result<Vec<u8>, DenyReason> {
        self.activate(tid).map_err(|_| DenyReason::Unmapped)?;
        let mut buf = vec![0u8; len];
        let actor = self.actor_of(tid);
        let mut bus = MachineBus::new(&mut self.mmu, self.threads[tid].cpu.pkrs(), actor);
        match bus.read(vaddr, &mut buf) {
            Ok(()) => Ok(buf),
            Err(StepFault::AccessFault { reason, .. }) => {
                self.note_fault(actor, reason.label(), vaddr);
                Err(reason)
            }
            Err(_) => unreachable!("bus reads only raise access faults"),
        }
    }

    pub fn try_write(&mut self, tid: usize, vaddr: u32, data: &[u8]) -> Result<(), DenyReason> {
        self.activate(tid).map_err(|_| DenyReason::Unmapped)?;
        let actor = self.actor_of(tid);
        let mut bus = MachineBus::new(&mut self.mmu, self.threads[tid].cpu.pkrs(), actor);
        match bus.write(vaddr, data) {
            Ok(()) => Ok(()),
            Err(StepFault::AccessFault { reason, .. }) => {
                self.note_fault(actor, reason.label(), vaddr);
                Err(reason)
            }
            Err(_) => unreachable!("bus writes only raise access faults"),
        }
    }

    /// Like [`Machine::try_read`], but a pkey violation on a shared page goes
    /// through the ownership-transfer fault handler and is retried once.
    pub fn read_with_transfer(&mut self, tid: usize, vaddr: u32, len: usize) -> Result<Vec<u8>, AccessVerdict> {
        self.access_with_transfer(tid, vaddr, |m| m.try_read(tid, vaddr, len))
    }

    pub fn write_with_transfer(&mut self, tid: usize, vaddr: u32, data: &[u8]) -> Result<(), AccessVerdict> {
        self.access_with_transfer(tid, vaddr, |m| m.try_write(tid, vaddr, data))
    }

    fn access_with_transfer<T>(
        &mut self,
        tid: usize,
        vaddr: u32,
        mut f: impl FnMut(&mut Machine) -> Result<T, DenyReason>,
    ) -> Result<T, AccessVerdict> {
        match f(self) {
            Ok(v) => Ok(v),
            Err(DenyReason::AccessDisabled(_)) => {
                self.handle_page_fault(tid, vaddr).map_err(AccessVerdict::Transfer)?;
                f(self).map_err(AccessVerdict::Deny)
            }
            Err(r) => Err(AccessVerdict::Deny(r)),
        }
    }

    fn note_fault(&mut self, actor: Actor, label: &str, vaddr: u32) {
        self.metrics.record_fault(label);
        self.mmu.trace.record("fault", actor, format!("{:#x}", vaddr), label);
    }

    /// Loads `code` into the home compartment's code pages (a monitor
    /// operation) and runs it from the start until it falls off the end.
    pub fn run_program(&mut self, tid: usize, code: &[u8], max_steps: usize) -> Result<ProgramOutcome, MachineError> {
        let home = self.threads[tid].home;
        let region = self.compartment(home).code.clone();
        if code.len() > (region.end - region.start) as usize {
            return Err(MachineError::ProgramTooLarge(code.len()));
        }
        let asid = self.mmu.active_space().asid;
        self.mmu.phys_write(asid, region.start, code)?;
        let end = region.start + code.len() as u32;
        self.threads[tid].cpu.ip = region.start;
        Ok(self.resume(tid, end, max_steps))
    }

    /// Steps the thread until `ip == end`, a fault, or the step limit.
    pub fn resume(&mut self, tid: usize, end: u32, max_steps: usize) -> ProgramOutcome {
        let mut steps = 0;
        while steps < max_steps {
            if self.threads[tid].cpu.ip == end {
                return ProgramOutcome::Halted { steps };
            }
            if let Err(fault) = self.step_thread(tid) {
                let label = match &fault {
                    StepFault::AccessFault { reason, .. } => reason.label().to_string(),
                    StepFault::DecodeFault { .. } => "decode".to_string(),
                    StepFault::PrivilegeTrap(_) => "privilege-trap".to_string(),
                    StepFault::MonitorRejected { .. } => "monitor-rejected".to_string(),
                };
                let actor = self.actor_of(tid);
                self.metrics.record_fault(&label);
                let ip = self.threads[tid].cpu.ip;
                self.mmu.trace.record("fault", actor, format!("ip={:#x} {}", ip, fault), label);
                return ProgramOutcome::Fault { fault, steps };
            }
            steps += 1;
        }
        if self.threads[tid].cpu.ip == end {
            ProgramOutcome::Halted { steps }
        } else {
            ProgramOutcome::StepLimit
        }
    }

    /// One instruction, with transparent ownership transfer on pkey faults
    /// against shared pages and monitor handling of gate-stub calls.
    pub fn step_thread(&mut self, tid: usize) -> Result<(), StepFault> {
        self.activate(tid).map_err(|_| StepFault::AccessFault {
            addr: self.threads[tid].cpu.ip,
            kind: AccessKind::Execute,
            reason: DenyReason::Unmapped,
        })?;
        let mut retried = false;
        loop {
            let before = self.threads[tid].cpu.clone();
            let actor = self.actor_of(tid);
            let mut hooks = CompartmentHooks {
                deprivation: self.defenses.deprivation,
                stub_range: self.stubs.as_ref().map(|s| s.range()),
                stub_hit: None,
                log: Vec::new(),
            };
            let mut cpu = std::mem::take(&mut self.threads[tid].cpu);
            let r = {
                let mut bus = MachineBus::new(&mut self.mmu, cpu.pkrs(), actor);
                isa::step(&mut cpu, &mut bus, &mut hooks)
            };
            self.threads[tid].cpu = cpu;
            for (kind, args, verdict) in hooks.log {
                self.mmu.trace.record(kind, actor, args, verdict);
            }
            match r {
                Ok(_) => {
                    if let Some(target) = hooks.stub_hit {
                        if let Err(e) = self.run_stub(tid, target) {
                            self.threads[tid].cpu = before;
                            return Err(e);
                        }
                    }
                    let cr3 = self.threads[tid].cpu.cr[3];
                    if cr3 != before.cr[3] {
                        self.mmu.load_raw_cr3(cr3, actor);
                    }
                    return Ok(());
                }
                Err(StepFault::AccessFault {
                    addr,
                    kind: kind @ (AccessKind::Read | AccessKind::Write),
                    reason: DenyReason::AccessDisabled(_),
                }) if !retried => {
                    self.threads[tid].cpu = before;
                    if self.handle_page_fault(tid, addr).is_ok() {
                        retried = true;
                        continue;
                    }
                    return Err(StepFault::AccessFault {
                        addr,
                        kind,
                        reason: DenyReason::AccessDisabled(
                            self.mmu.lookup_in(self.mmu.active_space().asid, addr).map_or(Pkey::CORE, |d| d.pkey),
                        ),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn run_stub(&mut self, tid: usize, target: u32) -> Result<(), StepFault> {
        let op = self
            .stubs
            .as_ref()
            .and_then(|s| s.lookup(target))
            .expect("stub hit inside the table range");
        let req = crate::monitor::PrivilegedOp::from_instruction(&op, &self.threads[tid].cpu);
        let kind = op.privileged().unwrap_or(PrivOpcode::Wrmsr);
        self.monitor_call(tid, req)
            .map(|_| ())
            .map_err(|e| StepFault::MonitorRejected {
                op: kind,
                reason: e.to_string(),
            })
    }

    /// PT frames and saved-PKRS bytes, for integrity comparisons.
    pub fn protected_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for va in self.mmu.pt_pages_in_use().step_by(PAGE_SIZE) {
            let d = self.mmu.lookup_in(Asid(0), va).expect("pt page mapped");
            out.extend_from_slice(self.mmu.phys.frame(d.frame));
        }
        let any = self.mmu.active_space().asid;
        let mut save = vec![0u8; (SAVE_PAGES * P) as usize];
        self.mmu.phys_read(any, SAVE_BASE, &mut save).expect("save area mapped");
        out.extend_from_slice(&save);
        out
    }

    /// Owner compartment of every mapped module, core and shared page in the
    /// space: `(vaddr, pkey)` pairs.
    pub fn page_owners(&self, asid: Asid) -> Vec<(u32, Pkey)> {
        let mut out = Vec::new();
        for c in &self.compartments {
            if c.asid.is_some_and(|a| a != asid) {
                continue;
            }
            for va in c.heap.clone().step_by(PAGE_SIZE).chain(c.stack.clone().step_by(PAGE_SIZE)) {
                if let Some(d) = self.mmu.lookup_in(asid, va) {
                    out.push((va, d.pkey));
                }
            }
        }
        for (a, vpn) in self.shared_pages.keys() {
            if *a == asid {
                let va = crate::mmu::page_base(*vpn);
                out.push((va, self.mmu.lookup_in(asid, va).expect("shared page mapped").pkey));
            }
        }
        out
    }

    /// Virtual address of the `index`-th page of the policy's shared layout.
    pub fn shared_page_addr(&self, index: usize) -> Option<(Asid, u32)> {
        self.shared_pages
            .iter()
            .find(|(_, info)| info.index == index)
            .map(|((a, vpn), _)| (*a, crate::mmu::page_base(*vpn)))
    }

    pub fn frame_of(&self, asid: Asid, vaddr: u32) -> Option<FrameId> {
        self.mmu.lookup_in(asid, vaddr).map(|d| d.frame)
    }

    /// Recomputes metrics from the audit log.
    pub fn audit_metrics(&self) -> Metrics {
        Metrics::from_audit(&self.mmu.trace.audit_log())
    }
}

/// Outcome of an access that may trigger an ownership transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessVerdict {
    Deny(DenyReason),
    Transfer(crate::monitor::TransferDenied),
}

impl fmt::Display for AccessVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessVerdict::Deny(r) => write!(f, "{}", r),
            AccessVerdict::Transfer(t) => write!(f, "transfer refused: {}", t),
        }
    }
}

/// Memory as seen by a thread with a given PKRS.
pub struct MachineBus<'a> {
    mmu: &'a mut Mmu,
    pkrs: PkrsValue,
    actor: Actor,
}

impl<'a> MachineBus<'a> {
    pub fn new(mmu: &'a mut Mmu, pkrs: u32, actor: Actor) -> MachineBus<'a> {
        MachineBus {
            mmu,
            pkrs: PkrsValue(pkrs),
            actor,
        }
    }

    fn chunks(&mut self, addr: u32, len: usize, kind: AccessKind) -> Result<Vec<(FrameId, usize, usize)>, StepFault> {
        let mut out = Vec::new();
        let mut a = addr;
        let mut left = len;
        while left > 0 {
            let off = a as usize & (PAGE_SIZE - 1);
            let n = left.min(PAGE_SIZE - off);
            match self.mmu.access(self.pkrs, a, kind, self.actor) {
                Ok(f) => out.push((f, off, n)),
                Err(reason) => return Err(StepFault::AccessFault { addr: a, kind, reason }),
            }
            a = a.wrapping_add(n as u32);
            left -= n;
        }
        Ok(out)
    }
}

impl Bus for MachineBus<'_> {
    fn fetch(&mut self, addr: u32, buf: &mut [u8]) -> (usize, Option<StepFault>) {
        let mut done = 0;
        while done < buf.len() {
            let a = addr.wrapping_add(done as u32);
            let off = a as usize & (PAGE_SIZE - 1);
            let n = (buf.len() - done).min(PAGE_SIZE - off);
            match self.mmu.access(self.pkrs, a, AccessKind::Execute, self.actor) {
                Ok(f) => {
                    buf[done..done + n].copy_from_slice(&self.mmu.phys.frame(f)[off..off + n]);
                    done += n;
                }
                Err(reason) => {
                    return (
                        done,
                        Some(StepFault::AccessFault {
                            addr: a,
                            kind: AccessKind::Execute,
                            reason,
                        }),
                    )
                }
            }
        }
        (done, None)
    }

    fn read(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), StepFault> {
        let chunks = self.chunks(addr, buf.len(), AccessKind::Read)?;
        let mut at = 0;
        for (f, off, n) in chunks {
            buf[at..at + n].copy_from_slice(&self.mmu.phys.frame(f)[off..off + n]);
            at += n;
        }
        Ok(())
    }

    fn write(&mut self, addr: u32, data: &[u8]) -> Result<(), StepFault> {
        let chunks = self.chunks(addr, data.len(), AccessKind::Write)?;
        let mut at = 0;
        for (f, off, n) in chunks {
            self.mmu.phys.frame_mut(f)[off..off + n].copy_from_slice(&data[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Privilege hooks for code running in a compartment.
struct CompartmentHooks {
    deprivation: bool,
    stub_range: Option<Range<u32>>,
    stub_hit: Option<u32>,
    log: Vec<(&'static str, String, String)>,
}

impl PrivilegeHooks for CompartmentHooks {
    fn privileged(&mut self, cpu: &mut Cpu, bus: &mut dyn Bus, instr: &Instr) -> Result<(), StepFault> {
        let op = instr.op.privileged().expect("privileged op");
        if self.deprivation {
            self.log.push(("trap", format!("{} at {:#x}", instr.op, cpu.ip), "privilege-trap".into()));
            return Err(StepFault::PrivilegeTrap(op));
        }
        let before = cpu.pkrs();
        isa::execute_privileged(cpu, bus, instr)?;
        if cpu.pkrs() != before {
            self.log.push((
                "pkrs-write",
                format!("{} -> {} via=direct", PkrsValue(before), PkrsValue(cpu.pkrs())),
                "ok".into(),
            ));
        }
        self.log.push(("privileged", format!("{}", instr.op), "executed-direct".into()));
        Ok(())
    }

    fn stub_call(&mut self, _cpu: &mut Cpu, _bus: &mut dyn Bus, target: u32) -> Option<Result<(), StepFault>> {
        match &self.stub_range {
            Some(r) if r.contains(&target) => {
                self.stub_hit = Some(target);
                Some(Ok(()))
            }
            _ => None,
        }
    }
}

impl Op {
    /// Whether the instruction is a call into `range`.
    pub fn calls_into(&self, at: u32, range: &Range<u32>) -> bool {
        match self {
            Op::Call { rel } => range.contains(&at.wrapping_add(5).wrapping_add(*rel as u32)),
            _ => false,
        }
    }
}
