//! Switch gate table and the seven-step switch sequence.
//!
//! Entries live in monitor-tagged memory, so compartments can read them but
//! only the monitor can write them. Gates come in pairs: an even id `x`
//! switches caller to callee and `x + 1` returns.

use crate::machine::{code_base, Machine};
use crate::mmu::{cr3_parts, Actor, Asid, CompartmentId, FrameId, PkrsValue};
use crate::isa::Reg;
use crate::monitor::{MonitorReject, PrivilegedOp};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

pub const ENTRY_SIZE: u32 = 64;
const ENTRY_MAGIC: u32 = 0x4754_4531;
/// Gate pair reserved for entering and leaving the monitor.
pub const MONITOR_ENTRY_GATE: u32 = 0;
pub const MONITOR_EXIT_GATE: u32 = 1;
/// Offset in a compartment's code region where a switched-away call resumes.
pub const GATE_EXIT_OFFSET: u32 = 0x40;
/// Re-executions of S4 tolerated before the gate gives up.
pub const LOOP_LIMIT: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GateEndpoint {
    pub comp: CompartmentId,
    pub asid: Asid,
    pub pgdir: FrameId,
    pub addr: u32,
    pub pkrs: PkrsValue,
    pub sp: u32,
}

impl GateEndpoint {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.comp.0.to_le_bytes());
        out.extend_from_slice(&self.asid.0.to_le_bytes());
        out.extend_from_slice(&self.pgdir.0.to_le_bytes());
        out.extend_from_slice(&self.addr.to_le_bytes());
        out.extend_from_slice(&self.pkrs.0.to_le_bytes());
        out.extend_from_slice(&self.sp.to_le_bytes());
    }

    fn decode(b: &[u8]) -> GateEndpoint {
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        GateEndpoint {
            comp: CompartmentId(u16_at(0)),
            asid: Asid(u16_at(2)),
            pgdir: FrameId(u32_at(4)),
            addr: u32_at(8),
            pkrs: PkrsValue(u32_at(12)),
            sp: u32_at(16),
        }
    }

    pub fn cr3(&self) -> u64 {
        crate::mmu::cr3_value(self.pgdir, self.asid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GateEntry {
    pub id: u32,
    pub src: GateEndpoint,
    pub tgt: GateEndpoint,
}

impl GateEntry {
    pub fn to_bytes(&self) -> [u8; ENTRY_SIZE as usize] {
        let mut v = Vec::with_capacity(ENTRY_SIZE as usize);
        v.extend_from_slice(&self.id.to_le_bytes());
        v.extend_from_slice(&ENTRY_MAGIC.to_le_bytes());
        self.src.encode(&mut v);
        self.tgt.encode(&mut v);
        v.resize(ENTRY_SIZE as usize, 0);
        v.try_into().unwrap()
    }

    pub fn from_bytes(b: &[u8]) -> Option<GateEntry> {
        if b.len() < ENTRY_SIZE as usize || b[4..8] != ENTRY_MAGIC.to_le_bytes() {
            return None;
        }
        Some(GateEntry {
            id: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            src: GateEndpoint::decode(&b[8..28]),
            tgt: GateEndpoint::decode(&b[28..48]),
        })
    }

    pub fn is_cross_space(&self) -> bool {
        self.src.asid != self.tgt.asid
    }

    /// `(pkrs, sp, ip)` a completed switch through this entry must produce.
    pub fn target_triple(&self) -> (PkrsValue, u32, u32) {
        (self.tgt.pkrs, self.tgt.sp, self.tgt.addr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchGateTable {
    pub base: u32,
    pub capacity: u32,
    count: u32,
    names: BTreeMap<String, u32>,
    targets: BTreeSet<PkrsValue>,
    triples: BTreeSet<(u32, u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GateRejected {
    #[error("transition {0} -> {1} is not allowed by the policy")]
    TransitionNotAllowed(CompartmentId, CompartmentId),
    #[error("gate name {0} already registered")]
    DuplicateGate(String),
    #[error("malformed gate metadata: {0}")]
    MalformedMetadata(String),
    #[error("gate table full")]
    TableFull,
}

impl SwitchGateTable {
    pub fn new(base: u32, capacity: u32) -> SwitchGateTable {
        SwitchGateTable {
            base,
            capacity,
            count: 0,
            names: BTreeMap::new(),
            targets: BTreeSet::new(),
            triples: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> u32 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = (&str, u32)> {
        self.names.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Target PKRS values of all registered entries.
    pub fn target_values(&self) -> BTreeSet<PkrsValue> {
        self.targets.clone()
    }

    pub fn is_registered_triple(&self, t: (PkrsValue, u32, u32)) -> bool {
        self.triples.contains(&(t.0 .0, t.1, t.2))
    }

    pub fn entry_addr(&self, id: u32) -> u32 {
        self.base + id * ENTRY_SIZE
    }
}

/// Steps of the switch sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MicroStep {
    /// Load the entry named by the gate register.
    S1,
    /// Verify the caller matches the entry's source.
    S2,
    /// Switch address space (cross-space gates only).
    S3,
    /// Write the target PKRS.
    S4,
    /// Re-read the entry and loop back to S4 if PKRS disagrees.
    S5,
    /// Switch stack.
    S6,
    /// Jump to the target entry point.
    S7,
}

impl MicroStep {
    pub const ALL: [MicroStep; 7] = [
        MicroStep::S1,
        MicroStep::S2,
        MicroStep::S3,
        MicroStep::S4,
        MicroStep::S5,
        MicroStep::S6,
        MicroStep::S7,
    ];

    fn next(self) -> Option<MicroStep> {
        MicroStep::ALL.get(self as usize + 1).copied()
    }
}

impl fmt::Display for MicroStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", *self as usize + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GateFault {
    #[error("gate {0} is not registered")]
    Unregistered(u32),
    #[error("caller does not match the gate source")]
    SourceMismatch,
    #[error("monitor rejected the switch: {0}")]
    Rejected(MonitorReject),
    #[error("loop-back limit exceeded")]
    LoopLimit,
}

impl GateFault {
    pub fn label(&self) -> &'static str {
        match self {
            GateFault::Unregistered(_) => "unregistered",
            GateFault::SourceMismatch => "source-mismatch",
            GateFault::Rejected(_) => "rejected",
            GateFault::LoopLimit => "loop-limit",
        }
    }
}

/// In-flight state of one switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateRun {
    pub tid: usize,
    /// Gate id register, read at S1 and again at S5.
    pub gate_reg: u32,
    /// Entry as loaded by S1 (or re-read by S5).
    pub entry: Option<GateEntry>,
    /// Value register consumed by S4; S4 loads it from the entry unless a
    /// value is already present (only possible when entering mid-sequence).
    pub acc: Option<u32>,
    pub next: Option<MicroStep>,
    pub executed: Vec<MicroStep>,
    pub loopbacks: u32,
}

impl GateRun {
    pub fn done(&self) -> bool {
        self.next.is_none()
    }
}

/// Result of a completed switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchReport {
    pub gate: u32,
    pub cross_space: bool,
    pub steps: Vec<MicroStep>,
    pub loopbacks: u32,
}

/// Final state of a switch entered at an arbitrary step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversarialOutcome {
    pub start: MicroStep,
    pub start_pkrs: PkrsValue,
    pub fault: Option<GateFault>,
    pub pkrs: PkrsValue,
    pub sp: u32,
    pub ip: u32,
}

impl AdversarialOutcome {
    pub fn triple(&self) -> (PkrsValue, u32, u32) {
        (self.pkrs, self.sp, self.ip)
    }
}

impl Machine {
    fn endpoint(&self, comp: CompartmentId, addr: u32, other: CompartmentId) -> GateEndpoint {
        let c = self.compartment(comp);
        let asid = c.asid.or(self.compartment(other).asid).unwrap_or_else(|| self.mmu.active_space().asid);
        let (pgdir, _) = cr3_parts(self.cr3_of(asid));
        GateEndpoint {
            comp,
            asid,
            pgdir,
            addr,
            pkrs: c.pkrs,
            sp: c.stack.end,
        }
    }

    fn write_entry(&mut self, e: &GateEntry) {
        let va = self.sgt.entry_addr(e.id);
        let asid = self.mmu.active_space().asid;
        self.mmu.phys_write(asid, va, &e.to_bytes()).expect("gate table mapped");
        self.sgt.count = self.sgt.count.max(e.id + 1);
        self.sgt.targets.insert(e.tgt.pkrs);
        let t = e.target_triple();
        self.sgt.triples.insert((t.0 .0, t.1, t.2));
    }

    pub(crate) fn register_monitor_gates(&mut self) {
        let core = CompartmentId::CORE;
        let mon = CompartmentId::MONITOR;
        let src = self.endpoint(core, code_base(core) + GATE_EXIT_OFFSET, core);
        let tgt = self.endpoint(mon, code_base(mon), core);
        self.write_entry(&GateEntry {
            id: MONITOR_ENTRY_GATE,
            src,
            tgt,
        });
        self.write_entry(&GateEntry {
            id: MONITOR_EXIT_GATE,
            src: tgt,
            tgt: src,
        });
        self.sgt.names.insert("monitor".into(), MONITOR_ENTRY_GATE);
        self.mmu
            .trace
            .record("register-gate", Actor::Monitor, "monitor ids=0,1", "ok");
    }

    /// Registers the gate pair `from -> to` and `to -> from`. Returns the
    /// forward id; the return gate is the next id.
    pub fn register_gate(
        &mut self,
        name: &str,
        from: CompartmentId,
        to: CompartmentId,
        requester: Actor,
    ) -> Result<u32, GateRejected> {
        let r = self.register_gate_inner(name, from, to);
        let verdict = match &r {
            Ok(id) => format!("ok ids={},{}", id, id + 1),
            Err(e) => format!("rejected:{}", e),
        };
        self.mmu
            .trace
            .record("register-gate", requester, format!("{} {} -> {}", name, from, to), verdict);
        r
    }

    fn register_gate_inner(&mut self, name: &str, from: CompartmentId, to: CompartmentId) -> Result<u32, GateRejected> {
        let n = self.compartments.len();
        if from.0 as usize >= n || to.0 as usize >= n {
            return Err(GateRejected::MalformedMetadata("unknown compartment".into()));
        }
        if from == to || from == CompartmentId::MONITOR || to == CompartmentId::MONITOR {
            return Err(GateRejected::MalformedMetadata(format!("{} -> {}", from, to)));
        }
        if self.sgt.names.contains_key(name) {
            return Err(GateRejected::DuplicateGate(name.into()));
        }
        if !self.policy.allows(from, to) {
            return Err(GateRejected::TransitionNotAllowed(from, to));
        }
        let id = self.sgt.count;
        if id + 2 > self.sgt.capacity {
            return Err(GateRejected::TableFull);
        }
        let src = self.endpoint(from, code_base(from) + GATE_EXIT_OFFSET, to);
        let tgt = self.endpoint(to, code_base(to), from);
        self.write_entry(&GateEntry { id, src, tgt });
        let back_src = GateEndpoint {
            addr: code_base(to) + GATE_EXIT_OFFSET,
            ..tgt
        };
        let back_tgt = GateEndpoint {
            addr: code_base(from) + GATE_EXIT_OFFSET,
            ..src
        };
        self.write_entry(&GateEntry {
            id: id + 1,
            src: back_src,
            tgt: back_tgt,
        });
        self.sgt.names.insert(name.into(), id);
        Ok(id)
    }

    /// Reads entry `id` out of the table memory.
    pub fn read_gate(&self, id: u32) -> Option<GateEntry> {
        if id >= self.sgt.count {
            return None;
        }
        let mut b = [0u8; ENTRY_SIZE as usize];
        self.mmu
            .phys_read(self.mmu.active_space().asid, self.sgt.entry_addr(id), &mut b)
            .ok()?;
        GateEntry::from_bytes(&b).filter(|e| e.id == id)
    }

    /// Positions the thread at the caller side of gate `id` (its exit
    /// address and rights), as if it had been running there.
    pub fn place_at_source(&mut self, tid: usize, id: u32) -> Option<()> {
        let e = self.read_gate(id)?;
        if self.mmu.active_space().asid != e.src.asid {
            self.mmu.switch_address_space(e.src.asid, Actor::Monitor).ok()?;
        }
        let cpu = &mut self.threads[tid].cpu;
        cpu.ip = e.src.addr;
        cpu.cr[3] = e.src.cr3();
        cpu.set_reg(Reg::Rsp, e.src.sp as u64);
        if PkrsValue(cpu.pkrs()) != e.src.pkrs {
            self.write_live_pkrs(tid, e.src.pkrs, "place");
        }
        Some(())
    }

    pub fn gate_begin(&self, tid: usize, gate: u32) -> GateRun {
        GateRun {
            tid,
            gate_reg: gate,
            entry: None,
            acc: None,
            next: Some(MicroStep::S1),
            executed: Vec::new(),
            loopbacks: 0,
        }
    }

    /// Executes the next micro-step of `run`.
    pub fn gate_step(&mut self, run: &mut GateRun) -> Result<(), GateFault> {
        let Some(step) = run.next else { return Ok(()) };
        let tid = run.tid;
        let r = self.gate_step_inner(run, step);
        let verdict = match &r {
            Ok(true) => "ok".to_string(),
            Ok(false) => "skipped".to_string(),
            Err(e) => format!("fault:{}", e.label()),
        };
        if matches!(r, Ok(true)) {
            run.executed.push(step);
            self.metrics.gate_steps += 1;
            self.mmu
                .trace
                .record("gate-step", Actor::Monitor, format!("t{} gate{} {}", tid, run.gate_reg, step), verdict);
        }
        r.map(|_| ())
    }

    /// Returns whether the step did any work.
    fn gate_step_inner(&mut self, run: &mut GateRun, step: MicroStep) -> Result<bool, GateFault> {
        let tid = run.tid;
        let entry = |run: &GateRun| run.entry.ok_or(GateFault::Unregistered(run.gate_reg));
        match step {
            MicroStep::S1 => {
                run.entry = Some(self.read_gate(run.gate_reg).ok_or(GateFault::Unregistered(run.gate_reg))?);
                run.next = step.next();
                Ok(true)
            }
            MicroStep::S2 => {
                let e = entry(run)?;
                let cpu = &self.threads[tid].cpu;
                let code = self.compartment(e.src.comp).code.clone();
                let ok = PkrsValue(cpu.pkrs()) == e.src.pkrs
                    && code.contains(&cpu.ip)
                    && self.mmu.raw_root().is_none()
                    && self.mmu.active_space().asid == e.src.asid;
                if !ok {
                    return Err(GateFault::SourceMismatch);
                }
                run.next = step.next();
                Ok(true)
            }
            MicroStep::S3 => {
                let e = entry(run)?;
                run.next = step.next();
                if !e.is_cross_space() {
                    return Ok(false);
                }
                self.delegate(tid, run.gate_reg, PrivilegedOp::WriteCr3(e.tgt.cr3()))
                    .map_err(GateFault::Rejected)?;
                Ok(true)
            }
            MicroStep::S4 => {
                // No entry means no S5 re-check to come, so nothing is written.
                let e = entry(run)?;
                let v = run.acc.take().unwrap_or(e.tgt.pkrs.0);
                self.delegate(tid, run.gate_reg, PrivilegedOp::WritePkrs(v))
                    .map_err(GateFault::Rejected)?;
                run.next = step.next();
                Ok(true)
            }
            MicroStep::S5 => {
                if !self.defenses.loopback {
                    run.next = step.next();
                    return Ok(true);
                }
                let e = self.read_gate(run.gate_reg).ok_or(GateFault::Unregistered(run.gate_reg))?;
                run.entry = Some(e);
                if self.pkrs(tid) != e.tgt.pkrs {
                    run.loopbacks += 1;
                    if run.loopbacks > LOOP_LIMIT {
                        return Err(GateFault::LoopLimit);
                    }
                    run.next = Some(MicroStep::S4);
                } else {
                    run.next = step.next();
                }
                Ok(true)
            }
            MicroStep::S6 => {
                let e = entry(run)?;
                self.threads[tid].cpu.set_reg(Reg::Rsp, e.tgt.sp as u64);
                run.next = step.next();
                Ok(true)
            }
            MicroStep::S7 => {
                let e = entry(run)?;
                self.threads[tid].cpu.ip = e.tgt.addr;
                run.next = None;
                Ok(true)
            }
        }
    }

    /// Runs gate `id` to completion from the thread's current state.
    pub fn switch(&mut self, tid: usize, id: u32) -> Result<SwitchReport, GateFault> {
        if self.activate(tid).is_err() {
            return Err(GateFault::SourceMismatch);
        }
        let mut run = self.gate_begin(tid, id);
        let r = self.drive(&mut run);
        self.finish_switch(&run, r)
    }

    /// Like [`Machine::switch`], with an interrupt delivered just before
    /// micro-step `at` executes (or after the last step if the run never
    /// reaches `at`). `handler` runs in the interrupt context.
    pub fn switch_with_interrupt(
        &mut self,
        tid: usize,
        id: u32,
        at: MicroStep,
        handler: impl FnOnce(&mut Machine, usize),
    ) -> Result<SwitchReport, GateFault> {
        if self.activate(tid).is_err() {
            return Err(GateFault::SourceMismatch);
        }
        let mut handler = Some(handler);
        let mut run = self.gate_begin(tid, id);
        let mut r = Ok(());
        while !run.done() {
            if run.next == Some(at) {
                if let Some(h) = handler.take() {
                    let _ = self.run_interrupt(tid, h);
                }
            }
            r = self.gate_step(&mut run);
            if r.is_err() {
                break;
            }
        }
        if let Some(h) = handler.take() {
            let _ = self.run_interrupt(tid, h);
        }
        self.finish_switch(&run, r)
    }

    fn drive(&mut self, run: &mut GateRun) -> Result<(), GateFault> {
        while !run.done() {
            self.gate_step(run)?;
        }
        Ok(())
    }

    fn finish_switch(&mut self, run: &GateRun, r: Result<(), GateFault>) -> Result<SwitchReport, GateFault> {
        let tid = run.tid;
        let actor = self.actor_of(tid);
        match r {
            Ok(()) => {
                let cross = run.executed.contains(&MicroStep::S3);
                if cross {
                    self.metrics.switches_cross += 1;
                } else {
                    self.metrics.switches_intra += 1;
                }
                let e = run.entry.expect("completed run has an entry");
                self.threads[tid].cpu.cr[3] = e.tgt.cr3();
                self.mmu.trace.record(
                    "gate",
                    actor,
                    format!(
                        "t{} gate{} {} steps={} loopbacks={}",
                        tid,
                        run.gate_reg,
                        if cross { "cross" } else { "intra" },
                        run.executed.len(),
                        run.loopbacks
                    ),
                    "done",
                );
                Ok(SwitchReport {
                    gate: run.gate_reg,
                    cross_space: cross,
                    steps: run.executed.clone(),
                    loopbacks: run.loopbacks,
                })
            }
            Err(f) => {
                self.metrics.gate_faults += 1;
                self.mmu.trace.record(
                    "gate",
                    actor,
                    format!("t{} gate{}", tid, run.gate_reg),
                    format!("fault:{}", f.label()),
                );
                Err(f)
            }
        }
    }

    /// Enters gate `gate` at `start` with an attacker-chosen value register,
    /// as control flow hijacked into the middle of the sequence would.
    pub fn gate_from(&mut self, tid: usize, gate: u32, start: MicroStep, forged_acc: u32) -> AdversarialOutcome {
        let _ = self.activate(tid);
        let start_pkrs = self.pkrs(tid);
        let mut run = self.gate_begin(tid, gate);
        if start > MicroStep::S1 {
            run.entry = self.read_gate(gate);
        }
        if start == MicroStep::S4 {
            run.acc = Some(forged_acc);
        }
        run.next = Some(start);
        let r = self.drive(&mut run);
        let fault = self.finish_switch(&run, r).err();
        let cpu = &self.threads[tid].cpu;
        AdversarialOutcome {
            start,
            start_pkrs,
            fault,
            pkrs: PkrsValue(cpu.pkrs()),
            sp: cpu.reg(Reg::Rsp) as u32,
            ip: cpu.ip,
        }
    }

    /// Whether the terminal state of an adversarial entry is consistent: its
    /// PKRS is a legal value, and if rights changed they came together with
    /// the stack and entry point registered for them.
    pub fn adversarial_outcome_safe(&self, o: &AdversarialOutcome) -> bool {
        if !self.pkrs_whitelist().contains(&o.pkrs) && o.pkrs != o.start_pkrs {
            return false;
        }
        o.pkrs == o.start_pkrs || self.sgt.is_registered_triple(o.triple())
    }
}
