//! Built-in attack scenarios P1..P6 and the exhaustive gate sweep.
//!
//! Every scenario runs on a fresh machine built from
//! [`fixtures::pentest_policy`] and reports a breach if any attempted
//! effect was allowed or executed.

use super::fixtures;
use crate::isa::{encode_all, Instr, Op, Reg};
use crate::machine::{code_base, Defenses, Machine, MachineError, ProgramOutcome, HEAP_BASE};
use crate::mmu::{cr3_value, dir_entry, leaf_index, Asid, CompartmentId, FrameId, PageDescriptor, Pkey, PkrsValue, PAGE_SIZE};
use crate::monitor::PrivilegedOp;
use crate::policy::Policy;
use crate::sgt::MicroStep;
use std::collections::BTreeSet;
use std::fmt::Write as _;

const P: u32 = PAGE_SIZE as u32;
const SECRET: u64 = 0x5EC2_E7DA_7A00_0001;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PentestResult {
    pub id: &'static str,
    pub name: &'static str,
    pub breached: bool,
    pub attempts: usize,
    /// One line per attempt: what was tried and what happened.
    pub log: Vec<String>,
}

impl PentestResult {
    fn new(id: &'static str, name: &'static str) -> PentestResult {
        PentestResult {
            id,
            name,
            breached: false,
            attempts: 0,
            log: Vec::new(),
        }
    }

    /// Records an attempt; `effect` is true when the attacker got what it
    /// asked for.
    fn attempt(&mut self, what: &str, effect: bool, outcome: impl std::fmt::Display) {
        self.attempts += 1;
        self.breached |= effect;
        self.log.push(format!("{} -> {}{}", what, outcome, if effect { " [BREACH]" } else { "" }));
    }

    pub fn verdict(&self) -> &'static str {
        if self.breached {
            "breach"
        } else {
            "blocked"
        }
    }
}

pub fn render(results: &[PentestResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(s, "{}  {:<40}{:<9}attempts={}", r.id, r.name, r.verdict(), r.attempts);
        for l in &r.log {
            let _ = writeln!(s, "      {}", l);
        }
    }
    s
}

/// Fixed header `id,name,verdict,attempts`.
pub fn csv(results: &[PentestResult]) -> String {
    let mut s = String::from("id,name,verdict,attempts\n");
    for r in results {
        let _ = writeln!(s, "{},{},{},{}", r.id, r.name, r.verdict(), r.attempts);
    }
    s
}

struct Setup {
    m: Machine,
    attacker: CompartmentId,
    victim: CompartmentId,
    /// Thread running in the attacker compartment.
    t: usize,
}

fn setup(defenses: Defenses) -> Result<Setup, MachineError> {
    let policy = fixtures::pentest_policy().compile().expect("fixture policy compiles");
    let mut m = Machine::new(policy, defenses)?;
    let attacker = m.compartment_by_name("attacker").expect("fixture").id;
    let victim = m.compartment_by_name("victim").expect("fixture").id;
    let asid = m.space_of(victim);
    let vheap = m.compartment(victim).heap.start;
    m.mmu.phys_write(asid, vheap, &SECRET.to_le_bytes())?;
    let t = m.spawn_thread(attacker)?;
    Ok(Setup { m, attacker, victim, t })
}

fn show<T, E: std::fmt::Display>(r: &Result<T, E>) -> String {
    match r {
        Ok(_) => "allowed".into(),
        Err(e) => format!("denied ({})", e),
    }
}

fn outcome(o: &Result<ProgramOutcome, MachineError>) -> String {
    match o {
        Ok(ProgramOutcome::Halted { .. }) => "executed".into(),
        Ok(ProgramOutcome::Fault { fault, .. }) => format!("fault ({})", fault),
        Ok(ProgramOutcome::StepLimit) => "step limit".into(),
        Err(e) => format!("error ({})", e),
    }
}

/// P1: write another compartment's heap object.
pub fn p1_cross_heap(defenses: Defenses) -> Result<PentestResult, MachineError> {
    let mut r = PentestResult::new("P1", "modify another heap object");
    let Setup { mut m, victim, t, .. } = setup(defenses)?;
    let va = m.compartment(victim).heap.start;
    let w = m.try_write(t, va, &0u64.to_le_bytes());
    r.attempt("attacker writes victim heap", w.is_ok(), show(&w));
    let rd = m.try_read(t, va, 8);
    r.attempt("attacker reads victim heap", rd.is_ok(), show(&rd));
    Ok(r)
}

/// P2: write page-table pages directly, from a module and from the core
/// kernel. A successful write is followed through: a forged leaf entry
/// maps the victim's heap frame and the attacker reads through it.
pub fn p2_tamper_page_tables(defenses: Defenses) -> Result<PentestResult, MachineError> {
    let mut r = PentestResult::new("P2", "tamper the page tables");
    let Setup {
        mut m, attacker, victim, t,
    } = setup(defenses)?;
    let core_t = m.spawn_thread(CompartmentId::CORE)?;
    let asid = m.space_of(victim);
    let leaf = m.mmu.space(asid).expect("space").private_leaves[0].expect("heap leaf");
    let slot = 500u32;
    let slot_va = m.mmu.pt_vaddr(leaf).expect("pt frame") + slot * 8;
    let victim_frame = m.frame_of(asid, m.compartment(victim).heap.start).expect("mapped");
    let forged_va = HEAP_BASE + slot * P;
    for (who, tid, pkey) in [("attacker", t, m.compartment(attacker).pkey), ("core", core_t, Pkey::CORE)] {
        let pte = PageDescriptor::data(victim_frame, pkey).to_pte();
        let w = m.try_write(tid, slot_va, &pte.to_le_bytes());
        r.attempt(&format!("{} writes a leaf entry", who), w.is_ok(), show(&w));
        if w.is_ok() {
            let rd = m.try_read(tid, forged_va, 8);
            let leaked = rd.as_ref().is_ok_and(|b| b[..] == SECRET.to_le_bytes());
            r.attempt(&format!("{} reads through the forged entry", who), leaked, show(&rd));
        }
    }
    let root_va = m.mmu.pt_vaddr(m.mmu.space(asid).expect("space").pgdir).expect("pt frame");
    let w = m.try_write(t, root_va + 7 * 8, &dir_entry(leaf).to_le_bytes());
    r.attempt("attacker writes a root entry", w.is_ok(), show(&w));
    Ok(r)
}

/// Reads a page-table entry through the attacker's own rights.
fn read_entry(m: &mut Machine, t: usize, table: FrameId, idx: usize) -> Option<u64> {
    let va = m.mmu.pt_vaddr(table)? + idx as u32 * 8;
    m.try_read(t, va, 8).ok().map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

/// P3: build a page-table tree in attacker-writable memory and load it
/// with `mov cr3`; also ask the monitor for the same CR3 value.
pub fn p3_forge_cr3(defenses: Defenses) -> Result<PentestResult, MachineError> {
    let mut r = PentestResult::new("P3", "forge page tables via mov-to-cr3");
    let Setup {
        mut m, attacker, victim, t,
    } = setup(defenses)?;
    let asid = m.space_of(attacker);
    let a = m.compartment(attacker).clone();
    let root = m.mmu.space(asid).expect("space").pgdir;
    let leaf = m.mmu.space(asid).expect("space").private_leaves[0].expect("heap leaf");

    // Reconnaissance through readable page tables.
    let shared: Option<Vec<u64>> = (0..4).map(|i| read_entry(&mut m, t, root, i)).collect();
    let frame_at = |m: &mut Machine, va: u32| {
        read_entry(m, t, leaf, leaf_index(va)).and_then(PageDescriptor::from_pte).map(|d| d.frame)
    };
    let fake_root = frame_at(&mut m, a.heap.start);
    let fake_leaf = frame_at(&mut m, a.heap.start + P);
    let vheap = m.compartment(victim).heap.start;
    let victim_frame = frame_at(&mut m, vheap);
    let (Some(shared), Some(fake_root), Some(fake_leaf), Some(victim_frame)) = (shared, fake_root, fake_leaf, victim_frame)
    else {
        r.attempt("attacker reads page tables for reconnaissance", false, "denied");
        return Ok(r);
    };

    let mut root_bytes: Vec<u8> = shared.iter().flat_map(|e| e.to_le_bytes()).collect();
    root_bytes.extend_from_slice(&dir_entry(fake_leaf).to_le_bytes());
    let w1 = m.try_write(t, a.heap.start, &root_bytes);
    let pte = PageDescriptor::data(victim_frame, a.pkey).to_pte();
    let w2 = m.try_write(t, a.heap.start + P, &pte.to_le_bytes());
    if w1.is_err() || w2.is_err() {
        r.attempt("attacker builds a fake tree in its heap", false, "denied");
        return Ok(r);
    }

    let cr3 = cr3_value(fake_root, Asid(0xFFF));
    let d = m.monitor_call(t, PrivilegedOp::WriteCr3(cr3));
    r.attempt("attacker asks the monitor to load the fake root", d.is_ok(), show(&d));

    let code = encode_all(&[
        Instr::new(Op::MovImm32 {
            dst: Reg::Rax,
            imm: cr3 as u32,
        }),
        Instr::new(Op::MovToCr { cr: 3, src: Reg::Rax }),
    ]);
    let o = m.run_program(t, &code, 16);
    let loaded = matches!(o, Ok(ProgramOutcome::Halted { .. }));
    r.attempt("attacker executes mov cr3", loaded, outcome(&o));
    if loaded {
        let w = m.try_write(t, HEAP_BASE, &0u64.to_le_bytes());
        r.attempt("attacker writes victim heap through the fake tree", w.is_ok(), show(&w));
    }
    Ok(r)
}

/// P4: change PKRS directly, or get a privileged helper to do it.
pub fn p4_write_pkrs(defenses: Defenses) -> Result<PentestResult, MachineError> {
    let mut r = PentestResult::new("P4", "update PKRS directly");
    let Setup { mut m, victim, t, .. } = setup(defenses)?;
    let code = encode_all(&[
        Instr::new(Op::MovImm32 { dst: Reg::Rcx, imm: 0x6E1 }),
        Instr::new(Op::MovImm32 { dst: Reg::Rax, imm: 0 }),
        Instr::new(Op::MovImm32 { dst: Reg::Rdx, imm: 0 }),
        Instr::new(Op::Wrmsr),
    ]);
    let o = m.run_program(t, &code, 16);
    let executed = matches!(o, Ok(ProgramOutcome::Halted { .. })) && m.pkrs(t) == PkrsValue(0);
    r.attempt("attacker executes wrmsr to PKRS", executed, outcome(&o));
    if executed {
        let va = m.compartment(victim).heap.start;
        let rd = m.try_read(t, va, 8);
        r.attempt("attacker reads victim heap with the new rights", rd.is_ok(), show(&rd));
        let own = m.compartment(m.threads[t].home).pkrs;
        m.threads[t].cpu.write_pkrs(own.0);
    }
    let d = m.monitor_call(t, PrivilegedOp::WritePkrs(0));
    r.attempt("attacker asks the monitor for all-access PKRS", d.is_ok(), show(&d));
    let victim_pkrs = m.compartment(victim).pkrs.0;
    let d = m.monitor_call(t, PrivilegedOp::WritePkrs(victim_pkrs));
    r.attempt("attacker asks the monitor for the victim's PKRS", d.is_ok(), show(&d));
    let d = m.monitor_call(t, PrivilegedOp::WriteCr4(0));
    r.attempt("attacker asks the monitor to clear CR4.PKS", d.is_ok(), show(&d));
    // Gadget hunting: PKRS-writing code is only useful if it can be found.
    let rd = m.try_read(t, code_base(CompartmentId::MONITOR), 64);
    r.attempt("attacker reads monitor code for gadgets", rd.is_ok(), show(&rd));
    Ok(r)
}

/// Tallies of a sweep over every gate, interrupt point and adversarial
/// entry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub runs: usize,
    pub interrupt_runs: usize,
    pub adversarial_runs: usize,
    /// Runs whose terminal PKRS lies outside the legal set.
    pub illegal_terminal: usize,
    /// Terminal states whose rights, stack and entry point do not belong to
    /// one registered gate target.
    pub inconsistent_terminal: usize,
    /// Interrupt handlers that ran with rights other than the default.
    pub handler_leaks: usize,
    /// Interrupted legitimate switches that did not land on their target.
    pub broken_switches: usize,
    pub examples: Vec<String>,
}

impl SweepReport {
    pub fn violations(&self) -> usize {
        self.illegal_terminal + self.inconsistent_terminal + self.handler_leaks + self.broken_switches
    }

    fn flag(&mut self, what: String) {
        if self.examples.len() < 8 {
            self.examples.push(what);
        }
    }
}

/// Registered target rights read back from the gate table, plus the
/// default restricted value.
pub fn legal_pkrs(m: &Machine) -> BTreeSet<PkrsValue> {
    let mut s: BTreeSet<PkrsValue> = (0..m.sgt.len())
        .filter_map(|id| m.read_gate(id))
        .map(|e| e.tgt.pkrs)
        .collect();
    s.insert(m.monitor.default_pkrs);
    s
}

/// For every registered gate: one legitimate switch per micro-step with an
/// interrupt delivered before that step, then adversarial entries at
/// S2..S7 with every registered gate id in the gate register and both the
/// gate's own target value and all-access rights in the value register.
pub fn gate_sweep(policy: &Policy, defenses: Defenses) -> Result<SweepReport, MachineError> {
    let compiled = policy.compile().map_err(|e| MachineError::Gate(e.to_string()))?;
    let mut m = Machine::new(compiled, defenses)?;
    let t = m.spawn_thread(CompartmentId::CORE)?;
    let legal = legal_pkrs(&m);
    let default = m.monitor.default_pkrs;
    let n = m.sgt.len();
    let mut rep = SweepReport::default();
    for g in 0..n {
        let entry = m.read_gate(g).expect("registered gate");
        let probe = match entry.tgt.comp {
            c if c == CompartmentId::CORE || c == CompartmentId::MONITOR => None,
            c => Some(m.compartment(c).heap.start),
        };
        for at in MicroStep::ALL {
            m.place_at_source(t, g).expect("registered gate");
            let mut seen = None;
            let res = m.switch_with_interrupt(t, g, at, |m, t| {
                let read = probe.map(|va| m.try_read(t, va, 8).is_ok());
                seen = Some((m.pkrs(t), read));
            });
            rep.runs += 1;
            rep.interrupt_runs += 1;
            let (handler, read) = seen.expect("interrupt delivered");
            if handler != default || read == Some(true) {
                rep.handler_leaks += 1;
                rep.flag(format!("gate{} interrupt before {}: handler {} read={:?}", g, at, handler, read));
            }
            let cpu = &m.threads[t].cpu;
            let triple = (PkrsValue(cpu.pkrs()), cpu.reg(Reg::Rsp) as u32, cpu.ip);
            if res.is_err() || triple != entry.target_triple() {
                rep.broken_switches += 1;
                rep.flag(format!("gate{} interrupt before {}: {:?}", g, at, res.err()));
            }
            if !legal.contains(&triple.0) {
                rep.illegal_terminal += 1;
            }
        }
        for start in MicroStep::ALL.into_iter().filter(|s| *s >= MicroStep::S2) {
            // One id past the table covers jumps through an unregistered gate.
            for f in 0..=n {
                for acc in [entry.tgt.pkrs.0, default.0, 0] {
                    m.place_at_source(t, g).expect("registered gate");
                    let o = m.gate_from(t, f, start, acc);
                    rep.runs += 1;
                    rep.adversarial_runs += 1;
                    if !legal.contains(&o.pkrs) {
                        rep.illegal_terminal += 1;
                        rep.flag(format!("from gate{} forged gate{} at {} acc={}: pkrs {}", g, f, start, PkrsValue(acc), o.pkrs));
                    }
                    if !m.adversarial_outcome_safe(&o) {
                        rep.inconsistent_terminal += 1;
                        rep.flag(format!(
                            "from gate{} forged gate{} at {} acc={}: terminal ({}, {:#x}, {:#x})",
                            g,
                            f,
                            start,
                            PkrsValue(acc),
                            o.pkrs,
                            o.sp,
                            o.ip
                        ));
                    }
                }
            }
        }
    }
    Ok(rep)
}

/// P5: abuse the switch gates.
pub fn p5_abuse_gates(defenses: Defenses) -> Result<PentestResult, MachineError> {
    let mut r = PentestResult::new("P5", "abuse the switch gates");
    let s = gate_sweep(&fixtures::pentest_policy(), defenses)?;
    r.attempts = s.runs;
    r.breached = s.violations() > 0;
    r.log.push(format!(
        "{} interrupt runs, {} adversarial runs: illegal={} inconsistent={} handler-leaks={} broken={}",
        s.interrupt_runs, s.adversarial_runs, s.illegal_terminal, s.inconsistent_terminal, s.handler_leaks, s.broken_switches
    ));
    r.log.extend(s.examples);
    Ok(r)
}

/// P6: hand a malicious object to the victim through a shared page.
pub fn p6_malicious_transfer(defenses: Defenses) -> Result<PentestResult, MachineError> {
    let mut r = PentestResult::new("P6", "pass malicious data through interfaces");
    let Setup { mut m, victim, t, .. } = setup(defenses)?;
    let vt = m.spawn_thread(victim)?;
    let (_, page) = m.shared_page_addr(0).expect("fixture has a shared page");
    for (value, malicious) in [(100u32, true), (40, false), (7, false)] {
        let w = m.try_write(t, page, &value.to_le_bytes());
        if w.is_err() {
            // The page already moved to the victim.
            break;
        }
        let res = m.read_with_transfer(vt, page, 4);
        let what = format!("victim takes a message holding {}", value);
        match res {
            Ok(_) => r.attempt(&what, malicious, "transferred"),
            Err(e) => r.attempt(&what, false, format!("denied ({})", e)),
        }
    }
    Ok(r)
}

/// Runs P1..P6 against a machine with the given defenses.
pub fn pentest_suite(defenses: Defenses) -> Result<Vec<PentestResult>, MachineError> {
    Ok(vec![
        p1_cross_heap(defenses)?,
        p2_tamper_page_tables(defenses)?,
        p3_forge_cr3(defenses)?,
        p4_write_pkrs(defenses)?,
        p5_abuse_gates(defenses)?,
        p6_malicious_transfer(defenses)?,
    ])
}
