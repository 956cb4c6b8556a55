//! Scripted scenarios: a policy, some threads, and a list of actions whose
//! observed verdicts are compared against expectations.
//!
//! ```toml
//! seed = 7
//! policy = "ring.toml"            # or an inline [policy] table
//!
//! [[thread]]
//! name = "t0"
//! home = "m000"
//!
//! [[step]]
//! kind = "gate"
//! thread = "t0"
//! gate = "intra-0"                # "<name>/ret" names the return gate
//! expect = "done"
//! ```
//!
//! An expectation matches an observation equal to it or extending it with
//! `:`-separated detail, so `done` matches `done:intra`.

use crate::machine::{Defenses, Machine, MachineError, SAVE_BASE, SGT_BASE};
use crate::metrics::Metrics;
use crate::mmu::{CompartmentId, PkrsValue, PT_BASE};
use crate::monitor::PrivilegedOp;
use crate::policy::{Policy, PolicyError};
use crate::sgt::MicroStep;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

const PROGRAM_STEPS: usize = 10_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("machine: {0}")]
    Machine(#[from] MachineError),
    #[error("step {step}: {detail}")]
    Unresolved { step: usize, detail: String },
}

#[derive(Debug, Error)]
#[error("{count} step(s) did not match their expectation")]
pub struct ExpectationMismatch {
    pub count: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PolicyRef {
    File(String),
    Inline(Policy),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadSpec {
    pub name: String,
    pub home: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Action {
    /// Monitor repositions a thread at the caller side of a gate.
    Place { thread: String, gate: String, expect: Option<String> },
    Gate { thread: String, gate: String, expect: Option<String> },
    Read {
        thread: String,
        target: String,
        #[serde(default)]
        offset: u32,
        #[serde(default = "default_len")]
        len: u32,
        expect: Option<String>,
    },
    Write {
        thread: String,
        target: String,
        #[serde(default)]
        offset: u32,
        #[serde(default)]
        value: u64,
        #[serde(default = "default_len")]
        len: u32,
        expect: Option<String>,
    },
    /// An access that may trigger an ownership transfer on a shared page.
    Transfer {
        thread: String,
        target: String,
        #[serde(default)]
        write: bool,
        expect: Option<String>,
    },
    /// Monitor-initialized data, written without any rights check.
    Fill {
        target: String,
        #[serde(default)]
        offset: u32,
        value: u64,
        #[serde(default = "default_len")]
        len: u32,
    },
    /// Interrupt delivered to the thread; with `gate`, delivered while that
    /// switch is about to execute micro-step `at`.
    Interrupt {
        thread: String,
        gate: Option<String>,
        at: Option<String>,
        expect: Option<String>,
    },
    /// Control flow entering `forged`'s sequence at `start`, from the caller
    /// side of `gate` and with `gate`'s target rights in the value register.
    Adversarial {
        thread: String,
        gate: String,
        forged: String,
        start: String,
        expect: Option<String>,
    },
    Program { thread: String, code: String, expect: Option<String> },
    Monitor {
        thread: String,
        op: String,
        #[serde(default)]
        value: u64,
        #[serde(default)]
        msr: u32,
        expect: Option<String>,
    },
    /// `count` seeded random reads and writes over the pages of every
    /// compartment in the thread's space.
    RandomAccess { thread: String, count: u32, expect: Option<String> },
}

fn default_len() -> u32 {
    8
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Place { .. } => "place",
            Action::Gate { .. } => "gate",
            Action::Read { .. } => "read",
            Action::Write { .. } => "write",
            Action::Transfer { .. } => "transfer",
            Action::Fill { .. } => "fill",
            Action::Interrupt { .. } => "interrupt",
            Action::Adversarial { .. } => "adversarial",
            Action::Program { .. } => "program",
            Action::Monitor { .. } => "monitor",
            Action::RandomAccess { .. } => "random-access",
        }
    }

    fn expect(&self) -> Option<&str> {
        match self {
            Action::Place { expect, .. }
            | Action::Gate { expect, .. }
            | Action::Read { expect, .. }
            | Action::Write { expect, .. }
            | Action::Transfer { expect, .. }
            | Action::Interrupt { expect, .. }
            | Action::Adversarial { expect, .. }
            | Action::Program { expect, .. }
            | Action::Monitor { expect, .. }
            | Action::RandomAccess { expect, .. } => expect.as_deref(),
            Action::Fill { .. } => None,
        }
    }

    fn thread(&self) -> Option<&str> {
        match self {
            Action::Place { thread, .. }
            | Action::Gate { thread, .. }
            | Action::Read { thread, .. }
            | Action::Write { thread, .. }
            | Action::Transfer { thread, .. }
            | Action::Interrupt { thread, .. }
            | Action::Adversarial { thread, .. }
            | Action::Program { thread, .. }
            | Action::Monitor { thread, .. }
            | Action::RandomAccess { thread, .. } => Some(thread),
            Action::Fill { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    seed: u64,
    policy: PolicyRef,
    #[serde(default)]
    thread: Vec<ThreadSpec>,
    #[serde(default)]
    step: Vec<Action>,
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub policy: Policy,
    pub threads: Vec<ThreadSpec>,
    pub steps: Vec<Action>,
}

/// A memory location named in a script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Heap(CompartmentId),
    Stack(CompartmentId),
    Code(CompartmentId),
    Shared(usize),
    PageTables,
    SaveArea,
    GateTable,
    Addr(u32),
}

fn parse_target(s: &str, m: &Machine) -> Result<Target, String> {
    let comp = |n: &str| {
        m.compartment_by_name(n)
            .map(|c| c.id)
            .ok_or_else(|| format!("unknown compartment `{}`", n))
    };
    let (k, v) = s.split_once(':').unwrap_or((s, ""));
    Ok(match k {
        "heap" => Target::Heap(comp(v)?),
        "stack" => Target::Stack(comp(v)?),
        "code" => Target::Code(comp(v)?),
        "shared" => {
            let i: usize = v.parse().map_err(|_| format!("bad shared page index `{}`", v))?;
            if m.shared_page_addr(i).is_none() {
                return Err(format!("no shared page {}", i));
            }
            Target::Shared(i)
        }
        "pt" => Target::PageTables,
        "save" => Target::SaveArea,
        "sgt" => Target::GateTable,
        "addr" => Target::Addr(
            u32::from_str_radix(v.trim_start_matches("0x"), 16).map_err(|_| format!("bad address `{}`", v))?,
        ),
        _ => return Err(format!("unknown target `{}`", s)),
    })
}

fn target_addr(t: Target, m: &Machine) -> u32 {
    match t {
        Target::Heap(c) => m.compartment(c).heap.start,
        Target::Stack(c) => m.compartment(c).stack.start,
        Target::Code(c) => m.compartment(c).code.start,
        Target::Shared(i) => m.shared_page_addr(i).expect("validated").1,
        Target::PageTables => PT_BASE,
        Target::SaveArea => SAVE_BASE,
        Target::GateTable => SGT_BASE,
        Target::Addr(a) => a,
    }
}

fn parse_gate(s: &str, m: &Machine) -> Result<u32, String> {
    let (name, ret) = match s.strip_suffix("/ret") {
        Some(n) => (n, 1),
        None => (s, 0),
    };
    m.sgt
        .id_of(name)
        .map(|id| id + ret)
        .ok_or_else(|| format!("unknown gate `{}`", s))
}

fn parse_step(s: &str) -> Result<MicroStep, String> {
    MicroStep::ALL
        .into_iter()
        .find(|st| st.to_string().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown micro-step `{}`", s))
}

fn parse_code(s: &str) -> Result<Vec<u8>, String> {
    let digits: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !digits.len().is_multiple_of(2) {
        return Err("odd number of hex digits".into());
    }
    (0..digits.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&digits[i..i + 2], 16).map_err(|_| format!("bad hex `{}`", &digits[i..i + 2])))
        .collect()
}

fn parse_op(op: &str, value: u64, msr: u32) -> Result<PrivilegedOp, String> {
    Ok(match op {
        "write-pkrs" => PrivilegedOp::WritePkrs(value as u32),
        "read-pkrs" => PrivilegedOp::ReadPkrs,
        "write-cr3" => PrivilegedOp::WriteCr3(value),
        "write-cr4" => PrivilegedOp::WriteCr4(value),
        "write-msr" => PrivilegedOp::WriteMsr { msr, value },
        "read-msr" => PrivilegedOp::ReadMsr { msr },
        "alloc-heap" => PrivilegedOp::AllocHeap { pages: value as u32 },
        _ => return Err(format!("unknown monitor operation `{}`", op)),
    })
}

impl Scenario {
    /// Parses a scenario; a policy given by file name is resolved relative
    /// to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Scenario, ScenarioError> {
        let f: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let policy = match f.policy {
            PolicyRef::Inline(p) => p,
            PolicyRef::File(name) => {
                let path = base_dir.join(name);
                let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path, source })?;
                Policy::from_toml(&text)?
            }
        };
        let s = Scenario {
            seed: f.seed,
            policy,
            threads: f.thread,
            steps: f.step,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Scenario::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks that every compartment, gate, thread, page and micro-step the
    /// script names resolves.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let m = Machine::new(self.policy.compile()?, Defenses::default())?;
        let mut names = Vec::new();
        for t in &self.threads {
            if m.compartment_by_name(&t.home).is_none() || t.home == crate::policy::MONITOR_NAME {
                return Err(ScenarioError::Unresolved {
                    step: 0,
                    detail: format!("thread `{}` has no valid home `{}`", t.name, t.home),
                });
            }
            if names.contains(&t.name) {
                return Err(ScenarioError::Unresolved {
                    step: 0,
                    detail: format!("duplicate thread `{}`", t.name),
                });
            }
            names.push(t.name.clone());
        }
        if names.len() > crate::machine::MAX_THREADS {
            return Err(MachineError::TooManyThreads.into());
        }
        for (i, a) in self.steps.iter().enumerate() {
            let err = |detail: String| ScenarioError::Unresolved { step: i, detail };
            if let Some(t) = a.thread() {
                if !names.iter().any(|n| n == t) {
                    return Err(err(format!("unknown thread `{}`", t)));
                }
            }
            match a {
                Action::Place { gate, .. } | Action::Gate { gate, .. } => {
                    parse_gate(gate, &m).map_err(err)?;
                }
                Action::Read { target, .. }
                | Action::Write { target, .. }
                | Action::Transfer { target, .. }
                | Action::Fill { target, .. } => {
                    parse_target(target, &m).map_err(err)?;
                }
                Action::Interrupt { gate, at, .. } => {
                    match (gate, at) {
                        (Some(g), Some(s)) => {
                            parse_gate(g, &m).map_err(err)?;
                            parse_step(s).map_err(err)?;
                        }
                        (None, None) => {}
                        _ => return Err(err("`gate` and `at` go together".into())),
                    }
                }
                Action::Adversarial { gate, forged, start, .. } => {
                    parse_gate(gate, &m).map_err(err)?;
                    parse_gate(forged, &m).map_err(err)?;
                    parse_step(start).map_err(err)?;
                }
                Action::Program { code, .. } => {
                    parse_code(code).map_err(err)?;
                }
                Action::Monitor { op, value, msr, .. } => {
                    parse_op(op, *value, *msr).map_err(err)?;
                }
                Action::RandomAccess { .. } => {}
            }
            if let Action::Write { len, .. } | Action::Fill { len, .. } | Action::Read { len, .. } = a {
                if *len == 0 || *len > 8 && !matches!(a, Action::Read { .. }) {
                    return Err(err(format!("length {} out of range", len)));
                }
            }
        }
        Ok(())
    }

    /// Executes the script on a fresh machine.
    pub fn run(&self) -> Result<Report, ScenarioError> {
        let mut m = Machine::new(self.policy.compile()?, Defenses::default())?;
        let mut tids = BTreeMap::new();
        for t in &self.threads {
            let home = m.compartment_by_name(&t.home).expect("validated").id;
            tids.insert(t.name.clone(), m.spawn_thread(home)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut lines = Vec::new();
        for (index, a) in self.steps.iter().enumerate() {
            let tid = a.thread().map(|t| tids[t]);
            let observed = execute(&mut m, a, tid, &mut rng);
            let expected = a.expect().map(str::to_string);
            let ok = expected.as_deref().is_none_or(|e| matches_expectation(&observed, e));
            lines.push(ReportLine {
                index,
                kind: a.kind(),
                observed,
                expected,
                ok,
            });
        }
        Ok(Report {
            seed: self.seed,
            lines,
            metrics: m.metrics.clone(),
            tlb: (m.mmu.tlb.hits, m.mmu.tlb.misses, m.mmu.tlb.flushes),
            audit: m.mmu.trace.audit_log(),
        })
    }
}

pub fn matches_expectation(observed: &str, expected: &str) -> bool {
    observed == expected || observed.strip_prefix(expected).is_some_and(|r| r.starts_with(':'))
}

fn fmt_deny(r: Result<(), crate::mmu::DenyReason>) -> String {
    match r {
        Ok(()) => "ok".into(),
        Err(d) => format!("deny:{}", d.label()),
    }
}

fn value_bytes(value: u64, len: u32) -> Vec<u8> {
    value.to_le_bytes()[..len as usize].to_vec()
}

fn execute(m: &mut Machine, a: &Action, tid: Option<usize>, rng: &mut ChaCha8Rng) -> String {
    let t = tid.unwrap_or(0);
    match a {
        Action::Place { gate, .. } => {
            let id = parse_gate(gate, m).expect("validated");
            match m.place_at_source(t, id) {
                Some(()) => "ok".into(),
                None => "error".into(),
            }
        }
        Action::Gate { gate, .. } => {
            let id = parse_gate(gate, m).expect("validated");
            match m.switch(t, id) {
                Ok(r) => format!("done:{}", if r.cross_space { "cross" } else { "intra" }),
                Err(f) => format!("fault:{}", f.label()),
            }
        }
        Action::Read { target, offset, len, .. } => {
            let va = target_addr(parse_target(target, m).expect("validated"), m) + offset;
            fmt_deny(m.try_read(t, va, *len as usize).map(|_| ()))
        }
        Action::Write {
            target,
            offset,
            value,
            len,
            ..
        } => {
            let va = target_addr(parse_target(target, m).expect("validated"), m) + offset;
            fmt_deny(m.try_write(t, va, &value_bytes(*value, *len)))
        }
        Action::Transfer { target, write, .. } => {
            let va = target_addr(parse_target(target, m).expect("validated"), m);
            let before = m.metrics.transfers;
            let r = if *write {
                m.write_with_transfer(t, va, &[0]).map(|_| ())
            } else {
                m.read_with_transfer(t, va, 1).map(|_| ())
            };
            match r {
                Ok(()) if m.metrics.transfers > before => "resumed".into(),
                Ok(()) => "ok".into(),
                Err(crate::machine::AccessVerdict::Transfer(d)) => format!("denied:{}", d.label()),
                Err(crate::machine::AccessVerdict::Deny(d)) => format!("deny:{}", d.label()),
            }
        }
        Action::Fill {
            target,
            offset,
            value,
            len,
        } => {
            let tg = parse_target(target, m).expect("validated");
            let va = target_addr(tg, m) + offset;
            let asid = match tg {
                Target::Shared(i) => m.shared_page_addr(i).expect("validated").0,
                Target::Heap(c) | Target::Stack(c) => m.space_of(c),
                _ => m.mmu.active_space().asid,
            };
            match m.mmu.phys_write(asid, va, &value_bytes(*value, *len)) {
                Ok(()) => "ok".into(),
                Err(_) => "error:unmapped".into(),
            }
        }
        Action::Interrupt { gate, at, .. } => match (gate, at) {
            (Some(g), Some(s)) => {
                let id = parse_gate(g, m).expect("validated");
                let at = parse_step(s).expect("validated");
                interrupted_switch(m, t, id, at)
            }
            _ => {
                let default = m.monitor.default_pkrs;
                match m.run_interrupt(t, |m, t| m.pkrs(t)) {
                    Ok(r) => handler_label(r.handler_pkrs, default).to_string(),
                    Err(e) => format!("error:{}", e),
                }
            }
        },
        Action::Adversarial {
            gate, forged, start, ..
        } => {
            let g = parse_gate(gate, m).expect("validated");
            let f = parse_gate(forged, m).expect("validated");
            let st = parse_step(start).expect("validated");
            if m.place_at_source(t, g).is_none() {
                return "error".into();
            }
            let acc = m.read_gate(g).expect("registered").tgt.pkrs.0;
            let o = m.gate_from(t, f, st, acc);
            let safe = if m.adversarial_outcome_safe(&o) { "safe" } else { "unsafe" };
            match o.fault {
                Some(fl) => format!("{}:fault:{}", safe, fl.label()),
                None => format!("{}:done", safe),
            }
        }
        Action::Program { code, .. } => {
            let bytes = parse_code(code).expect("validated");
            match m.run_program(t, &bytes, PROGRAM_STEPS) {
                Ok(crate::machine::ProgramOutcome::Halted { .. }) => "halted".into(),
                Ok(crate::machine::ProgramOutcome::StepLimit) => "step-limit".into(),
                Ok(crate::machine::ProgramOutcome::Fault { fault, .. }) => format!("fault:{}", fault_label(&fault)),
                Err(e) => format!("error:{}", e),
            }
        }
        Action::Monitor { op, value, msr, .. } => {
            let op = parse_op(op, *value, *msr).expect("validated");
            match m.monitor_call(t, op) {
                Ok(()) => "ok".into(),
                Err(e) => format!("rejected:{}", e.label()),
            }
        }
        Action::RandomAccess { count, .. } => {
            let asid = m.space_of(m.threads[t].home);
            let ranges: Vec<std::ops::Range<u32>> = m
                .compartments
                .iter()
                .filter(|c| c.asid.is_none_or(|a| a == asid))
                .flat_map(|c| [c.heap.clone(), c.stack.clone()])
                .filter(|r| !r.is_empty())
                .collect();
            let (mut allowed, mut denied) = (0, 0);
            for _ in 0..*count {
                let r = &ranges[rng.gen_range(0..ranges.len())];
                let va = rng.gen_range(r.start..r.end) & !7;
                let res = if rng.gen_bool(0.5) {
                    m.try_read(t, va, 8).map(|_| ())
                } else {
                    m.try_write(t, va, &rng.gen::<u64>().to_le_bytes())
                };
                if res.is_ok() {
                    allowed += 1;
                } else {
                    denied += 1;
                }
            }
            format!("allowed={} denied={}", allowed, denied)
        }
    }
}

pub(crate) fn fault_label(f: &crate::isa::StepFault) -> &'static str {
    use crate::isa::StepFault;
    match f {
        StepFault::AccessFault { reason, .. } => reason.label(),
        StepFault::DecodeFault { .. } => "decode",
        StepFault::PrivilegeTrap(_) => "privilege-trap",
        StepFault::MonitorRejected { .. } => "monitor-rejected",
    }
}

fn handler_label(handler: PkrsValue, default: PkrsValue) -> &'static str {
    if handler == default {
        "reset"
    } else {
        "leak"
    }
}

/// Runs gate `id`, delivering an interrupt just before micro-step `at`
/// (or at the end if the run never reaches it).
fn interrupted_switch(m: &mut Machine, tid: usize, id: u32, at: MicroStep) -> String {
    let default = m.monitor.default_pkrs;
    let mut handler = None;
    let r = m.switch_with_interrupt(tid, id, at, |m, t| {
        handler = Some(m.pkrs(t));
    });
    let h = handler.map_or("none", |p| handler_label(p, default));
    match r {
        Ok(rep) => format!("{}:done:{}", h, if rep.cross_space { "cross" } else { "intra" }),
        Err(f) => format!("{}:fault:{}", h, f.label()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportLine {
    pub index: usize,
    pub kind: &'static str,
    pub observed: String,
    pub expected: Option<String>,
    pub ok: bool,
}

/// Outcome of a scenario run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub seed: u64,
    pub lines: Vec<ReportLine>,
    pub metrics: Metrics,
    /// TLB hits, misses and flushes.
    pub tlb: (u64, u64, u64),
    pub audit: String,
}

impl Report {
    pub fn mismatches(&self) -> usize {
        self.lines.iter().filter(|l| !l.ok).count()
    }

    pub fn check(&self) -> Result<(), ExpectationMismatch> {
        match self.mismatches() {
            0 => Ok(()),
            count => Err(ExpectationMismatch { count }),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("seed {}\n", self.seed);
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{:>4}  {:<14}{:<32}{:<24}{}",
                l.index,
                l.kind,
                l.observed,
                l.expected.as_deref().unwrap_or("-"),
                if l.ok { "ok" } else { "MISMATCH" }
            );
        }
        s.push_str(&self.metrics.render());
        let _ = writeln!(s, "{:<24}{}", "tlb_hits", self.tlb.0);
        let _ = writeln!(s, "{:<24}{}", "tlb_misses", self.tlb.1);
        let _ = writeln!(s, "{:<24}{}", "tlb_flushes", self.tlb.2);
        s
    }

    /// Step table with the fixed header `step,kind,observed,expected,status`.
    pub fn csv(&self) -> String {
        let mut s = String::from("step,kind,observed,expected,status\n");
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                l.index,
                l.kind,
                l.observed,
                l.expected.as_deref().unwrap_or(""),
                if l.ok { "ok" } else { "mismatch" }
            );
        }
        s
    }
}

/// Loads, validates and runs a scenario file.
pub fn run_scenario(path: &Path) -> Result<Report, ScenarioError> {
    Scenario::load(path)?.run()
}
