//! Line-oriented event stream shared by every subsystem of a machine.
//!
//! Each record renders as `kind  actor  args  verdict` (fields separated by
//! two spaces). Monitor operations additionally render as audit-log lines
//! `op  caller  verdict  detail`.

use crate::mmu::Actor;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub kind: &'static str,
    pub actor: Actor,
    pub args: String,
    pub verdict: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}  {}  {}  {}",
            self.kind,
            self.actor,
            if self.args.is_empty() { "-" } else { &self.args },
            self.verdict
        )
    }
}

/// Event kinds that belong to the monitor audit log.
pub const AUDIT_KINDS: &[&str] = &[
    "delegate",
    "register-gate",
    "gate",
    "gate-step",
    "interrupt-entry",
    "interrupt-exit",
    "page-fault",
    "jit-grant",
    "jit-revoke",
    "monitor-entry",
    "monitor-exit",
    "retag",
    "map",
    "as-switch",
    "pkrs-write",
    "cr3-load",
    "trap",
    "fault",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn record(&mut self, kind: &'static str, actor: Actor, args: impl Into<String>, verdict: impl Into<String>) {
        self.events.push(TraceEvent {
            kind,
            actor,
            args: args.into(),
            verdict: verdict.into(),
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events recorded since position `from`.
    pub fn since(&self, from: usize) -> &[TraceEvent] {
        &self.events[from.min(self.events.len())..]
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    /// Audit log: `op  caller  verdict  detail` for monitor-relevant events.
    pub fn audit_log(&self) -> String {
        let mut s = String::new();
        for e in self.events.iter().filter(|e| AUDIT_KINDS.contains(&e.kind)) {
            s.push_str(&format!(
                "{}  {}  {}  {}\n",
                e.kind,
                e.actor,
                e.verdict,
                if e.args.is_empty() { "-" } else { &e.args }
            ));
        }
        s
    }
}
