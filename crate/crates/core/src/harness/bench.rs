//! Generated call patterns and their counters.

use super::fixtures;
use crate::machine::{Defenses, Machine, MachineError};
use crate::metrics::Metrics;
use crate::monitor::PrivilegedOp;
use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// Gate calls around a ring of modules in one address space.
    IntraRing,
    /// Alternating laps of the intra ring and a ring over one module per space.
    CrossRing,
    /// Many monitor calls per gate round trip.
    MonitorHeavy,
}

impl Workload {
    pub const ALL: [Workload; 3] = [Workload::IntraRing, Workload::CrossRing, Workload::MonitorHeavy];

    pub fn name(self) -> &'static str {
        match self {
            Workload::IntraRing => "intra-ring",
            Workload::CrossRing => "cross-ring",
            Workload::MonitorHeavy => "monitor-heavy",
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> Result<Workload, String> {
        Workload::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| format!("unknown workload `{}` (expected intra-ring, cross-ring or monitor-heavy)", s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSpec {
    pub workload: Workload,
    /// Number of module compartments in the generated policy.
    pub population: usize,
    pub rounds: usize,
}

impl BenchSpec {
    pub fn new(workload: Workload, population: usize) -> BenchSpec {
        BenchSpec {
            workload,
            population,
            rounds: 10,
        }
    }
}

/// Monitor calls issued per gate round trip by the monitor-heavy workload.
pub const MONITOR_CALLS_PER_TRIP: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub spec: BenchSpec,
    /// Distinct micro-step counts seen for intra-space switches.
    pub intra_steps: BTreeSet<usize>,
    pub cross_steps: BTreeSet<usize>,
    pub metrics: Metrics,
    pub audit_metrics: Metrics,
    pub tlb_hits: u64,
    pub tlb_misses: u64,
    pub tlb_flushes: u64,
}

impl BenchReport {
    /// The single intra-space step count, if all switches agreed.
    pub fn intra_step_count(&self) -> Option<usize> {
        single(&self.intra_steps)
    }

    pub fn cross_step_count(&self) -> Option<usize> {
        single(&self.cross_steps)
    }

    /// Shape properties that do not hold for this run.
    pub fn shape_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.intra_steps.len() > 1 {
            v.push(format!("intra-space step counts vary: {:?}", self.intra_steps));
        }
        if self.cross_steps.len() > 1 {
            v.push(format!("cross-space step counts vary: {:?}", self.cross_steps));
        }
        if let (Some(i), Some(c)) = (self.intra_step_count(), self.cross_step_count()) {
            if c <= i {
                v.push(format!("cross-space switch ({}) not dearer than intra-space ({})", c, i));
            }
        }
        if self.tlb_flushes != 0 {
            v.push(format!("{} TLB flushes", self.tlb_flushes));
        }
        if self.metrics != self.audit_metrics {
            v.push("live counters differ from the audit log".into());
        }
        if self.spec.workload == Workload::MonitorHeavy && self.metrics.monitor_share() <= 0.9 {
            v.push(format!("monitor share {:.4} not above 0.9", self.metrics.monitor_share()));
        }
        v
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "workload {} population {} rounds {}", self.spec.workload, self.spec.population, self.spec.rounds);
        let _ = writeln!(s, "{:<24}{}", "steps_intra", show(self.intra_step_count()));
        let _ = writeln!(s, "{:<24}{}", "steps_cross", show(self.cross_step_count()));
        s.push_str(&self.metrics.render());
        let _ = writeln!(s, "{:<24}{}", "tlb_hits", self.tlb_hits);
        let _ = writeln!(s, "{:<24}{}", "tlb_misses", self.tlb_misses);
        let _ = writeln!(s, "{:<24}{}", "tlb_flushes", self.tlb_flushes);
        let _ = writeln!(s, "{:<24}{:.4}", "monitor_share", self.metrics.monitor_share());
        for (k, n) in self.metrics.transitions() {
            let _ = writeln!(s, "transition {:<13}{}", k, n);
        }
        s
    }

    pub const CSV_HEADER: &'static str = "workload,population,rounds,switches_intra,switches_cross,steps_intra,steps_cross,monitor_entries,monitor_exits,monitor_share,tlb_hits,tlb_misses,tlb_flushes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.4},{},{},{}",
            self.spec.workload,
            self.spec.population,
            self.spec.rounds,
            self.metrics.switches_intra,
            self.metrics.switches_cross,
            show(self.intra_step_count()),
            show(self.cross_step_count()),
            self.metrics.monitor_entries,
            self.metrics.monitor_exits,
            self.metrics.monitor_share(),
            self.tlb_hits,
            self.tlb_misses,
            self.tlb_flushes
        )
    }

    pub fn csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

fn single(s: &BTreeSet<usize>) -> Option<usize> {
    if s.len() == 1 {
        s.iter().next().copied()
    } else {
        None
    }
}

fn show(v: Option<usize>) -> String {
    v.map_or("-".into(), |n| n.to_string())
}

fn gate_ids(m: &Machine, prefix: &str) -> Vec<u32> {
    let mut named: Vec<(usize, u32)> = m
        .sgt
        .names()
        .filter_map(|(n, id)| Some((n.strip_prefix(prefix)?.parse().ok()?, id)))
        .collect();
    named.sort();
    named.into_iter().map(|(_, id)| id).collect()
}

/// Runs a generated workload.
pub fn bench(spec: BenchSpec) -> Result<BenchReport, MachineError> {
    let per_space = fixtures::ring_space_size(spec.population);
    let policy = fixtures::ring_policy(spec.population.max(2), per_space)
        .compile()
        .map_err(|e| MachineError::Gate(e.to_string()))?;
    let mut m = Machine::new(policy, Defenses::default())?;
    let first = m.compartment_by_name(&fixtures::module_name(0)).expect("ring module").id;
    let t = m.spawn_thread(first)?;
    let intra = gate_ids(&m, "intra-");
    let cross = gate_ids(&m, "cross-");
    let mut intra_steps = BTreeSet::new();
    let mut cross_steps = BTreeSet::new();
    let mut lap = |m: &mut Machine, gates: &[u32]| -> Result<(), MachineError> {
        for &g in gates {
            let r = m.switch(t, g).map_err(|f| MachineError::Gate(format!("gate{}: {}", g, f.label())))?;
            if r.cross_space {
                cross_steps.insert(r.steps.len());
            } else {
                intra_steps.insert(r.steps.len());
            }
            // The callee touches its own heap, so translations run under
            // each ASID in turn.
            let c = m.current_compartment(t).expect("switch lands in a compartment");
            let va = m.compartment(c).heap.start;
            m.try_write(t, va, &[1])
                .map_err(|d| MachineError::Gate(format!("callee heap write: {}", d)))?;
        }
        Ok(())
    };
    for _ in 0..spec.rounds {
        match spec.workload {
            Workload::IntraRing => lap(&mut m, &intra)?,
            Workload::CrossRing => {
                lap(&mut m, &intra)?;
                lap(&mut m, &cross)?;
            }
            Workload::MonitorHeavy => {
                let own = m.compartment(first).pkrs.0;
                for i in 0..MONITOR_CALLS_PER_TRIP {
                    let op = if i % 2 == 0 {
                        PrivilegedOp::ReadPkrs
                    } else {
                        PrivilegedOp::WritePkrs(own)
                    };
                    m.monitor_call(t, op)
                        .map_err(|e| MachineError::Gate(format!("monitor call: {}", e)))?;
                }
                if let Some(&g) = intra.first() {
                    lap(&mut m, &[g, g + 1])?;
                }
            }
        }
    }
    Ok(BenchReport {
        spec,
        intra_steps,
        cross_steps,
        audit_metrics: m.audit_metrics(),
        metrics: m.metrics.clone(),
        tlb_hits: m.mmu.tlb.hits,
        tlb_misses: m.mmu.tlb.misses,
        tlb_flushes: m.mmu.tlb.flushes,
    })
}
