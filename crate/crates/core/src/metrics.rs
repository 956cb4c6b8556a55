//! Run counters, kept live by the machine and recomputable from the audit log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metrics {
    pub switches_intra: u64,
    pub switches_cross: u64,
    pub gate_steps: u64,
    pub gate_faults: u64,
    pub monitor_entries: u64,
    pub monitor_exits: u64,
    pub interrupts: u64,
    pub transfers: u64,
    pub faults: BTreeMap<String, u64>,
}

impl Metrics {
    pub fn switches(&self) -> u64 {
        self.switches_intra + self.switches_cross
    }

    pub fn fault_total(&self) -> u64 {
        self.faults.values().sum()
    }

    pub fn record_fault(&mut self, label: &str) {
        *self.faults.entry(label.to_string()).or_default() += 1;
    }

    /// Transition kinds and their counts.
    pub fn transitions(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("gate-intra", self.switches_intra),
            ("gate-cross", self.switches_cross),
            ("monitor-entry", self.monitor_entries),
            ("monitor-exit", self.monitor_exits),
            ("interrupt", self.interrupts),
        ])
    }

    /// Share of transitions that are monitor entries or exits.
    pub fn monitor_share(&self) -> f64 {
        let total: u64 = self.transitions().values().sum();
        if total == 0 {
            return 0.0;
        }
        (self.monitor_entries + self.monitor_exits) as f64 / total as f64
    }

    /// Recomputes the counters from audit-log text (`op  caller  verdict  detail`).
    pub fn from_audit(log: &str) -> Metrics {
        let mut m = Metrics::default();
        for line in log.lines() {
            let mut cols = line.splitn(4, "  ");
            let (op, _caller, verdict, detail) = (
                cols.next().unwrap_or(""),
                cols.next().unwrap_or(""),
                cols.next().unwrap_or(""),
                cols.next().unwrap_or(""),
            );
            match op {
                "gate" if verdict == "done" => {
                    if detail.contains("cross") {
                        m.switches_cross += 1;
                    } else {
                        m.switches_intra += 1;
                    }
                }
                "gate" if verdict.starts_with("fault") => m.gate_faults += 1,
                "gate-step" => m.gate_steps += 1,
                "monitor-entry" => m.monitor_entries += 1,
                "monitor-exit" => m.monitor_exits += 1,
                "interrupt-entry" if verdict == "ok" => m.interrupts += 1,
                "page-fault" if verdict == "resumed" => m.transfers += 1,
                "fault" => m.record_fault(verdict),
                _ => {}
            }
        }
        m
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{:<24}{}", k, v);
        }
        s
    }

    /// Machine-readable form with the fixed header `metric,value`.
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{},{}", k, v);
        }
        s
    }

    fn rows(&self) -> Vec<(String, u64)> {
        let mut r = vec![
            ("switches_intra".to_string(), self.switches_intra),
            ("switches_cross".to_string(), self.switches_cross),
            ("gate_steps".to_string(), self.gate_steps),
            ("gate_faults".to_string(), self.gate_faults),
            ("monitor_entries".to_string(), self.monitor_entries),
            ("monitor_exits".to_string(), self.monitor_exits),
            ("interrupts".to_string(), self.interrupts),
            ("transfers".to_string(), self.transfers),
        ];
        for (k, v) in &self.faults {
            r.push((format!("fault:{}", k), *v));
        }
        r
    }
}
