use pkscope::harness::{bench, fixtures, gate_sweep, pentest_suite, BenchSpec, Scenario, Workload};
use pkscope::machine::{Defense, Defenses};
use std::path::Path;

#[test]
fn suite_blocks_everything_with_all_defenses() {
    let results = pentest_suite(Defenses::default()).unwrap();
    assert_eq!(results.len(), 6);
    for r in &results {
        assert!(!r.breached, "{}:\n{}", r.id, r.log.join("\n"));
        assert!(r.attempts > 0, "{} tried nothing", r.id);
    }
}

#[test]
fn each_defense_is_load_bearing() {
    for d in Defense::ALL {
        let results = pentest_suite(Defenses::default().without(d)).unwrap();
        let breached: Vec<&str> = results.iter().filter(|r| r.breached).map(|r| r.id).collect();
        assert!(!breached.is_empty(), "{} removed, yet no scenario breached", d);
    }
}

#[test]
fn specific_defenses_map_to_expected_scenarios() {
    let expect = [
        (Defense::Xom, "P4"),
        (Defense::PtProtection, "P2"),
        (Defense::Deprivation, "P3"),
        (Defense::Deprivation, "P4"),
        (Defense::Loopback, "P5"),
        (Defense::InterruptReset, "P5"),
        (Defense::TransferValidation, "P6"),
    ];
    for (d, id) in expect {
        let results = pentest_suite(Defenses::default().without(d)).unwrap();
        let r = results.iter().find(|r| r.id == id).unwrap();
        assert!(r.breached, "{} without {}:\n{}", id, d, r.log.join("\n"));
    }
}

#[test]
fn ten_gate_sweep_is_clean() {
    let p = fixtures::gate_fixture();
    assert_eq!(p.gates.len(), 10);
    let s = gate_sweep(&p, Defenses::default()).unwrap();
    assert_eq!(s.violations(), 0, "{:?}", s.examples);
    assert!(s.runs > 1000);
}

#[test]
fn intra_step_count_is_population_independent() {
    let counts: Vec<usize> = [4, 20, 160]
        .into_iter()
        .map(|n| bench(BenchSpec::new(Workload::IntraRing, n)).unwrap().intra_step_count().unwrap())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{:?}", counts);
}

#[test]
fn cross_ring_costs_a_constant_more() {
    let mut diffs = Vec::new();
    for n in [4, 20, 160] {
        let r = bench(BenchSpec::new(Workload::CrossRing, n)).unwrap();
        assert!(r.shape_violations().is_empty(), "{:?}", r.shape_violations());
        diffs.push(r.cross_step_count().unwrap() - r.intra_step_count().unwrap());
        assert_eq!(r.tlb_flushes, 0);
        assert!(r.metrics.switches_cross > 0);
    }
    assert!(diffs.iter().all(|d| *d == diffs[0] && *d > 0), "{:?}", diffs);
}

#[test]
fn monitor_heavy_is_dominated_by_monitor_transitions() {
    let r = bench(BenchSpec::new(Workload::MonitorHeavy, 4)).unwrap();
    assert!(r.metrics.monitor_share() > 0.9);
    assert!(r.shape_violations().is_empty(), "{:?}", r.shape_violations());
}

const RING: &str = r#"
seed = 3
[policy]
compartments = [{ name = "a" }, { name = "b" }]
address-spaces = [{ asid = 0, members = ["a", "b"] }]
transitions = [{ from = "a", to = "b" }]
gates = [{ name = "ab", from = "a", to = "b" }]
"#;

fn scenario(steps: &str) -> Scenario {
    let text = format!("{}\n[[thread]]\nname = \"t\"\nhome = \"a\"\n{}", RING, steps);
    Scenario::from_toml(&text, Path::new(".")).unwrap()
}

#[test]
fn empty_script_has_empty_report_and_zero_counters() {
    let r = scenario("").run().unwrap();
    assert!(r.lines.is_empty());
    assert_eq!(r.metrics, Default::default());
}

#[test]
fn call_and_return_count_two_switches() {
    let r = scenario(
        r#"
[[step]]
kind = "gate"
thread = "t"
gate = "ab"
expect = "done:intra"
[[step]]
kind = "gate"
thread = "t"
gate = "ab/ret"
expect = "done"
"#,
    )
    .run()
    .unwrap();
    assert_eq!(r.mismatches(), 0, "{}", r.render());
    assert_eq!(r.metrics.switches(), 2);
    assert_eq!(r.metrics.fault_total(), 0);
}

#[test]
fn unresolved_references_fail_at_load() {
    let text = format!(
        "{}\n[[thread]]\nname = \"t\"\nhome = \"a\"\n[[step]]\nkind = \"gate\"\nthread = \"t\"\ngate = \"nope\"\n",
        RING
    );
    assert!(Scenario::from_toml(&text, Path::new(".")).is_err());
    let text = format!(
        "{}\n[[thread]]\nname = \"t\"\nhome = \"a\"\n[[step]]\nkind = \"read\"\nthread = \"u\"\ntarget = \"heap:b\"\n",
        RING
    );
    assert!(Scenario::from_toml(&text, Path::new(".")).is_err());
}

#[test]
fn mismatched_expectation_is_reported() {
    let r = scenario(
        r#"
[[step]]
kind = "write"
thread = "t"
target = "heap:b"
expect = "ok"
"#,
    )
    .run()
    .unwrap();
    assert_eq!(r.mismatches(), 1);
    assert_eq!(r.lines[0].observed, "deny:pkey-ad");
    assert!(r.check().is_err());
}

#[test]
fn rerun_is_byte_identical() {
    let s = scenario(
        r#"
[[step]]
kind = "random-access"
thread = "t"
count = 200
[[step]]
kind = "interrupt"
thread = "t"
gate = "ab"
at = "S4"
expect = "reset:done"
"#,
    );
    let (a, b) = (s.run().unwrap(), s.run().unwrap());
    assert_eq!(a.render(), b.render());
    assert_eq!(a.audit, b.audit);
    assert_eq!(a.mismatches(), 0, "{}", a.render());
}
