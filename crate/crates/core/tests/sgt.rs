use pkscope::harness::fixtures;
use pkscope::machine::{code_base, Compartment, Defense, Defenses, Machine, SGT_BASE};
use pkscope::mmu::{Actor, Asid, Pkey, PkrsValue};
use pkscope::isa::Reg;
use pkscope::sgt::{GateFault, GateRejected, MicroStep, ENTRY_SIZE, GATE_EXIT_OFFSET};
use proptest::prelude::*;

fn fixture_with(d: Defenses) -> Machine {
    Machine::new(fixtures::gate_fixture().compile().unwrap(), d).unwrap()
}

fn fixture() -> Machine {
    fixture_with(Defenses::default())
}

fn named(m: &Machine, n: &str) -> Compartment {
    m.compartment_by_name(n).unwrap().clone()
}

fn sp(m: &Machine, t: usize) -> u32 {
    m.threads[t].cpu.reg(Reg::Rsp) as u32
}

#[test]
fn fixture_table_holds_monitor_and_named_pairs() {
    let m = fixture();
    assert_eq!(m.sgt.len(), 2 + 2 * 10);
    let mut ids: Vec<u32> = m.sgt.names().map(|(_, id)| id).collect();
    ids.sort();
    assert_eq!(ids, (0..11).map(|i| 2 * i).collect::<Vec<_>>());
}

#[test]
fn registration_appends_a_forward_and_return_pair() {
    let mut m = fixture();
    let b = named(&m, "b");
    let c = named(&m, "c");
    let n = m.sgt.len();
    let id = m.register_gate("b-c-again", b.id, c.id, Actor::Monitor).unwrap();
    assert_eq!(id, n);
    assert_eq!(m.sgt.len(), n + 2);
    let fwd = m.read_gate(id).unwrap();
    let back = m.read_gate(id + 1).unwrap();
    assert_eq!((fwd.src.comp, fwd.tgt.comp), (b.id, c.id));
    assert_eq!((back.src.comp, back.tgt.comp), (c.id, b.id));
    assert_eq!(fwd.tgt.addr, code_base(c.id));
    assert_eq!(back.tgt.addr, code_base(b.id) + GATE_EXIT_OFFSET);
}

#[test]
fn registration_rejects_what_the_policy_does_not_allow() {
    let mut m = fixture();
    let a = named(&m, "a");
    let b = named(&m, "b");
    let e = named(&m, "e");
    let n = m.sgt.len();
    assert_eq!(
        m.register_gate("e-a", e.id, a.id, Actor::Monitor),
        Err(GateRejected::TransitionNotAllowed(e.id, a.id))
    );
    assert_eq!(
        m.register_gate("a-b", a.id, b.id, Actor::Monitor),
        Err(GateRejected::DuplicateGate("a-b".into()))
    );
    assert!(matches!(
        m.register_gate("a-a", a.id, a.id, Actor::Monitor),
        Err(GateRejected::MalformedMetadata(_))
    ));
    assert_eq!(m.sgt.len(), n);
}

#[test]
fn table_fills_up() {
    let mut m = fixture();
    let a = named(&m, "a");
    let b = named(&m, "b");
    let mut i = 0;
    let err = loop {
        match m.register_gate(&format!("extra{}", i), a.id, b.id, Actor::Monitor) {
            Ok(_) => i += 1,
            Err(e) => break e,
        }
        assert!(i < 10_000);
    };
    assert_eq!(err, GateRejected::TableFull);
    assert!(m.sgt.len() <= m.sgt.capacity);
}

#[test]
fn every_pair_mirrors_its_partner() {
    let m = fixture();
    for x in (0..m.sgt.len()).step_by(2) {
        let f = m.read_gate(x).unwrap();
        let r = m.read_gate(x + 1).unwrap();
        assert_eq!(f.id, x);
        assert_eq!(r.src.comp, f.tgt.comp);
        assert_eq!(r.tgt.comp, f.src.comp);
        assert_eq!((r.tgt.pkrs, r.tgt.sp, r.tgt.asid, r.tgt.pgdir), (f.src.pkrs, f.src.sp, f.src.asid, f.src.pgdir));
        assert_eq!((r.src.pkrs, r.src.sp, r.src.asid, r.src.pgdir), (f.tgt.pkrs, f.tgt.sp, f.tgt.asid, f.tgt.pgdir));
    }
}

#[test]
fn table_lives_on_monitor_pages_in_every_space() {
    let mut m = fixture();
    let a = named(&m, "a");
    let t = m.spawn_thread(a.id).unwrap();
    let spaces: Vec<Asid> = m.mmu.spaces().map(|s| s.asid).collect();
    for asid in spaces {
        for id in 0..m.sgt.len() {
            let d = m.mmu.lookup_in(asid, SGT_BASE + id * ENTRY_SIZE).unwrap();
            assert_eq!(d.pkey, Pkey::MONITOR);
        }
    }
    assert!(m.try_write(t, SGT_BASE + 2 * ENTRY_SIZE + 12, &[0; 4]).is_err());
    // Read-only to modules.
    assert!(m.try_read(t, SGT_BASE, 4).is_ok());
}

#[test]
fn intra_space_switch_takes_six_steps() {
    let mut m = fixture();
    let a = named(&m, "a");
    let b = named(&m, "b");
    let t = m.spawn_thread(a.id).unwrap();
    let g = m.sgt.id_of("a-b").unwrap();
    m.place_at_source(t, g).unwrap();
    let r = m.switch(t, g).unwrap();
    use MicroStep::*;
    assert_eq!(r.steps, vec![S1, S2, S4, S5, S6, S7]);
    assert!(!r.cross_space);
    assert_eq!(r.loopbacks, 0);
    assert_eq!(m.pkrs(t), b.pkrs);
    assert_eq!(m.threads[t].cpu.ip, code_base(b.id));
    assert_eq!(sp(&m, t), b.stack.end);
}

#[test]
fn cross_space_switch_adds_the_space_step_without_flushing() {
    let mut m = fixture();
    let a = named(&m, "a");
    let d = named(&m, "d");
    let t = m.spawn_thread(a.id).unwrap();
    let g = m.sgt.id_of("a-d").unwrap();
    m.place_at_source(t, g).unwrap();
    let flushes = m.mmu.tlb.flushes;
    let r = m.switch(t, g).unwrap();
    use MicroStep::*;
    assert_eq!(r.steps, vec![S1, S2, S3, S4, S5, S6, S7]);
    assert!(r.cross_space);
    assert_eq!(m.mmu.tlb.flushes, flushes);
    assert_eq!(m.mmu.active_space().asid, Asid(1));
    assert_eq!(m.threads[t].cpu.cr[3], m.cr3_of(Asid(1)));
    assert_eq!(m.pkrs(t), d.pkrs);
    assert!(m.try_read(t, d.heap.start, 4).is_ok());
}

#[test]
fn wrong_caller_is_refused_with_rights_unchanged() {
    let mut m = fixture();
    let a = named(&m, "a");
    let t = m.spawn_thread(a.id).unwrap();
    let ip = m.threads[t].cpu.ip;
    for name in ["b-c", "d-e", "e-b"] {
        let g = m.sgt.id_of(name).unwrap();
        assert_eq!(m.switch(t, g), Err(GateFault::SourceMismatch), "{}", name);
        assert_eq!(m.pkrs(t), a.pkrs);
        assert_eq!(m.threads[t].cpu.ip, ip);
    }
    assert_eq!(m.switch(t, 999), Err(GateFault::Unregistered(999)));
    assert_eq!(m.pkrs(t), a.pkrs);
}

#[test]
fn forged_value_at_s4_still_lands_on_the_gate_target() {
    let mut m = fixture();
    let a = named(&m, "a");
    let t = m.spawn_thread(a.id).unwrap();
    let g = m.sgt.id_of("a-b").unwrap();
    let target = m.read_gate(g).unwrap().target_triple();
    let forged: Vec<u32> = m.pkrs_whitelist().into_iter().map(|v| v.0).chain([0, 0xFFFF_FFFF]).collect();
    for v in forged {
        m.place_at_source(t, g).unwrap();
        let o = m.gate_from(t, g, MicroStep::S4, v);
        assert!(m.adversarial_outcome_safe(&o), "{:?}", o);
        match o.fault {
            None => assert_eq!(o.triple(), target, "forged {:#x}", v),
            Some(_) => assert_eq!(o.pkrs, o.start_pkrs, "forged {:#x}", v),
        }
    }
}

#[test]
fn entering_at_s6_keeps_the_attacker_rights() {
    let mut m = fixture();
    let a = named(&m, "a");
    let b = named(&m, "b");
    let t = m.spawn_thread(a.id).unwrap();
    let g = m.sgt.id_of("a-b").unwrap();
    m.place_at_source(t, g).unwrap();
    let o = m.gate_from(t, g, MicroStep::S6, 0);
    assert_eq!(o.pkrs, a.pkrs);
    assert!(m.adversarial_outcome_safe(&o));
    assert!(m.try_read(t, b.heap.start, 4).is_err());
    assert!(m.try_write(t, b.stack.end - 8, &[0; 8]).is_err());
}

#[test]
fn without_loopback_a_forged_value_sticks() {
    let mut m = fixture_with(Defenses::default().without(Defense::Loopback));
    let a = named(&m, "a");
    let c = named(&m, "c");
    let t = m.spawn_thread(a.id).unwrap();
    let g = m.sgt.id_of("a-b").unwrap();
    m.place_at_source(t, g).unwrap();
    let o = m.gate_from(t, g, MicroStep::S4, c.pkrs.0);
    assert_eq!(o.fault, None);
    assert_eq!(o.pkrs, c.pkrs);
    assert!(!m.adversarial_outcome_safe(&o));
}

#[test]
fn call_then_return_restores_the_caller() {
    let mut m = fixture();
    let a = named(&m, "a");
    let t = m.spawn_thread(a.id).unwrap();
    for (name, x) in m.sgt.names().map(|(n, id)| (n.to_string(), id)).collect::<Vec<_>>() {
        m.place_at_source(t, x).unwrap();
        let before = (m.pkrs(t), sp(&m, t), m.threads[t].cpu.cr[3], m.mmu.active_space().asid);
        m.switch(t, x).unwrap();
        m.switch(t, x + 1).unwrap();
        let after = (m.pkrs(t), sp(&m, t), m.threads[t].cpu.cr[3], m.mmu.active_space().asid);
        assert_eq!(before, after, "{}", name);
    }
}

fn legal_start(m: &mut Machine, t: usize, gate: u32) -> PkrsValue {
    m.place_at_source(t, gate).unwrap();
    m.pkrs(t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Any entry point, gate id and value register: the thread ends either
    /// where it was or at a registered (PKRS, stack, entry) triple.
    #[test]
    fn hijacked_entry_never_mixes_rights(
        gate in 0u32..24, start in 0usize..7, acc in any::<u32>(), pick in any::<prop::sample::Index>(),
        from in 2u32..22,
    ) {
        let mut m = fixture();
        let a = m.compartment_by_name("a").unwrap().id;
        let t = m.spawn_thread(a).unwrap();
        legal_start(&mut m, t, from);
        let white: Vec<u32> = m.pkrs_whitelist().into_iter().map(|v| v.0).collect();
        let acc = if acc % 2 == 0 { white[pick.index(white.len())] } else { acc };
        let o = m.gate_from(t, gate, MicroStep::ALL[start], acc);
        prop_assert!(m.adversarial_outcome_safe(&o), "{:?}", o);
        if o.pkrs != o.start_pkrs {
            prop_assert!(m.sgt.is_registered_triple(o.triple()), "{:?}", o);
        }
    }

    /// The value written at S4 does not depend on attacker-controlled
    /// registers: every forged value produces the honest outcome or none.
    #[test]
    fn switch_outcome_is_determined_by_the_gate(gate in 2u32..22, accs in prop::collection::vec(any::<u32>(), 1..6)) {
        let mut honest = fixture();
        let a = honest.compartment_by_name("a").unwrap().id;
        let t = honest.spawn_thread(a).unwrap();
        legal_start(&mut honest, t, gate);
        honest.switch(t, gate).unwrap();
        let expect = (honest.pkrs(t), sp(&honest, t), honest.threads[t].cpu.ip);
        let white: Vec<u32> = honest.pkrs_whitelist().into_iter().map(|v| v.0).collect();
        for v in accs.into_iter().chain(white) {
            let mut m = fixture();
            let t = m.spawn_thread(a).unwrap();
            legal_start(&mut m, t, gate);
            let o = m.gate_from(t, gate, MicroStep::S4, v);
            match o.fault {
                None => prop_assert_eq!(o.triple(), expect),
                Some(_) => prop_assert_eq!(o.pkrs, o.start_pkrs),
            }
        }
    }

    #[test]
    fn switching_is_deterministic(gate in 2u32..22) {
        let run = || {
            let mut m = fixture();
            let a = m.compartment_by_name("a").unwrap().id;
            let t = m.spawn_thread(a).unwrap();
            legal_start(&mut m, t, gate);
            let r = m.switch(t, gate);
            (r, m.pkrs(t), m.threads[t].cpu.clone(), m.mmu.trace.audit_log())
        };
        prop_assert_eq!(run(), run());
    }
}
