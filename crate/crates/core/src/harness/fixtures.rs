//! Generated policies and dependency graphs used by the bench, the pentest
//! suite and the tests.

use crate::policy::{
    AddressSpaceSpec, CompartmentSpec, DependencyGraph, EdgeSpec, FieldCheck, GateSpec, Policy, PrivilegeClassSpec,
    SharedObject, TransferRuleSpec, DEFAULT_HEAP_PAGES,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn module(name: &str) -> CompartmentSpec {
    CompartmentSpec {
        name: name.to_string(),
        depends: Vec::new(),
        heap_pages: DEFAULT_HEAP_PAGES,
        jit: false,
    }
}

fn edge(from: &str, to: &str) -> EdgeSpec {
    EdgeSpec {
        from: from.into(),
        to: to.into(),
    }
}

fn gate(name: &str, from: &str, to: &str) -> GateSpec {
    GateSpec {
        name: name.into(),
        from: from.into(),
        to: to.into(),
    }
}

pub fn module_name(i: usize) -> String {
    format!("m{:03}", i)
}

/// Modules per address space used by [`ring_policy`] for a population.
pub fn ring_space_size(population: usize) -> usize {
    if population < 26 {
        population.div_ceil(2).max(1)
    } else {
        crate::policy::SPACE_CAPACITY
    }
}

/// `n` modules packed into explicit spaces of `per_space`, with an intra
/// ring over the first space (gates `intra-<i>`) and a cross ring over the
/// first module of every space (gates `cross-<i>`).
pub fn ring_policy(n: usize, per_space: usize) -> Policy {
    assert!(n >= 2 && per_space >= 1);
    let names: Vec<String> = (0..n).map(module_name).collect();
    let mut p = Policy {
        compartments: names.iter().map(|n| module(n)).collect(),
        ..Policy::default()
    };
    for (asid, chunk) in names.chunks(per_space).enumerate() {
        p.address_spaces.push(AddressSpaceSpec {
            asid: asid as u16,
            members: chunk.to_vec(),
        });
    }
    let first: Vec<String> = names.iter().take(per_space).cloned().collect();
    if first.len() >= 2 {
        for i in 0..first.len() {
            let (a, b) = (&first[i], &first[(i + 1) % first.len()]);
            p.transitions.push(edge(a, b));
            p.gates.push(gate(&format!("intra-{}", i), a, b));
        }
    }
    let leaders: Vec<String> = names.iter().step_by(per_space).cloned().collect();
    if leaders.len() >= 2 {
        for i in 0..leaders.len() {
            let (a, b) = (&leaders[i], &leaders[(i + 1) % leaders.len()]);
            p.transitions.push(edge(a, b));
            p.gates.push(gate(&format!("cross-{}", i), a, b));
        }
    }
    p
}

/// Five modules over two spaces and ten gates, four of them crossing
/// address spaces and two leaving the core kernel.
pub fn gate_fixture() -> Policy {
    let mut p = Policy {
        compartments: ["a", "b", "c", "d", "e"].iter().map(|n| module(n)).collect(),
        address_spaces: vec![
            AddressSpaceSpec {
                asid: 0,
                members: vec!["a".into(), "b".into(), "c".into()],
            },
            AddressSpaceSpec {
                asid: 1,
                members: vec!["d".into(), "e".into()],
            },
        ],
        ..Policy::default()
    };
    let gates = [
        ("core-a", "core", "a"),
        ("a-b", "a", "b"),
        ("b-c", "b", "c"),
        ("c-a", "c", "a"),
        ("a-d", "a", "d"),
        ("d-e", "d", "e"),
        ("e-b", "e", "b"),
        ("core-d", "core", "d"),
        ("b-e", "b", "e"),
        ("c-d", "c", "d"),
    ];
    for (n, a, b) in gates {
        if a != "core" {
            p.transitions.push(edge(a, b));
        }
        p.gates.push(gate(n, a, b));
    }
    p
}

/// Legal ranges of the checked field in [`pentest_policy`].
pub const MSG_RANGES: [[u64; 2]; 2] = [[0, 16], [32, 47]];

/// `attacker` and `victim` share a space and one page of messages; `peer`
/// lives in a second space. Transfers `attacker -> victim` check a 4-byte
/// field at offset 0 against [`MSG_RANGES`].
pub fn pentest_policy() -> Policy {
    Policy {
        compartments: ["attacker", "victim", "peer"].iter().map(|n| module(n)).collect(),
        address_spaces: vec![
            AddressSpaceSpec {
                asid: 0,
                members: vec!["attacker".into(), "victim".into()],
            },
            AddressSpaceSpec {
                asid: 1,
                members: vec!["peer".into()],
            },
        ],
        transitions: vec![edge("attacker", "victim"), edge("attacker", "peer"), edge("victim", "peer")],
        gates: vec![
            gate("call-victim", "attacker", "victim"),
            gate("call-peer", "attacker", "peer"),
            gate("core-victim", "core", "victim"),
            gate("victim-peer", "victim", "peer"),
        ],
        transfer_rules: vec![
            TransferRuleSpec {
                src: "attacker".into(),
                tgt: "victim".into(),
                fields: vec![FieldCheck {
                    offset: 0,
                    width: 4,
                    ranges: MSG_RANGES.to_vec(),
                }],
            },
            TransferRuleSpec {
                src: "victim".into(),
                tgt: "attacker".into(),
                fields: Vec::new(),
            },
        ],
        privilege_classes: vec![PrivilegeClassSpec {
            src: "attacker".into(),
            tgt: "victim".into(),
            objects: vec![SharedObject {
                name: "msg".into(),
                size: 256,
            }],
        }],
    }
}

/// Synthetic module graph: clusters of at most `cluster` modules, each a
/// DAG with a single root whose out-degree follows a power law capped at
/// `max_out`. Names are shuffled so that placement order does not follow
/// cluster order.
pub fn clustered_graph(seed: u64, n: usize, cluster: usize, max_out: usize) -> DependencyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<String> = (0..n).map(|i| format!("mod{:04}", i)).collect();
    names.shuffle(&mut rng);
    let mut edges = Vec::new();
    let mut start = 0;
    while start < n {
        let size = rng.gen_range(1..=cluster).min(n - start);
        let members: Vec<usize> = (start..start + size).collect();
        // members[0] is the root; every other node gets one parent among
        // the earlier nodes so the cluster stays connected and acyclic.
        let mut out = vec![0usize; size];
        for j in 1..size {
            let candidates: Vec<usize> = (0..j).filter(|p| out[*p] < max_out).collect();
            let p = if candidates.contains(&0) && rng.gen_bool(0.5) {
                0
            } else {
                *candidates.choose(&mut rng).expect("root has room")
            };
            out[p] += 1;
            edges.push((members[p], members[j]));
        }
        // Extra forward edges with a power-law budget per node.
        for i in 0..size {
            let want = power_law(&mut rng, max_out);
            while out[i] < want && i + 1 < size {
                let t = rng.gen_range(i + 1..size);
                out[i] += 1;
                edges.push((members[i], members[t]));
            }
        }
        start += size;
    }
    DependencyGraph::new(names, edges)
}

fn power_law(rng: &mut ChaCha8Rng, max: usize) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    (((1.0 - u).powf(-1.0 / 1.5) - 1.0).floor() as usize).min(max)
}
