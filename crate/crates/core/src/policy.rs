//! Policy model and compilation.
//!
//! A policy file is a TOML document with the sections `compartments`,
//! `address-spaces`, `transitions`, `gates`, `transfer-rules` and
//! `privilege-classes`. Compilation resolves names to ids, places modules
//! into address spaces (explicitly or through [`partition`]), and lays
//! shared objects out on pages so that no page mixes privilege classes.

use crate::mmu::{Asid, CompartmentId, Pkey, PAGE_SIZE};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use thiserror::Error;

pub const CORE_NAME: &str = "core";
pub const MONITOR_NAME: &str = "monitor";
/// Module compartments per address space.
pub const SPACE_CAPACITY: usize = Pkey::MODULE_SLOTS;
pub const DEFAULT_HEAP_PAGES: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompartmentSpec {
    pub name: String,
    #[serde(default)]
    pub depends: Vec<String>,
    #[serde(default = "default_heap_pages", rename = "heap-pages")]
    pub heap_pages: u32,
    /// Code of this compartment may be patched at runtime through the monitor.
    #[serde(default)]
    pub jit: bool,
}

fn default_heap_pages() -> u32 {
    DEFAULT_HEAP_PAGES
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddressSpaceSpec {
    pub asid: u16,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub name: String,
    pub from: String,
    pub to: String,
}

/// One checked field of a shared page: `width` little-endian bytes at
/// `offset`, legal iff inside one of the inclusive `ranges`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldCheck {
    pub offset: u16,
    pub width: u8,
    pub ranges: Vec<[u64; 2]>,
}

impl FieldCheck {
    pub fn read(&self, page: &[u8]) -> u64 {
        let o = self.offset as usize;
        let mut b = [0u8; 8];
        b[..self.width as usize].copy_from_slice(&page[o..o + self.width as usize]);
        u64::from_le_bytes(b)
    }

    pub fn admits(&self, v: u64) -> bool {
        self.ranges.iter().any(|[lo, hi]| *lo <= v && v <= *hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRuleSpec {
    pub src: String,
    pub tgt: String,
    #[serde(default)]
    pub fields: Vec<FieldCheck>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedObject {
    pub name: String,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivilegeClassSpec {
    pub src: String,
    pub tgt: String,
    #[serde(default)]
    pub objects: Vec<SharedObject>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Policy {
    #[serde(default)]
    pub compartments: Vec<CompartmentSpec>,
    #[serde(default)]
    pub address_spaces: Vec<AddressSpaceSpec>,
    #[serde(default)]
    pub transitions: Vec<EdgeSpec>,
    #[serde(default)]
    pub gates: Vec<GateSpec>,
    #[serde(default)]
    pub transfer_rules: Vec<TransferRuleSpec>,
    #[serde(default)]
    pub privilege_classes: Vec<PrivilegeClassSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown compartment `{0}`")]
    UnknownCompartment(String),
    #[error("duplicate compartment `{0}`")]
    DuplicateCompartment(String),
    #[error("`{0}` is a reserved compartment name")]
    ReservedName(String),
    #[error("address space {asid} holds {count} modules, more than {SPACE_CAPACITY}")]
    SpaceOverCapacity { asid: u16, count: usize },
    #[error("compartment `{0}` is assigned to more than one address space")]
    MultipleSpaces(String),
    #[error("field at offset {offset}: {detail}")]
    BadField { offset: u16, detail: String },
    #[error("transfer between `{0}` and `{1}` crosses address spaces")]
    TransferAcrossSpaces(String, String),
    #[error("duplicate gate `{0}`")]
    DuplicateGate(String),
    #[error("self edge on `{0}`")]
    SelfEdge(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

impl Policy {
    pub fn from_toml(text: &str) -> Result<Policy, PolicyError> {
        toml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }

    pub fn compile(&self) -> Result<CompiledPolicy, PolicyError> {
        CompiledPolicy::new(self)
    }
}

/// Unordered compartment pair identifying a privilege class of shared objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassKey(pub CompartmentId, pub CompartmentId);

impl ClassKey {
    pub fn new(a: CompartmentId, b: CompartmentId) -> ClassKey {
        ClassKey(a.min(b), a.max(b))
    }
}

impl fmt::Display for ClassKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}", self.0, self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferRule {
    pub src: CompartmentId,
    pub tgt: CompartmentId,
    pub class: ClassKey,
    pub fields: Vec<FieldCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TransferError {
    #[error("no transfer rule")]
    NoMatchingRule,
    #[error("field at offset {offset} holds {value}, outside its legal ranges")]
    RangeViolation { offset: u16, value: u64 },
}

/// Checks every declared field of the rule matching `(src, tgt)`.
pub fn validate_transfer<'a>(
    rules: &'a [TransferRule],
    src: CompartmentId,
    tgt: CompartmentId,
    page: &[u8],
) -> Result<&'a TransferRule, TransferError> {
    assert_eq!(page.len(), PAGE_SIZE);
    let rule = rules
        .iter()
        .find(|r| r.src == src && r.tgt == tgt)
        .ok_or(TransferError::NoMatchingRule)?;
    for f in &rule.fields {
        let v = f.read(page);
        if !f.admits(v) {
            return Err(TransferError::RangeViolation { offset: f.offset, value: v });
        }
    }
    Ok(rule)
}

fn check_field(f: &FieldCheck) -> Result<(), PolicyError> {
    let bad = |d: &str| PolicyError::BadField {
        offset: f.offset,
        detail: d.to_string(),
    };
    if ![1, 2, 4, 8].contains(&f.width) {
        return Err(bad("width must be 1, 2, 4 or 8"));
    }
    if f.offset as usize + f.width as usize > PAGE_SIZE {
        return Err(bad("field extends past the page"));
    }
    if f.ranges.is_empty() {
        return Err(bad("no legal ranges"));
    }
    let max = if f.width == 8 { u64::MAX } else { (1u64 << (8 * f.width)) - 1 };
    for (i, [lo, hi]) in f.ranges.iter().enumerate() {
        if lo > hi || *hi > max {
            return Err(bad("empty or unrepresentable range"));
        }
        if i > 0 && f.ranges[i - 1][1] >= *lo {
            return Err(bad("ranges must be sorted and disjoint"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompartmentInfo {
    pub id: CompartmentId,
    pub name: String,
    /// `None` for the core kernel and the monitor, which live in every space.
    pub asid: Option<Asid>,
    pub pkey: Pkey,
    pub heap_pages: u32,
    pub jit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledPolicy {
    pub compartments: Vec<CompartmentInfo>,
    pub spaces: BTreeMap<Asid, Vec<CompartmentId>>,
    pub transitions: BTreeSet<(CompartmentId, CompartmentId)>,
    pub gates: Vec<(String, CompartmentId, CompartmentId)>,
    pub transfer_rules: Vec<TransferRule>,
    pub layout: PageLayout,
    /// Dependency edges crossing address spaces (zero when spaces are explicit
    /// and respect every dependency).
    pub crossings: usize,
}

impl CompiledPolicy {
    fn new(p: &Policy) -> Result<CompiledPolicy, PolicyError> {
        let mut names: Vec<String> = vec![CORE_NAME.into(), MONITOR_NAME.into()];
        for c in &p.compartments {
            if c.name == CORE_NAME || c.name == MONITOR_NAME {
                return Err(PolicyError::ReservedName(c.name.clone()));
            }
            if names.contains(&c.name) {
                return Err(PolicyError::DuplicateCompartment(c.name.clone()));
            }
            names.push(c.name.clone());
        }
        let id_of = |n: &str| -> Result<CompartmentId, PolicyError> {
            names
                .iter()
                .position(|x| x == n)
                .map(|i| CompartmentId(i as u16))
                .ok_or_else(|| PolicyError::UnknownCompartment(n.to_string()))
        };

        let mut graph_edges = Vec::new();
        for (i, c) in p.compartments.iter().enumerate() {
            for d in &c.depends {
                let j = id_of(d)?.0 as usize;
                if j < 2 {
                    continue;
                }
                if j - 2 == i {
                    return Err(PolicyError::SelfEdge(c.name.clone()));
                }
                graph_edges.push((i, j - 2));
            }
        }
        let graph = DependencyGraph::new(p.compartments.iter().map(|c| c.name.clone()).collect(), graph_edges);

        // Address-space placement: explicit lists first, partitioner for the rest.
        let mut placed: BTreeMap<CompartmentId, (Asid, Pkey)> = BTreeMap::new();
        let mut spaces: BTreeMap<Asid, Vec<CompartmentId>> = BTreeMap::new();
        for s in &p.address_spaces {
            if s.members.len() > SPACE_CAPACITY {
                return Err(PolicyError::SpaceOverCapacity {
                    asid: s.asid,
                    count: s.members.len(),
                });
            }
            for (slot, m) in s.members.iter().enumerate() {
                let id = id_of(m)?;
                if id.0 < 2 {
                    return Err(PolicyError::ReservedName(m.clone()));
                }
                let pkey = Pkey::new(Pkey::FIRST_MODULE + slot as u8).unwrap();
                if placed.insert(id, (Asid(s.asid), pkey)).is_some() {
                    return Err(PolicyError::MultipleSpaces(m.clone()));
                }
                spaces.entry(Asid(s.asid)).or_default().push(id);
            }
        }
        let unplaced: Vec<usize> = (0..p.compartments.len())
            .filter(|i| !placed.contains_key(&CompartmentId(*i as u16 + 2)))
            .collect();
        if !unplaced.is_empty() {
            let sub = graph.induced(&unplaced);
            let part = partition(&sub, SPACE_CAPACITY);
            let mut next = spaces.keys().last().map_or(0, |a| a.0 + 1);
            for members in &part.spaces {
                let asid = Asid(next);
                next += 1;
                for (slot, local) in members.iter().enumerate() {
                    let id = CompartmentId(unplaced[*local] as u16 + 2);
                    placed.insert(id, (asid, Pkey::new(Pkey::FIRST_MODULE + slot as u8).unwrap()));
                    spaces.entry(asid).or_default().push(id);
                }
            }
        }
        if spaces.is_empty() {
            spaces.insert(Asid(0), Vec::new());
        }
        let crossings = graph
            .edges
            .iter()
            .filter(|(a, b)| {
                placed[&CompartmentId(*a as u16 + 2)].0 != placed[&CompartmentId(*b as u16 + 2)].0
            })
            .count();

        let mut compartments = vec![
            CompartmentInfo {
                id: CompartmentId::CORE,
                name: CORE_NAME.into(),
                asid: None,
                pkey: Pkey::CORE,
                heap_pages: DEFAULT_HEAP_PAGES,
                jit: false,
            },
            CompartmentInfo {
                id: CompartmentId::MONITOR,
                name: MONITOR_NAME.into(),
                asid: None,
                pkey: Pkey::MONITOR,
                heap_pages: DEFAULT_HEAP_PAGES,
                jit: false,
            },
        ];
        for (i, c) in p.compartments.iter().enumerate() {
            let id = CompartmentId(i as u16 + 2);
            let (asid, pkey) = placed[&id];
            compartments.push(CompartmentInfo {
                id,
                name: c.name.clone(),
                asid: Some(asid),
                pkey,
                heap_pages: c.heap_pages,
                jit: c.jit,
            });
        }

        let mut transitions = BTreeSet::new();
        for e in &p.transitions {
            let (a, b) = (id_of(&e.from)?, id_of(&e.to)?);
            if a == b {
                return Err(PolicyError::SelfEdge(e.from.clone()));
            }
            transitions.insert((a, b));
        }
        let mut gates = Vec::new();
        for g in &p.gates {
            if gates.iter().any(|(n, _, _): &(String, _, _)| *n == g.name) {
                return Err(PolicyError::DuplicateGate(g.name.clone()));
            }
            gates.push((g.name.clone(), id_of(&g.from)?, id_of(&g.to)?));
        }

        let mut transfer_rules = Vec::new();
        for r in &p.transfer_rules {
            let (src, tgt) = (id_of(&r.src)?, id_of(&r.tgt)?);
            let sa = compartments[src.0 as usize].asid;
            let ta = compartments[tgt.0 as usize].asid;
            if sa.is_none() || ta.is_none() || sa != ta {
                return Err(PolicyError::TransferAcrossSpaces(r.src.clone(), r.tgt.clone()));
            }
            for f in &r.fields {
                check_field(f)?;
            }
            transfer_rules.push(TransferRule {
                src,
                tgt,
                class: ClassKey::new(src, tgt),
                fields: r.fields.clone(),
            });
        }

        let mut objects = Vec::new();
        for c in &p.privilege_classes {
            let key = ClassKey::new(id_of(&c.src)?, id_of(&c.tgt)?);
            for o in &c.objects {
                objects.push(ClassedObject {
                    name: o.name.clone(),
                    class: key,
                    size: o.size,
                });
            }
        }
        let layout = assign_privilege_classes(&objects)?;

        Ok(CompiledPolicy {
            compartments,
            spaces,
            transitions,
            gates,
            transfer_rules,
            layout,
            crossings,
        })
    }

    pub fn id_of(&self, name: &str) -> Option<CompartmentId> {
        self.compartments.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn info(&self, id: CompartmentId) -> &CompartmentInfo {
        &self.compartments[id.0 as usize]
    }

    pub fn modules(&self) -> impl Iterator<Item = &CompartmentInfo> {
        self.compartments.iter().skip(2)
    }

    /// Whether a call from `from` to `to` is permitted. Edges touching the
    /// core kernel or the monitor are implicit.
    pub fn allows(&self, from: CompartmentId, to: CompartmentId) -> bool {
        let special = |c: CompartmentId| c == CompartmentId::CORE || c == CompartmentId::MONITOR;
        from != to && (special(from) || special(to) || self.transitions.contains(&(from, to)))
    }

    /// Stable text rendering used for diffing compilations.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for c in &self.compartments {
            let asid = c.asid.map_or("*".to_string(), |a| a.0.to_string());
            s.push_str(&format!("compartment {} {} asid={} {} heap={} jit={}\n", c.id, c.name, asid, c.pkey, c.heap_pages, c.jit));
        }
        for (a, b) in &self.transitions {
            s.push_str(&format!("transition {} -> {}\n", a, b));
        }
        for (n, a, b) in &self.gates {
            s.push_str(&format!("gate {} {} -> {}\n", n, a, b));
        }
        for r in &self.transfer_rules {
            s.push_str(&format!("transfer {} -> {} class={} fields={:?}\n", r.src, r.tgt, r.class, r.fields));
        }
        for (i, p) in self.layout.pages.iter().enumerate() {
            let objs: Vec<String> = p.objects.iter().map(|(n, o)| format!("{}@{}", n, o)).collect();
            s.push_str(&format!("page {} class={} used={} {}\n", i, p.class, p.used, objs.join(",")));
        }
        s.push_str(&format!("crossings {}\n", self.crossings));
        s
    }
}

/// Module dependency graph; an edge `(a, b)` means `a` depends on `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    out: Vec<Vec<usize>>,
}

impl DependencyGraph {
    /// Builds a graph; duplicate edges collapse and self edges are dropped.
    pub fn new(names: Vec<String>, edges: Vec<(usize, usize)>) -> DependencyGraph {
        let set: BTreeSet<(usize, usize)> = edges.into_iter().filter(|(a, b)| a != b).collect();
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut out = vec![Vec::new(); names.len()];
        for (a, b) in &edges {
            out[*a].push(*b);
        }
        DependencyGraph { names, edges, out }
    }

    /// Parses `[modules]` tables of the form `name = ["dep", ...]`.
    pub fn from_toml(text: &str) -> Result<(DependencyGraph, Option<usize>), PolicyError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            capacity: Option<usize>,
            modules: BTreeMap<String, Vec<String>>,
        }
        let f: File = toml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
        let mut names: Vec<String> = f.modules.keys().cloned().collect();
        for deps in f.modules.values() {
            for d in deps {
                if !names.contains(d) {
                    names.push(d.clone());
                }
            }
        }
        names.sort();
        let idx = |n: &str| names.binary_search_by(|x| x.as_str().cmp(n)).unwrap();
        let mut edges = Vec::new();
        for (m, deps) in &f.modules {
            for d in deps {
                edges.push((idx(m), idx(d)));
            }
        }
        Ok((DependencyGraph::new(names.clone(), edges), f.capacity))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn deps(&self, n: usize) -> &[usize] {
        &self.out[n]
    }

    /// Size of the transitive dependency closure, the node itself included.
    pub fn closure_size(&self, n: usize) -> usize {
        let mut seen = vec![false; self.len()];
        let mut q = VecDeque::from([n]);
        seen[n] = true;
        let mut count = 0;
        while let Some(x) = q.pop_front() {
            count += 1;
            for &y in &self.out[x] {
                if !seen[y] {
                    seen[y] = true;
                    q.push_back(y);
                }
            }
        }
        count
    }

    fn induced(&self, keep: &[usize]) -> DependencyGraph {
        let pos: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let names = keep.iter().map(|n| self.names[*n].clone()).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|(a, b)| Some((*pos.get(a)?, *pos.get(b)?)))
            .collect();
        DependencyGraph::new(names, edges)
    }

    /// Number of edges whose endpoints lie in different spaces.
    pub fn crossings(&self, space_of: &[usize]) -> usize {
        self.edges.iter().filter(|(a, b)| space_of[*a] != space_of[*b]).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// Node indices per address space; position in the list fixes the pkey.
    pub spaces: Vec<Vec<usize>>,
    pub space_of: Vec<usize>,
    pub crossings: usize,
}

impl Partition {
    pub fn pkey_of(&self, node: usize) -> Pkey {
        let s = &self.spaces[self.space_of[node]];
        let slot = s.iter().position(|n| *n == node).unwrap();
        Pkey::new(Pkey::FIRST_MODULE + slot as u8).unwrap()
    }

    pub fn report(&self, g: &DependencyGraph) -> String {
        let mut s = format!("spaces {}\ncrossings {}\n", self.spaces.len(), self.crossings);
        for (i, members) in self.spaces.iter().enumerate() {
            let names: Vec<&str> = members.iter().map(|n| g.names[*n].as_str()).collect();
            s.push_str(&format!("space {} [{}] {}\n", i, members.len(), names.join(" ")));
        }
        s
    }
}

/// Greedy locality-aware placement of modules into address spaces of at
/// most `capacity` modules.
///
/// Modules are visited by descending closure size, ties by name. Each visit
/// places the module (if still unplaced) together with its unplaced direct
/// dependencies into the space that creates the fewest crossing edges
/// against already placed modules, preferring the emptiest such space; a
/// fresh space is always a candidate. A group larger than `capacity` is
/// truncated and the remainder is placed on its own visit.
pub fn partition(g: &DependencyGraph, capacity: usize) -> Partition {
    assert!(capacity >= 1);
    let n = g.len();
    let mut rev = vec![Vec::new(); n];
    for (a, b) in &g.edges {
        rev[*b].push(*a);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let sizes: Vec<usize> = (0..n).map(|i| g.closure_size(i)).collect();
    order.sort_by(|a, b| sizes[*b].cmp(&sizes[*a]).then_with(|| g.names[*a].cmp(&g.names[*b])));

    const NONE: usize = usize::MAX;
    let mut space_of = vec![NONE; n];
    let mut spaces: Vec<Vec<usize>> = Vec::new();
    for &m in &order {
        let mut deps: Vec<usize> = g.deps(m).iter().copied().filter(|d| space_of[*d] == NONE).collect();
        deps.sort_by(|a, b| g.names[*a].cmp(&g.names[*b]));
        let mut group = Vec::new();
        if space_of[m] == NONE {
            group.push(m);
        }
        group.extend(deps);
        if group.is_empty() {
            continue;
        }
        group.truncate(capacity);
        let cost = |s: usize| -> usize {
            group
                .iter()
                .map(|x| {
                    g.deps(*x)
                        .iter()
                        .chain(rev[*x].iter())
                        .filter(|y| space_of[**y] != NONE && space_of[**y] != s && !group.contains(y))
                        .count()
                })
                .sum()
        };
        let fresh = spaces.len();
        let best = (0..=spaces.len())
            .filter(|s| *s == fresh || spaces[*s].len() + group.len() <= capacity)
            .min_by_key(|s| (cost(*s), spaces.get(*s).map_or(0, |v| v.len()), *s))
            .unwrap();
        if best == fresh {
            spaces.push(Vec::new());
        }
        for x in group {
            space_of[x] = best;
            spaces[best].push(x);
        }
    }
    let crossings = g.crossings(&space_of);
    Partition {
        spaces,
        space_of,
        crossings,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassedObject {
    pub name: String,
    pub class: ClassKey,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedPage {
    pub class: ClassKey,
    /// Object names with their byte offsets inside the page.
    pub objects: Vec<(String, u32)>,
    pub used: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageLayout {
    pub pages: Vec<SharedPage>,
}

impl PageLayout {
    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    /// Page index and offset of an object.
    pub fn locate(&self, name: &str) -> Option<(usize, u32)> {
        self.pages.iter().enumerate().find_map(|(i, p)| {
            p.objects.iter().find(|(n, _)| n == name).map(|(_, o)| (i, *o))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("object `{name}` is {size} bytes, larger than a page")]
    ObjectTooLarge { name: String, size: u32 },
}

/// First-fit-decreasing packing of shared objects, one set of pages per class.
pub fn assign_privilege_classes(objects: &[ClassedObject]) -> Result<PageLayout, LayoutError> {
    if let Some(o) = objects.iter().find(|o| o.size as usize > PAGE_SIZE) {
        return Err(LayoutError::ObjectTooLarge {
            name: o.name.clone(),
            size: o.size,
        });
    }
    let mut by_class: BTreeMap<ClassKey, Vec<&ClassedObject>> = BTreeMap::new();
    for o in objects {
        by_class.entry(o.class).or_default().push(o);
    }
    let mut layout = PageLayout::default();
    for (class, mut objs) in by_class {
        objs.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.name.cmp(&b.name)));
        let first = layout.pages.len();
        for o in objs {
            let slot = layout.pages[first..]
                .iter()
                .position(|p| p.used as usize + o.size as usize <= PAGE_SIZE);
            let page = match slot {
                Some(i) => &mut layout.pages[first + i],
                None => {
                    layout.pages.push(SharedPage {
                        class,
                        objects: Vec::new(),
                        used: 0,
                    });
                    layout.pages.last_mut().unwrap()
                }
            };
            page.objects.push((o.name.clone(), page.used));
            page.used += o.size;
        }
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect()
    }

    #[test]
    fn disconnected_pairs_fit() {
        let g = DependencyGraph::new(names(5), vec![(0, 1), (2, 3)]);
        let p = partition(&g, 2);
        assert_eq!(p.crossings, 0);
        assert_eq!(p.space_of[0], p.space_of[1]);
        assert_eq!(p.space_of[2], p.space_of[3]);
        assert!(p.spaces.iter().all(|s| s.len() <= 2));
    }

    #[test]
    fn listing_ranges_are_inclusive() {
        let f = FieldCheck {
            offset: 0,
            width: 4,
            ranges: vec![[0, 4], [32, 47]],
        };
        assert!(f.admits(0) && f.admits(4) && f.admits(32) && f.admits(47));
        assert!(!f.admits(5) && !f.admits(20) && !f.admits(48));
    }

    #[test]
    fn no_rule_is_denied() {
        let page = vec![0u8; PAGE_SIZE];
        assert_eq!(
            validate_transfer(&[], CompartmentId(2), CompartmentId(3), &page).unwrap_err(),
            TransferError::NoMatchingRule
        );
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let f = FieldCheck {
            offset: 0,
            width: 1,
            ranges: vec![[0, 10], [10, 12]],
        };
        assert!(check_field(&f).is_err());
    }

    #[test]
    fn same_class_shares_a_page() {
        let k = ClassKey::new(CompartmentId(2), CompartmentId(3));
        let objs = vec![
            ClassedObject { name: "x".into(), class: k, size: 1000 },
            ClassedObject { name: "y".into(), class: k, size: 1000 },
        ];
        let l = assign_privilege_classes(&objs).unwrap();
        assert_eq!(l.page_count(), 1);
    }

    #[test]
    fn oversize_object_is_rejected() {
        let k = ClassKey::new(CompartmentId(2), CompartmentId(3));
        let objs = vec![ClassedObject { name: "big".into(), class: k, size: 4097 }];
        assert!(matches!(assign_privilege_classes(&objs), Err(LayoutError::ObjectTooLarge { .. })));
    }
}
