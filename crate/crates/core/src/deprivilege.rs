//! Scanner and rewriter for privileged byte sequences.
//!
//! `scan` reports every offset holding one of the target sequences and
//! classifies it. `rewrite` replaces real privileged instructions with calls
//! into a stub table and removes accidental occurrences, iterating until the
//! buffer is clean.

use crate::isa::{
    decode_all, execute_privileged, lift, reencode, run, AluOp, BranchTarget, Bus, Cpu, DecodeError, DirectPrivilege,
    Field, FlatBus, Instr, LayoutError, MemRef, Node, Op, PrivilegeHooks, Reg, Rm, Rm8, RunOutcome, StepFault,
    CR4_PKS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use thiserror::Error;

/// Iterations allowed before the rewriter gives up.
pub const MAX_ITERATIONS: usize = 16;
/// Bytes reserved per stub slot.
pub const STUB_STRIDE: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetSeq {
    Wrmsr,
    MovToCr,
    MovFromCr,
    SysReg,
}

impl TargetSeq {
    pub const ALL: [TargetSeq; 4] = [TargetSeq::Wrmsr, TargetSeq::MovToCr, TargetSeq::MovFromCr, TargetSeq::SysReg];

    pub fn bytes(self) -> [u8; 2] {
        match self {
            TargetSeq::Wrmsr => [0x0F, 0x30],
            TargetSeq::MovToCr => [0x0F, 0x22],
            TargetSeq::MovFromCr => [0x0F, 0x20],
            TargetSeq::SysReg => [0x0F, 0x01],
        }
    }

    pub fn matching(a: u8, b: u8) -> Option<TargetSeq> {
        TargetSeq::ALL.into_iter().find(|s| s.bytes() == [a, b])
    }
}

impl fmt::Display for TargetSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b] = self.bytes();
        write!(f, "{:02x}{:02x}", a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnintendedKind {
    SpansBoundary,
    InImmediate,
    InDisplacement,
    InModrmOrOpcode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Intended,
    Unintended(UnintendedKind),
}

impl Class {
    pub fn is_intended(self) -> bool {
        self == Class::Intended
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::Intended => "intended",
            Class::Unintended(UnintendedKind::SpansBoundary) => "spans_boundary",
            Class::Unintended(UnintendedKind::InImmediate) => "in_immediate",
            Class::Unintended(UnintendedKind::InDisplacement) => "in_displacement",
            Class::Unintended(UnintendedKind::InModrmOrOpcode) => "in_modrm_or_opcode",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Occurrence {
    pub offset: usize,
    pub seq: TargetSeq,
    pub class: Class,
    /// Index of the instruction holding the first byte.
    pub instr: usize,
}

impl fmt::Display for Occurrence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}  {}  {}", self.offset, self.seq, self.class)
    }
}

/// Reports every target sequence in `bytes`, in ascending offset order.
pub fn scan(bytes: &[u8]) -> Result<Vec<Occurrence>, DecodeError> {
    let decoded = decode_all(bytes)?;
    let mut out = Vec::new();
    for off in 0..bytes.len().saturating_sub(1) {
        let Some(seq) = TargetSeq::matching(bytes[off], bytes[off + 1]) else { continue };
        let i = match decoded.binary_search_by_key(&off, |(o, _)| *o) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let (start, ins) = decoded[i];
        let rel = off - start;
        let class = if rel + 1 >= ins.len as usize {
            Class::Unintended(UnintendedKind::SpansBoundary)
        } else if rel == 0 && ins.op.privileged().is_some() {
            Class::Intended
        } else {
            match ins.op.layout().field_at(rel) {
                Some(Field::Immediate) => Class::Unintended(UnintendedKind::InImmediate),
                Some(Field::Displacement) => Class::Unintended(UnintendedKind::InDisplacement),
                _ => Class::Unintended(UnintendedKind::InModrmOrOpcode),
            }
        };
        out.push(Occurrence {
            offset: off,
            seq,
            class,
            instr: i,
        });
    }
    Ok(out)
}

/// Privileged operations moved out of line, one slot each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubTable {
    pub base: u32,
    pub ops: Vec<StubOp>,
}

/// Serializable record of a stubbed instruction (its original encoding).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubOp {
    pub bytes: Vec<u8>,
}

impl StubTable {
    pub fn new(base: u32) -> StubTable {
        StubTable { base, ops: Vec::new() }
    }

    pub fn range(&self) -> Range<u32> {
        self.base..self.base + self.ops.len() as u32 * STUB_STRIDE
    }

    /// Address of the slot for `op`, adding one if needed.
    pub fn slot_for(&mut self, op: &Op) -> u32 {
        let bytes = Instr::new(*op).bytes();
        let k = match self.ops.iter().position(|s| s.bytes == bytes) {
            Some(k) => k,
            None => {
                self.ops.push(StubOp { bytes });
                self.ops.len() - 1
            }
        };
        self.base + k as u32 * STUB_STRIDE
    }

    pub fn lookup(&self, target: u32) -> Option<Op> {
        let off = target.checked_sub(self.base)?;
        if off % STUB_STRIDE != 0 {
            return None;
        }
        let s = self.ops.get((off / STUB_STRIDE) as usize)?;
        crate::isa::decode(&s.bytes, 0).ok().map(|i| i.op)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stub table serializes")
    }

    pub fn from_toml(s: &str) -> Result<StubTable, toml::de::Error> {
        toml::from_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    InsertNop,
    Reorder,
    DataAdjust,
    RegisterReassign,
    EquivalentReplace,
    GateSubstitute,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::InsertNop => "insert_nop",
            Strategy::Reorder => "reorder",
            Strategy::DataAdjust => "data_adjust",
            Strategy::RegisterReassign => "register_reassign",
            Strategy::EquivalentReplace => "equivalent_replace",
            Strategy::GateSubstitute => "gate_substitute",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanStep {
    pub iteration: usize,
    /// Offset of the occurrence, or of the instruction for stubbed
    /// instructions that are not target sequences (`rdmsr`).
    pub offset: usize,
    pub class: Class,
    pub strategy: Strategy,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RewritePlan {
    pub steps: Vec<PlanStep>,
    pub iterations: usize,
    /// Registers the rewritten code may leave with different values.
    pub scratch: BTreeSet<Reg>,
    /// `(privileged instructions, unintended occurrences)` before each
    /// iteration, then after the last.
    pub progress: Vec<(usize, usize)>,
}

impl RewritePlan {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for p in &self.steps {
            s.push_str(&format!("{}  {}  {}  {}\n", p.iteration, p.offset, p.class, p.strategy));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("rewrite stuck at iteration {iteration}: {reason}")]
    RewriteStuck { iteration: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewriteOptions {
    /// Load address of the buffer (branch targets outside it are absolute).
    pub base: u32,
    /// Try swapping an adjacent independent pair before inserting a nop.
    pub reorder: bool,
}

impl Default for RewriteOptions {
    fn default() -> Self {
        RewriteOptions { base: 0x1000, reorder: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewritten {
    pub bytes: Vec<u8>,
    pub plan: RewritePlan,
    pub stubs: StubTable,
}

/// Work left: privileged instructions first, then accidental occurrences.
/// Compared lexicographically.
fn pending(bytes: &[u8]) -> Result<(usize, usize), DecodeError> {
    let privileged = decode_all(bytes)?.iter().filter(|(_, i)| i.op.privileged().is_some()).count();
    let unintended = scan(bytes)?.iter().filter(|o| !o.class.is_intended()).count();
    Ok((privileged, unintended))
}

/// Rewrites `bytes` until it holds no target sequence and no privileged
/// instruction. Privileged instructions become calls into `stubs`.
pub fn rewrite(bytes: &[u8], stubs: StubTable, opts: RewriteOptions) -> Result<Rewritten, RewriteError> {
    let mut cur = bytes.to_vec();
    let mut plan = RewritePlan::default();
    let mut stubs = stubs;
    let mut count = pending(&cur)?;
    plan.progress.push(count);
    while count != (0, 0) {
        if plan.iterations == MAX_ITERATIONS {
            return Err(RewriteError::RewriteStuck {
                iteration: plan.iterations,
                reason: format!("{:?} (privileged, unintended) left after the iteration bound", count),
            });
        }
        plan.iterations += 1;
        let next = rewrite_pass(&cur, &mut stubs, &mut plan, opts)?;
        let next_count = pending(&next)?;
        plan.progress.push(next_count);
        if next_count >= count {
            return Err(RewriteError::RewriteStuck {
                iteration: plan.iterations,
                reason: format!("no progress ({:?} -> {:?})", count, next_count),
            });
        }
        cur = next;
        count = next_count;
    }
    Ok(Rewritten { bytes: cur, plan, stubs })
}

/// Replacement for one node: `pre` runs only on fallthrough, `body` takes
/// over branches aimed at the node, `post` runs only on fallthrough out.
#[derive(Default)]
struct Edit {
    pre: Vec<Node>,
    body: Option<Vec<Node>>,
    post: Vec<Node>,
    swap_with_next: bool,
}

fn rewrite_pass(
    bytes: &[u8],
    stubs: &mut StubTable,
    plan: &mut RewritePlan,
    opts: RewriteOptions,
) -> Result<Vec<u8>, RewriteError> {
    let nodes = lift(bytes, opts.base)?;
    let decoded = decode_all(bytes)?;
    let occs = scan(bytes)?;
    let mut edits: Vec<Edit> = (0..nodes.len()).map(|_| Edit::default()).collect();
    let mut handled = BTreeSet::new();
    let iteration = plan.iterations;
    let push = |plan: &mut RewritePlan, offset, class, strategy| {
        plan.steps.push(PlanStep {
            iteration,
            offset,
            class,
            strategy,
        })
    };

    // Every privileged instruction leaves the buffer, target sequence or not.
    for (i, n) in nodes.iter().enumerate() {
        if n.op.privileged().is_some() {
            let addr = stubs.slot_for(&n.op);
            edits[i].body = Some(vec![Node {
                op: Op::Call { rel: 0 },
                target: Some(BranchTarget::Absolute(addr)),
            }]);
            handled.insert(i);
            push(plan, decoded[i].0, Class::Intended, Strategy::GateSubstitute);
        }
    }

    for occ in &occs {
        let Class::Unintended(kind) = occ.class else { continue };
        let i = occ.instr;
        if kind == UnintendedKind::SpansBoundary {
            // The second byte belongs to the next instruction; if that one is
            // being replaced anyway the pair may disappear, but a nop is cheap.
            if edits[i].swap_with_next || !edits[i].post.is_empty() {
                continue;
            }
            if opts.reorder
                && !handled.contains(&i)
                && !handled.contains(&(i + 1))
                && i + 1 < nodes.len()
                && can_swap(&nodes, i)
            {
                edits[i].swap_with_next = true;
                handled.insert(i);
                handled.insert(i + 1);
                push(plan, occ.offset, occ.class, Strategy::Reorder);
                continue;
            }
            edits[i].post.push(Node::plain(Op::Nop));
            push(plan, occ.offset, occ.class, Strategy::InsertNop);
            continue;
        }
        if !handled.insert(i) {
            continue;
        }
        let node = nodes[i];
        let prev = i.checked_sub(1).map(|p| *decoded[p].1.bytes().last().unwrap());
        let next = nodes.get(i + 1).map(|n| first_byte(&n.op));
        // Prefer a fully clean replacement; otherwise accept one that removes
        // at least one sequence and leave the rest to the next iteration.
        let before = targets_in_context(&[node.op], prev, next);
        let budgets = [0, before.saturating_sub(1)];
        let attempt = |f: &dyn Fn(Ctx) -> Option<Vec<Op>>| {
            budgets.iter().find_map(|&budget| f(Ctx { prev, next, budget }))
        };
        let fixed = match kind {
            UnintendedKind::InImmediate if node.target.is_some() => {
                // A branch displacement: shift the branch by one byte
                // relative to its target.
                let forward = matches!(node.target, Some(BranchTarget::Label(t)) if t > i);
                if forward {
                    edits[i].post.push(Node::plain(Op::Nop));
                } else {
                    edits[i].pre.push(Node::plain(Op::Nop));
                }
                Some((Strategy::InsertNop, None))
            }
            UnintendedKind::InImmediate => {
                attempt(&|c| split_immediate(&node.op, c)).map(|b| (Strategy::DataAdjust, Some(b)))
            }
            UnintendedKind::InDisplacement => {
                attempt(&|c| adjust_displacement(&node.op, c)).map(|b| (Strategy::DataAdjust, Some(b)))
            }
            UnintendedKind::InModrmOrOpcode => {
                let reassigned = budgets
                    .iter()
                    .find_map(|&budget| reassign_register(&nodes, i, Ctx { prev, next, budget }));
                match reassigned {
                    Some((body, r)) => {
                        plan.scratch.insert(r);
                        Some((Strategy::RegisterReassign, Some(body)))
                    }
                    None => attempt(&|c| equivalent_replace(&node.op, c)).map(|b| (Strategy::EquivalentReplace, Some(b))),
                }
            }
            UnintendedKind::SpansBoundary => unreachable!(),
        };
        match fixed {
            Some((strategy, body)) => {
                if let Some(b) = body {
                    edits[i].body = Some(b.into_iter().map(Node::plain).collect());
                }
                push(plan, occ.offset, occ.class, strategy);
            }
            None => {
                return Err(RewriteError::RewriteStuck {
                    iteration,
                    reason: format!("no clean strategy for {} at offset {} ({})", occ.class, occ.offset, node.op),
                })
            }
        }
    }

    Ok(reencode(&apply_edits(&nodes, edits), opts.base)?)
}

fn apply_edits(nodes: &[Node], mut edits: Vec<Edit>) -> Vec<Node> {
    // Resolve swaps into bodies first so label bookkeeping stays uniform.
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    for i in 0..nodes.len() {
        if edits[i].swap_with_next {
            order.swap(i, i + 1);
        }
    }
    let mut out: Vec<Node> = Vec::new();
    let mut label = vec![0usize; nodes.len() + 1];
    let mut slots = Vec::with_capacity(nodes.len());
    for &i in &order {
        let e = &mut edits[i];
        out.append(&mut e.pre);
        label[i] = out.len();
        slots.push(out.len());
        match e.body.take() {
            Some(b) => out.extend(b),
            None => out.push(nodes[i]),
        }
        out.append(&mut e.post);
    }
    label[nodes.len()] = out.len();
    for i in 0..nodes.len() {
        if edits[i].swap_with_next {
            // Branches to the first of a swapped pair enter at the pair.
            label[i] = label[i].min(label[i + 1]);
        }
    }
    for n in out.iter_mut() {
        if let Some(BranchTarget::Label(l)) = n.target {
            n.target = Some(BranchTarget::Label(label[l]));
        }
    }
    out
}

fn first_byte(op: &Op) -> u8 {
    Instr::new(*op).bytes()[0]
}

/// Neighbouring bytes of a replacement and how many target sequences the
/// replacement may still contain.
#[derive(Clone, Copy)]
struct Ctx {
    prev: Option<u8>,
    next: Option<u8>,
    budget: usize,
}

fn targets_in_context(ops: &[Op], prev: Option<u8>, next: Option<u8>) -> usize {
    let mut b: Vec<u8> = prev.into_iter().collect();
    for op in ops {
        crate::isa::encode(op, &mut b);
    }
    b.extend(next);
    b.windows(2).filter(|w| TargetSeq::matching(w[0], w[1]).is_some()).count()
}

/// Whether `ops` fits the budget when encoded between the neighbours.
fn clean_in_context(ops: &[Op], ctx: Ctx) -> bool {
    targets_in_context(ops, ctx.prev, ctx.next) <= ctx.budget
}

/// Fix-up constants tried in order; all bytes avoid 0x0F.
const CLEAN_KEYS: [u32; 8] = [
    0x1111_1111,
    0x2222_2222,
    0x4444_4444,
    0x0101_0101,
    0x5A5A_5A5A,
    0x0000_0040,
    0x0000_1000,
    0x7070_7070,
];

/// `mov r, imm` / `op r/m, imm` split into a masked value plus an
/// arithmetic fix-up with a clean constant.
fn split_immediate(op: &Op, ctx: Ctx) -> Option<Vec<Op>> {
    for k in CLEAN_KEYS {
        let cand = match *op {
            Op::MovImm32 { dst, imm } => vec![
                Op::MovImm32 { dst, imm: imm ^ k },
                Op::AluImm {
                    wide: false,
                    op: AluOp::Xor,
                    dst: Rm::Reg(dst),
                    imm: k,
                },
            ],
            Op::AluImm { wide, op: AluOp::Xor, dst, imm } => vec![
                Op::AluImm { wide, op: AluOp::Xor, dst, imm: imm ^ k },
                Op::AluImm { wide, op: AluOp::Xor, dst, imm: k },
            ],
            Op::AluImm { wide, op: AluOp::Add, dst, imm } => {
                // Sign-extended halves must sum to the sign-extended whole.
                let k = (k & 0x3FFF_FFFF) as i32;
                let (a, b) = match (imm as i32).checked_sub(k) {
                    Some(a) => (a, k),
                    None => ((imm as i32).checked_add(k)?, -k),
                };
                vec![
                    Op::AluImm { wide, op: AluOp::Add, dst, imm: a as u32 },
                    Op::AluImm { wide, op: AluOp::Add, dst, imm: b as u32 },
                ]
            }
            _ => return None,
        };
        if clean_in_context(&cand, ctx) {
            return Some(cand);
        }
    }
    None
}

fn mem_of(op: &Op) -> Option<MemRef> {
    match op {
        Op::Mov { dst: Rm::Mem(m), .. } | Op::Add { dst: Rm::Mem(m), .. } | Op::AluImm { dst: Rm::Mem(m), .. } => {
            Some(*m)
        }
        Op::Xor8 { dst: Rm8::Mem(m), .. } => Some(*m),
        Op::SysTable { mem, .. } => Some(*mem),
        _ => None,
    }
}

fn with_mem(op: &Op, m: MemRef) -> Op {
    let mut op = *op;
    match &mut op {
        Op::Mov { dst: Rm::Mem(x), .. } | Op::Add { dst: Rm::Mem(x), .. } | Op::AluImm { dst: Rm::Mem(x), .. } => {
            *x = m
        }
        Op::Xor8 { dst: Rm8::Mem(x), .. } => *x = m,
        Op::SysTable { mem, .. } => *mem = m,
        _ => {}
    }
    op
}

/// Register operand read besides the memory operand, if any.
fn src_reg(op: &Op) -> Option<Reg> {
    match op {
        Op::Mov { src, .. } | Op::Add { src, .. } => Some(*src),
        Op::Xor8 { src, .. } => Some(src.location().0),
        _ => None,
    }
}

/// Moves part of the displacement into the base (or scale-1 index)
/// register around the access: `add r, k ; op [.. + d - k] ; add r, -k`.
fn adjust_displacement(op: &Op, ctx: Ctx) -> Option<Vec<Op>> {
    let m = mem_of(op)?;
    let mut regs = Vec::new();
    if let Some(b) = m.base {
        if m.index != Some(b) {
            regs.push(b);
        }
    }
    if let (Some(x), 0) = (m.index, m.scale) {
        if m.base != Some(x) {
            regs.push(x);
        }
    }
    for r in regs {
        if src_reg(op) == Some(r) || r == Reg::Rsp {
            continue;
        }
        for k in [0x40i32, 0x80, 0x100, 0x1000, -0x40, -0x80, 0x11, 0x2222] {
            let Some(d) = m.disp.value().checked_sub(k) else { continue };
            let cand = vec![
                Op::AluImm {
                    wide: true,
                    op: AluOp::Add,
                    dst: Rm::Reg(r),
                    imm: k as u32,
                },
                with_mem(op, m.with_disp(d)),
                Op::AluImm {
                    wide: true,
                    op: AluOp::Add,
                    dst: Rm::Reg(r),
                    imm: (-k) as u32,
                },
            ];
            if clean_in_context(&cand, ctx) {
                return Some(cand);
            }
        }
    }
    None
}

/// Registers read by an instruction (stub calls count as reading all).
fn reads(op: &Op) -> Vec<Reg> {
    let mut v = Vec::new();
    let mem = |m: &MemRef, v: &mut Vec<Reg>| {
        v.extend(m.base);
        v.extend(m.index);
    };
    match op {
        Op::Nop | Op::Jmp { .. } | Op::MovImm32 { .. } => {}
        Op::MovImm8 { dst, .. } => v.push(dst.location().0),
        Op::Mov { dst, src, .. } => {
            v.push(*src);
            if let Rm::Mem(m) = dst {
                mem(m, &mut v)
            }
        }
        Op::Add { dst, src, .. } => {
            v.push(*src);
            match dst {
                Rm::Reg(r) => v.push(*r),
                Rm::Mem(m) => mem(m, &mut v),
            }
        }
        Op::AluImm { dst, .. } => match dst {
            Rm::Reg(r) => v.push(*r),
            Rm::Mem(m) => mem(m, &mut v),
        },
        Op::Xor8 { dst, src } => {
            v.push(src.location().0);
            match dst {
                Rm8::Reg(r) => v.push(r.location().0),
                Rm8::Mem(m) => mem(m, &mut v),
            }
        }
        Op::Push(r) => v.extend([*r, Reg::Rsp]),
        Op::Pop(_) | Op::Ret => v.push(Reg::Rsp),
        Op::Call { .. } => v.extend(Reg::ALL),
        Op::Wrmsr => v.extend([Reg::Rcx, Reg::Rax, Reg::Rdx]),
        Op::Rdmsr => v.push(Reg::Rcx),
        Op::MovToCr { src, .. } => v.push(*src),
        Op::MovFromCr { .. } => {}
        Op::SysTable { mem: m, .. } => mem(m, &mut v),
    }
    v
}

/// Registers fully overwritten by an instruction.
fn kills(op: &Op) -> Vec<Reg> {
    match op {
        Op::MovImm32 { dst, .. } => vec![*dst],
        Op::Mov { dst: Rm::Reg(r), .. } | Op::Pop(r) | Op::MovFromCr { dst: r, .. } => vec![*r],
        Op::Rdmsr => vec![Reg::Rax, Reg::Rdx],
        _ => vec![],
    }
}

/// Whether `r` is dead after node `i`: along the path control takes from
/// there, it is written before it is read, or never read again. Forward
/// jumps are followed; backward or external control flow, calls into the
/// buffer and returns count as reads.
fn dead_after(nodes: &[Node], i: usize, r: Reg) -> bool {
    let mut j = i + 1;
    while let Some(n) = nodes.get(j) {
        if reads(&n.op).contains(&r) {
            return false;
        }
        match n.target {
            Some(BranchTarget::Label(t)) if t > j && matches!(n.op, Op::Jmp { .. }) => {
                j = t;
                continue;
            }
            Some(_) => return false,
            None => {}
        }
        if n.op == Op::Ret {
            return false;
        }
        if kills(&n.op).contains(&r) {
            return true;
        }
        j += 1;
    }
    true
}

/// Copies the base or index register of the operand into a dead register
/// and addresses through the copy.
fn reassign_register(nodes: &[Node], i: usize, ctx: Ctx) -> Option<(Vec<Op>, Reg)> {
    let op = nodes[i].op;
    let m = mem_of(&op)?;
    let used = reads(&op);
    for old in [m.index, m.base].into_iter().flatten() {
        for r in Reg::ALL {
            if r == Reg::Rsp || used.contains(&r) || !dead_after(nodes, i, r) {
                continue;
            }
            let nm = MemRef {
                base: if m.base == Some(old) { Some(r) } else { m.base },
                index: if m.index == Some(old) { Some(r) } else { m.index },
                ..m
            };
            if !nm.is_valid() {
                continue;
            }
            let cand = vec![
                Op::Mov {
                    wide: true,
                    dst: Rm::Reg(r),
                    src: old,
                },
                with_mem(&op, nm),
            ];
            if clean_in_context(&cand, ctx) {
                return Some((cand, r));
            }
        }
    }
    None
}

/// Same access through a different encoding: base and index swapped (scale
/// 1), or a wider displacement.
fn equivalent_replace(op: &Op, ctx: Ctx) -> Option<Vec<Op>> {
    let m = mem_of(op)?;
    let mut cands = Vec::new();
    if let (Some(b), Some(x), 0) = (m.base, m.index, m.scale) {
        if b != Reg::Rsp {
            cands.push(MemRef::canonical(Some(x), Some(b), 0, m.disp.value()));
        }
    }
    if m.base.is_some() && m.disp.size() < 4 {
        cands.push(MemRef {
            disp: crate::isa::Disp::D32(m.disp.value()),
            ..m
        });
    }
    if m.base.is_some() && !m.sib && m.base != Some(Reg::Rsp) {
        cands.push(MemRef { sib: true, ..m });
    }
    cands
        .into_iter()
        .filter(|c| c.is_valid())
        .map(|c| vec![with_mem(op, c)])
        .find(|c| clean_in_context(c, ctx))
}

/// Adjacent non-branch instructions touching disjoint registers and not
/// both touching memory.
fn can_swap(nodes: &[Node], i: usize) -> bool {
    let (a, b) = (nodes[i].op, nodes[i + 1].op);
    if a.is_control_flow() || b.is_control_flow() || a.privileged().is_some() || b.privileged().is_some() {
        return false;
    }
    let touches = |op: &Op| {
        let mut s: BTreeSet<Reg> = reads(op).into_iter().collect();
        s.extend(writes(op));
        s
    };
    let mem = |op: &Op| mem_of(op).is_some() || matches!(op, Op::Push(_) | Op::Pop(_));
    let entered_mid = nodes.iter().any(|n| n.target == Some(BranchTarget::Label(i + 1)));
    !entered_mid && touches(&a).is_disjoint(&touches(&b)) && !(mem(&a) && mem(&b))
}

/// Registers written at all (partially or fully).
fn writes(op: &Op) -> Vec<Reg> {
    match op {
        Op::MovImm32 { dst, .. } => vec![*dst],
        Op::MovImm8 { dst, .. } => vec![dst.location().0],
        Op::Mov { dst: Rm::Reg(r), .. } | Op::Add { dst: Rm::Reg(r), .. } | Op::AluImm { dst: Rm::Reg(r), .. } => {
            vec![*r]
        }
        Op::Xor8 { dst: Rm8::Reg(r), .. } => vec![r.location().0],
        Op::Push(_) => vec![Reg::Rsp],
        Op::Pop(r) => vec![*r, Reg::Rsp],
        Op::Rdmsr => vec![Reg::Rax, Reg::Rdx],
        Op::MovFromCr { dst, .. } => vec![*dst],
        _ => vec![],
    }
}

/// Hooks running rewritten code: calls into the stub table perform the
/// original privileged instruction with full privilege.
pub struct StubHooks<'a> {
    pub stubs: &'a StubTable,
}

impl PrivilegeHooks for StubHooks<'_> {
    fn privileged(&mut self, cpu: &mut Cpu, bus: &mut dyn Bus, instr: &Instr) -> Result<(), StepFault> {
        execute_privileged(cpu, bus, instr)
    }

    fn stub_call(&mut self, cpu: &mut Cpu, bus: &mut dyn Bus, target: u32) -> Option<Result<(), StepFault>> {
        let op = self.stubs.lookup(target)?;
        Some(execute_privileged(cpu, bus, &Instr::new(op)))
    }
}

/// Memory window and entry point used by the equivalence checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifySetup {
    pub code_base: u32,
    pub data_base: u32,
    pub data_len: usize,
    pub max_steps: usize,
}

impl Default for VerifySetup {
    fn default() -> Self {
        VerifySetup {
            code_base: 0x1000,
            data_base: 0x10_0000,
            data_len: 0x4000,
            max_steps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialState {
    pub seed: u64,
    pub run: usize,
    pub cpu: Cpu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass { runs: usize },
    Counterexample { state: Box<InitialState>, divergence: String },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct EndState {
    outcome: &'static str,
    cpu: Cpu,
    data: Vec<u8>,
}

fn run_one(code: &[u8], hooks: &mut dyn PrivilegeHooks, cpu: &Cpu, data: &[u8], setup: &VerifySetup) -> EndState {
    let mut bus = FlatBus::new(setup.code_base, code.to_vec(), setup.data_base, setup.data_len);
    bus.data.copy_from_slice(data);
    let mut cpu = cpu.clone();
    cpu.ip = setup.code_base;
    let end = setup.code_base + code.len() as u32;
    let outcome = match run(&mut cpu, &mut bus, hooks, end, setup.max_steps) {
        RunOutcome::Halted { .. } => "halted",
        RunOutcome::Fault { fault, .. } => match fault {
            StepFault::AccessFault { .. } => "access-fault",
            StepFault::DecodeFault { .. } => "decode-fault",
            StepFault::PrivilegeTrap(_) => "trap",
            StepFault::MonitorRejected { .. } => "rejected",
        },
        RunOutcome::StepLimit => "step-limit",
    };
    EndState {
        outcome,
        cpu,
        data: bus.data,
    }
}

/// First difference between two end states, ignoring `scratch` registers
/// and the instruction pointer.
fn divergence(a: &EndState, b: &EndState, scratch: &BTreeSet<Reg>) -> Option<String> {
    if a.outcome != b.outcome {
        return Some(format!("outcome {} vs {}", a.outcome, b.outcome));
    }
    if a.outcome != "halted" {
        return None;
    }
    for r in Reg::ALL {
        if !scratch.contains(&r) && a.cpu.reg(r) != b.cpu.reg(r) {
            return Some(format!("{} {:#x} vs {:#x}", r.name64(), a.cpu.reg(r), b.cpu.reg(r)));
        }
    }
    if a.cpu.pkrs() != b.cpu.pkrs() {
        return Some(format!("pkrs {:#x} vs {:#x}", a.cpu.pkrs(), b.cpu.pkrs()));
    }
    if a.cpu.cr != b.cpu.cr {
        return Some("control registers".into());
    }
    if a.cpu.msrs != b.cpu.msrs || a.cpu.gdtr != b.cpu.gdtr || a.cpu.idtr != b.cpu.idtr {
        return Some("system registers".into());
    }
    if let Some(i) = (0..a.data.len()).find(|&i| a.data[i] != b.data[i]) {
        return Some(format!("memory at +{:#x}", i));
    }
    None
}

/// Random register file: `rsi` points at the data window, `rsp` near its top.
pub fn random_cpu(rng: &mut impl Rng, setup: &VerifySetup) -> Cpu {
    let mut cpu = Cpu::with_pkrs(rng.gen());
    for r in Reg::ALL {
        cpu.set_reg(r, rng.gen());
    }
    cpu.set_reg(Reg::Rsi, setup.data_base as u64);
    // Headroom above the stack pointer so unmatched pops stay in the window.
    cpu.set_reg(Reg::Rsp, (setup.data_base as usize + setup.data_len - 0x200) as u64);
    for c in [0usize, 2, 3, 8] {
        cpu.cr[c] = rng.gen();
    }
    cpu.cr[4] = rng.gen::<u64>() | CR4_PKS;
    cpu
}

/// Runs `original` with native privilege and `rewritten` with stub calls
/// from `runs` seeded random states and compares the end states.
pub fn verify_equivalence(
    original: &[u8],
    rewritten: &[u8],
    stubs: &StubTable,
    scratch: &BTreeSet<Reg>,
    runs: usize,
    seed: u64,
    setup: &VerifySetup,
) -> Result<Verdict, DecodeError> {
    decode_all(original)?;
    decode_all(rewritten)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for run in 0..runs {
        let cpu = random_cpu(&mut rng, setup);
        let mut data = vec![0u8; setup.data_len];
        rng.fill(&mut data[..]);
        let a = run_one(original, &mut DirectPrivilege, &cpu, &data, setup);
        let b = run_one(rewritten, &mut StubHooks { stubs }, &cpu, &data, setup);
        if let Some(d) = divergence(&a, &b, scratch) {
            return Ok(Verdict::Counterexample {
                state: Box::new(InitialState { seed, run, cpu }),
                divergence: d,
            });
        }
    }
    Ok(Verdict::Pass { runs })
}

/// Seeded random subset programs for rewriter testing.
///
/// Register contract: `rsi` holds the data-window base (set by the
/// checker), the prologue points `rdi` into the window and loads a small
/// index into `rcx`; none of the three is written afterwards. Memory
/// operands stay inside the window. Target sequences are planted with
/// elevated probability.
pub mod corpus {
    use super::*;

    const FREE: [Reg; 4] = [Reg::Rax, Reg::Rdx, Reg::Rbx, Reg::Rbp];
    const DISP_HOT: [i32; 6] = [0x300F, 0x220F, 0x200F, 0x010F, 0x0F30, 0x0F];
    const IMM_HOT: [u32; 6] = [0x300F, 0x0F30_0F22, 0x0022_0F00, 0x010F_0000, 0x200F, 0x0F01_0F20];

    fn free(rng: &mut impl Rng) -> Reg {
        FREE[rng.gen_range(0..FREE.len())]
    }

    fn free8(rng: &mut impl Rng) -> crate::isa::Reg8 {
        // al, dl, bl, ah, dh, bh: bytes of rax, rdx, rbx.
        crate::isa::Reg8::new([0u8, 2, 3, 4, 6, 7][rng.gen_range(0..6)])
    }

    fn imm(rng: &mut impl Rng) -> u32 {
        if rng.gen_bool(0.25) {
            IMM_HOT[rng.gen_range(0..IMM_HOT.len())]
        } else {
            rng.gen()
        }
    }

    fn mem(rng: &mut impl Rng, width: i32) -> MemRef {
        match rng.gen_range(0..4) {
            0 => MemRef::canonical(Some(Reg::Rdi), None, 0, 0),
            1 => MemRef::canonical(Some(Reg::Rdi), Some(Reg::Rcx), rng.gen_range(0..4), rng.gen_range(0..0x80)),
            _ => {
                let d = if rng.gen_bool(0.3) {
                    DISP_HOT[rng.gen_range(0..DISP_HOT.len())]
                } else {
                    rng.gen_range(0..0x3000)
                };
                MemRef::canonical(Some(Reg::Rsi), None, 0, d.min(0x3FF0 - width))
            }
        }
    }

    fn rm(rng: &mut impl Rng) -> Rm {
        if rng.gen_bool(0.5) {
            Rm::Reg(free(rng))
        } else {
            Rm::Mem(mem(rng, 8))
        }
    }

    fn random_op(rng: &mut impl Rng) -> Op {
        match rng.gen_range(0..100) {
            0..=11 => Op::MovImm32 { dst: free(rng), imm: imm(rng) },
            12..=19 => Op::MovImm8 {
                dst: free8(rng),
                imm: if rng.gen_bool(0.5) { 0x0F } else { rng.gen() },
            },
            20..=31 => Op::Mov { wide: rng.gen(), dst: rm(rng), src: free(rng) },
            32..=35 => Op::Mov {
                wide: false,
                dst: Rm::Mem(MemRef::canonical(Some(Reg::Rdi), None, 0, 0)),
                src: Reg::Rcx,
            },
            36..=45 => Op::Add { wide: rng.gen(), dst: rm(rng), src: free(rng) },
            46..=53 => Op::Xor8 {
                dst: if rng.gen_bool(0.5) { Rm8::Reg(free8(rng)) } else { Rm8::Mem(mem(rng, 1)) },
                src: free8(rng),
            },
            54..=65 => Op::AluImm {
                wide: rng.gen(),
                op: if rng.gen() { AluOp::Add } else { AluOp::Xor },
                dst: rm(rng),
                imm: imm(rng),
            },
            66..=69 => Op::Nop,
            70..=73 => Op::Wrmsr,
            74..=75 => Op::Rdmsr,
            76..=79 => Op::MovToCr {
                cr: [0u8, 2, 3, 4, 8][rng.gen_range(0..5)],
                src: free(rng),
            },
            80..=83 => Op::MovFromCr {
                dst: free(rng),
                cr: [0u8, 2, 3, 4, 8][rng.gen_range(0..5)],
            },
            84..=87 => Op::SysTable {
                op: crate::isa::TableOp::from_reg_field(rng.gen_range(0..4)).unwrap(),
                mem: MemRef::canonical(Some(Reg::Rsi), None, 0, rng.gen_range(0..0x3000)),
            },
            _ => Op::Push(free(rng)),
        }
    }

    /// A program of at most `max_instrs` instructions (prologue included).
    pub fn random_program(seed: u64, max_instrs: usize) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = vec![
            Node::plain(Op::Mov { wide: true, dst: Rm::Reg(Reg::Rdi), src: Reg::Rsi }),
            Node::plain(Op::AluImm {
                wide: true,
                op: AluOp::Add,
                dst: Rm::Reg(Reg::Rdi),
                imm: 0x3400,
            }),
            Node::plain(Op::MovImm32 {
                dst: Reg::Rcx,
                imm: rng.gen_range(0..0x80),
            }),
        ];
        let body = rng.gen_range(1..=max_instrs.saturating_sub(nodes.len()).max(1));
        let mut pushes = 0usize;
        for _ in 0..body {
            if pushes > 0 && rng.gen_bool(0.1) {
                nodes.push(Node::plain(Op::Pop(free(&mut rng))));
                pushes -= 1;
                continue;
            }
            let op = random_op(&mut rng);
            match op {
                Op::Push(_) if pushes >= 16 => continue,
                Op::Push(_) => pushes += 1,
                _ => {}
            }
            nodes.push(Node::plain(op));
        }
        // Forward jumps only, so every program terminates.
        let n = nodes.len();
        let jumps = rng.gen_range(0..=n / 8);
        for _ in 0..jumps {
            let at = rng.gen_range(3..=nodes.len());
            let remaining = nodes.len() - at;
            let skip = rng.gen_range(0..=remaining.min(6));
            let target = at + 1 + skip;
            for node in nodes.iter_mut() {
                if let Some(BranchTarget::Label(l)) = &mut node.target {
                    if *l >= at {
                        *l += 1;
                    }
                }
            }
            nodes.insert(
                at,
                Node {
                    op: Op::Jmp { rel: 0, short: rng.gen() },
                    target: Some(BranchTarget::Label(target)),
                },
            );
        }
        reencode(&nodes, VerifySetup::default().code_base).expect("generated program lays out")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifies_fields() {
        // mov [rdi+rcx*1+0x30], eax : ModRM 44, SIB 0F, disp8 30
        let b = [0x89, 0x44, 0x0F, 0x30];
        let occ = scan(&b).unwrap();
        assert_eq!(occ.len(), 1);
        assert_eq!(occ[0].class, Class::Unintended(UnintendedKind::InModrmOrOpcode));
        // mov [rsi+0x300F], eax : disp32 0F 30 00 00
        let b = [0x89, 0x86, 0x0F, 0x30, 0x00, 0x00];
        assert_eq!(scan(&b).unwrap()[0].class, Class::Unintended(UnintendedKind::InDisplacement));
    }

    #[test]
    fn stub_slots_are_shared_per_op() {
        let mut t = StubTable::new(0x8000);
        let a = t.slot_for(&Op::Wrmsr);
        let b = t.slot_for(&Op::Rdmsr);
        assert_eq!(t.slot_for(&Op::Wrmsr), a);
        assert_eq!(b, a + STUB_STRIDE);
        assert_eq!(t.lookup(b), Some(Op::Rdmsr));
        assert_eq!(t.lookup(b + 1), None);
        let round = StubTable::from_toml(&t.to_toml()).unwrap();
        assert_eq!(round, t);
    }

    #[test]
    fn liveness_stops_at_kill_and_backward_edges() {
        let nodes = vec![
            Node::plain(Op::Nop),
            Node::plain(Op::MovImm32 { dst: Reg::Rax, imm: 1 }),
            Node::plain(Op::Add { wide: true, dst: Rm::Reg(Reg::Rbx), src: Reg::Rax }),
        ];
        assert!(dead_after(&nodes, 0, Reg::Rax));
        assert!(!dead_after(&nodes, 0, Reg::Rbx));
        let looped = vec![
            Node::plain(Op::Nop),
            Node {
                op: Op::Jmp { rel: 0, short: true },
                target: Some(BranchTarget::Label(0)),
            },
        ];
        assert!(!dead_after(&looped, 0, Reg::Rax));
        // The kill at 2 is skipped by the jump; the read at 3 is reached.
        let skipped = vec![
            Node::plain(Op::Nop),
            Node {
                op: Op::Jmp { rel: 0, short: true },
                target: Some(BranchTarget::Label(3)),
            },
            Node::plain(Op::MovImm32 { dst: Reg::Rax, imm: 1 }),
            Node::plain(Op::Push(Reg::Rax)),
        ];
        assert!(!dead_after(&skipped, 0, Reg::Rax));
    }

    #[test]
    fn corpus_programs_decode_and_halt() {
        let setup = VerifySetup::default();
        for seed in 0..20 {
            let p = corpus::random_program(seed, 64);
            assert!(decode_all(&p).unwrap().len() <= 64 + 64 / 8 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cpu = random_cpu(&mut rng, &setup);
            let data = vec![0u8; setup.data_len];
            let end = run_one(&p, &mut DirectPrivilege, &cpu, &data, &setup);
            assert_eq!(end.outcome, "halted", "seed {} {}", seed, crate::isa::listing(&p).unwrap());
        }
    }
}
