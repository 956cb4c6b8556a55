//! Label-based instruction lists and re-encoding with branch relaxation.

use super::{decode_all, encode, DecodeError, Op};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchTarget {
    /// Index into the node list; `nodes.len()` denotes the end of the buffer.
    Label(usize),
    Absolute(u32),
}

/// One instruction whose relative branch (if any) is symbolic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    pub op: Op,
    pub target: Option<BranchTarget>,
}

impl Node {
    pub fn plain(op: Op) -> Node {
        debug_assert!(op.branch_rel().is_none());
        Node { op, target: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("branch at node {node} does not land on an instruction boundary")]
    UnresolvableBranch { node: usize },
}

/// Decodes `bytes` loaded at `base` into nodes with symbolic branch targets.
/// Targets outside `[base, base + len]` become absolute.
pub fn lift(bytes: &[u8], base: u32) -> Result<Vec<Node>, LayoutError> {
    let decoded = decode_all(bytes)?;
    let mut starts: Vec<usize> = decoded.iter().map(|(o, _)| *o).collect();
    starts.push(bytes.len());
    let mut nodes = Vec::with_capacity(decoded.len());
    for (i, (off, ins)) in decoded.iter().enumerate() {
        let target = match ins.op.branch_rel() {
            None => None,
            Some(rel) => {
                let next = *off as i64 + ins.len as i64;
                let t = next + rel as i64;
                if (0..=bytes.len() as i64).contains(&t) {
                    match starts.binary_search(&(t as usize)) {
                        Ok(idx) => Some(BranchTarget::Label(idx)),
                        Err(_) => return Err(LayoutError::UnresolvableBranch { node: i }),
                    }
                } else {
                    Some(BranchTarget::Absolute(base.wrapping_add(t as u32)))
                }
            }
        };
        nodes.push(Node { op: ins.op, target });
    }
    Ok(nodes)
}

fn with_rel(op: Op, rel: i32, short: bool) -> Op {
    match op {
        Op::Jmp { .. } => Op::Jmp { rel, short },
        Op::Call { .. } => Op::Call { rel },
        other => other,
    }
}

/// Assigns addresses, promoting short jumps whose displacement no longer
/// fits in rel8, and emits the final bytes. Never demotes a rel32 form.
pub fn reencode(nodes: &[Node], base: u32) -> Result<Vec<u8>, LayoutError> {
    for (i, n) in nodes.iter().enumerate() {
        match (n.op.branch_rel().is_some(), n.target) {
            (true, None) | (false, Some(_)) => return Err(LayoutError::UnresolvableBranch { node: i }),
            (_, Some(BranchTarget::Label(l))) if l > nodes.len() => {
                return Err(LayoutError::UnresolvableBranch { node: i })
            }
            _ => {}
        }
    }
    let mut short: Vec<bool> = nodes
        .iter()
        .map(|n| matches!(n.op, Op::Jmp { short: true, .. }))
        .collect();
    loop {
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut at = 0usize;
        for (i, n) in nodes.iter().enumerate() {
            offsets.push(at);
            at += with_rel(n.op, 0, short[i]).encoded_len();
        }
        offsets.push(at);
        let rel_of = |i: usize, len: usize| -> i64 {
            let next = offsets[i] as i64 + len as i64;
            match nodes[i].target.unwrap() {
                BranchTarget::Label(l) => offsets[l] as i64 - next,
                BranchTarget::Absolute(a) => {
                    (a.wrapping_sub(base.wrapping_add(next as u32))) as i32 as i64
                }
            }
        };
        let mut changed = false;
        for i in 0..nodes.len() {
            if short[i] {
                let rel = rel_of(i, 2);
                if i8::try_from(rel).is_err() {
                    short[i] = false;
                    changed = true;
                }
            }
        }
        if changed {
            continue;
        }
        let mut out = Vec::with_capacity(at);
        for (i, n) in nodes.iter().enumerate() {
            let op = if n.target.is_some() {
                let len = with_rel(n.op, 0, short[i]).encoded_len();
                with_rel(n.op, rel_of(i, len) as i32, short[i])
            } else {
                n.op
            };
            encode(&op, &mut out);
        }
        return Ok(out);
    }
}
