//! Frames, two-level pkey-tagged page tables, the ASID-tagged TLB and the
//! protection-key access check.
//!
//! Page tables live in simulated physical frames using the x86-64 PTE bit
//! layout (present, R/W, U/S, frame number, pkey in bits 59..=62, NX in bit
//! 63), so a write that reaches a page-table frame really changes the
//! mapping. Virtual addresses are 30 bits wide: a 9-bit directory index, a
//! 9-bit leaf index and a 12-bit page offset.
//!
//! Directory slots 0..4 are shared by every address space (core kernel data,
//! code, monitor data, page-table pool). Slots 4..8 are private to each
//! address space and are swapped in and out of the root on a switch.

use crate::trace::Trace;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;
pub const PAGE_SHIFT: u32 = 12;
pub const DIR_SHIFT: u32 = 21;
pub const ENTRIES_PER_TABLE: usize = 512;
pub const VADDR_BITS: u32 = 30;

pub const DIR_CORE: usize = 0;
pub const DIR_CODE: usize = 1;
pub const DIR_MONITOR: usize = 2;
pub const DIR_PT: usize = 3;
pub const SHARED_DIRS: Range<usize> = 0..4;
pub const PRIVATE_DIRS: Range<usize> = 4..8;
pub const N_PRIVATE_DIRS: usize = 4;

/// Capacity of the monitor's page-table pool; one leaf table maps all of it.
pub const PT_POOL_FRAMES: usize = ENTRIES_PER_TABLE;

pub const TLB_CAPACITY: usize = 64;

pub const fn dir_base(dir: usize) -> u32 {
    (dir as u32) << DIR_SHIFT
}

pub const PT_BASE: u32 = dir_base(DIR_PT);

pub fn dir_index(vaddr: u32) -> usize {
    ((vaddr >> DIR_SHIFT) & 0x1FF) as usize
}

pub fn leaf_index(vaddr: u32) -> usize {
    ((vaddr >> PAGE_SHIFT) & 0x1FF) as usize
}

pub fn page_of(vaddr: u32) -> u32 {
    vaddr >> PAGE_SHIFT
}

pub fn page_base(vpn: u32) -> u32 {
    vpn << PAGE_SHIFT
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Asid(pub u16);

impl fmt::Display for Asid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "asid{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CompartmentId(pub u16);

impl CompartmentId {
    pub const CORE: CompartmentId = CompartmentId(0);
    pub const MONITOR: CompartmentId = CompartmentId(1);
}

impl fmt::Display for CompartmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CompartmentId::CORE => write!(f, "core"),
            CompartmentId::MONITOR => write!(f, "monitor"),
            CompartmentId(n) => write!(f, "c{}", n),
        }
    }
}

/// Who performed an operation. Page-table and PKRS mutations require
/// [`Actor::Monitor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Actor {
    Monitor,
    Compartment(CompartmentId),
    /// Hardware-initiated events (TLB fills, interrupt delivery).
    Hardware,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Monitor => write!(f, "monitor"),
            Actor::Compartment(c) => write!(f, "{}", c),
            Actor::Hardware => write!(f, "hw"),
        }
    }
}

/// A 4-bit protection key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pkey(u8);

impl Pkey {
    pub const CORE: Pkey = Pkey(0);
    pub const CODE: Pkey = Pkey(1);
    pub const MONITOR: Pkey = Pkey(2);
    pub const FIRST_MODULE: u8 = 3;
    /// Module pkeys available per address space.
    pub const MODULE_SLOTS: usize = 13;

    pub fn new(v: u8) -> Option<Pkey> {
        (v < 16).then_some(Pkey(v))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_module(self) -> bool {
        self.0 >= Self::FIRST_MODULE
    }
}

impl fmt::Display for Pkey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pkey{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Execute => "execute",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error)]
pub enum DenyReason {
    #[error("unmapped")]
    Unmapped,
    #[error("access-disabled {0}")]
    AccessDisabled(Pkey),
    #[error("write-disabled {0}")]
    WriteDisabled(Pkey),
    #[error("read-only page")]
    ReadOnly,
    #[error("no-execute page")]
    NoExecute,
    #[error("user page")]
    UserPage,
}

impl DenyReason {
    /// Stable short label used in traces and metrics.
    pub fn label(&self) -> &'static str {
        match self {
            DenyReason::Unmapped => "unmapped",
            DenyReason::AccessDisabled(_) => "pkey-ad",
            DenyReason::WriteDisabled(_) => "pkey-wd",
            DenyReason::ReadOnly => "read-only",
            DenyReason::NoExecute => "nx",
            DenyReason::UserPage => "user-page",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Allow,
    Deny(DenyReason),
}

/// Rights register: one (WD, AD) notation per pkey. AD of pkey k is bit
/// 2k, WD is bit 2k+1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PkrsValue(pub u32);

impl PkrsValue {
    /// Every pkey access-disabled.
    pub const ALL_DISABLED: PkrsValue = PkrsValue(0x5555_5555);

    pub fn notation(self, k: Pkey) -> (bool, bool) {
        let ad = self.0 >> (2 * k.0) & 1 == 1;
        let wd = self.0 >> (2 * k.0 + 1) & 1 == 1;
        (wd, ad)
    }

    pub fn with(self, k: Pkey, wd: bool, ad: bool) -> PkrsValue {
        let mut v = self.0 & !(0b11 << (2 * k.0));
        v |= (ad as u32) << (2 * k.0);
        v |= (wd as u32) << (2 * k.0 + 1);
        PkrsValue(v)
    }

    /// Pkeys whose notation is (0, 0).
    pub fn full_access_keys(self) -> Vec<Pkey> {
        (0..16)
            .map(Pkey)
            .filter(|k| self.notation(*k) == (false, false))
            .collect()
    }
}

impl fmt::Display for PkrsValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PageDescriptor {
    pub frame: FrameId,
    pub writable: bool,
    pub no_execute: bool,
    pub supervisor: bool,
    pub pkey: Pkey,
}

const PTE_PRESENT: u64 = 1;
const PTE_WRITABLE: u64 = 1 << 1;
const PTE_USER: u64 = 1 << 2;
const PTE_FRAME_MASK: u64 = 0x000F_FFFF_FFFF_F000;
const PTE_PKEY_SHIFT: u32 = 59;
const PTE_NX: u64 = 1 << 63;

impl PageDescriptor {
    pub fn data(frame: FrameId, pkey: Pkey) -> PageDescriptor {
        PageDescriptor {
            frame,
            writable: true,
            no_execute: true,
            supervisor: true,
            pkey,
        }
    }

    pub fn code(frame: FrameId) -> PageDescriptor {
        PageDescriptor {
            frame,
            writable: false,
            no_execute: false,
            supervisor: true,
            pkey: Pkey::CODE,
        }
    }

    pub fn to_pte(self) -> u64 {
        let mut e = PTE_PRESENT | ((self.frame.0 as u64) << PAGE_SHIFT) & PTE_FRAME_MASK;
        if self.writable {
            e |= PTE_WRITABLE;
        }
        if !self.supervisor {
            e |= PTE_USER;
        }
        if self.no_execute {
            e |= PTE_NX;
        }
        e | ((self.pkey.0 as u64) << PTE_PKEY_SHIFT)
    }

    pub fn from_pte(e: u64) -> Option<PageDescriptor> {
        if e & PTE_PRESENT == 0 {
            return None;
        }
        Some(PageDescriptor {
            frame: FrameId(((e & PTE_FRAME_MASK) >> PAGE_SHIFT) as u32),
            writable: e & PTE_WRITABLE != 0,
            no_execute: e & PTE_NX != 0,
            supervisor: e & PTE_USER == 0,
            pkey: Pkey(((e >> PTE_PKEY_SHIFT) & 0xF) as u8),
        })
    }
}

/// Protection-key access check for supervisor pages. Instruction fetch
/// ignores the pkey notation entirely and is governed by NX alone.
pub fn check_access(pkrs: PkrsValue, desc: &PageDescriptor, kind: AccessKind) -> Access {
    if !desc.supervisor {
        return Access::Deny(DenyReason::UserPage);
    }
    let (wd, ad) = pkrs.notation(desc.pkey);
    match kind {
        AccessKind::Execute if desc.no_execute => Access::Deny(DenyReason::NoExecute),
        AccessKind::Execute => Access::Allow,
        _ if ad => Access::Deny(DenyReason::AccessDisabled(desc.pkey)),
        AccessKind::Read => Access::Allow,
        AccessKind::Write if wd => Access::Deny(DenyReason::WriteDisabled(desc.pkey)),
        AccessKind::Write if !desc.writable => Access::Deny(DenyReason::ReadOnly),
        AccessKind::Write => Access::Allow,
    }
}

#[derive(Debug, Clone, Default)]
pub struct PhysMemory {
    frames: Vec<Box<[u8; PAGE_SIZE]>>,
}

impl PhysMemory {
    pub fn alloc(&mut self) -> FrameId {
        self.frames.push(Box::new([0u8; PAGE_SIZE]));
        FrameId(self.frames.len() as u32 - 1)
    }

    pub fn frame(&self, f: FrameId) -> &[u8; PAGE_SIZE] {
        &self.frames[f.0 as usize]
    }

    pub fn frame_mut(&mut self, f: FrameId) -> &mut [u8; PAGE_SIZE] {
        &mut self.frames[f.0 as usize]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn entry(&self, table: FrameId, idx: usize) -> u64 {
        let b = &self.frame(table)[idx * 8..idx * 8 + 8];
        u64::from_le_bytes(b.try_into().unwrap())
    }

    fn set_entry(&mut self, table: FrameId, idx: usize, v: u64) {
        self.frame_mut(table)[idx * 8..idx * 8 + 8].copy_from_slice(&v.to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy)]
struct TlbEntry {
    asid: Asid,
    vpn: u32,
    desc: PageDescriptor,
}

/// Direct-mapped TLB tagged with ASIDs.
#[derive(Debug, Clone)]
pub struct Tlb {
    slots: Vec<Option<TlbEntry>>,
    pub hits: u64,
    pub misses: u64,
    pub flushes: u64,
}

impl Default for Tlb {
    fn default() -> Self {
        Tlb::new(TLB_CAPACITY)
    }
}

impl Tlb {
    pub fn new(capacity: usize) -> Tlb {
        Tlb {
            slots: vec![None; capacity],
            hits: 0,
            misses: 0,
            flushes: 0,
        }
    }

    fn slot(&self, asid: Asid, vpn: u32) -> usize {
        let h = vpn.wrapping_mul(0x9E37_79B9) ^ (asid.0 as u32).wrapping_mul(0x85EB_CA6B);
        (h >> 16) as usize % self.slots.len()
    }

    pub fn lookup(&mut self, asid: Asid, vpn: u32) -> Option<PageDescriptor> {
        let s = self.slot(asid, vpn);
        match self.slots[s] {
            Some(e) if e.asid == asid && e.vpn == vpn => {
                self.hits += 1;
                Some(e.desc)
            }
            _ => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn fill(&mut self, asid: Asid, vpn: u32, desc: PageDescriptor) {
        let s = self.slot(asid, vpn);
        self.slots[s] = Some(TlbEntry { asid, vpn, desc });
    }

    pub fn invalidate(&mut self, asid: Asid, vpn: u32) {
        let s = self.slot(asid, vpn);
        if matches!(self.slots[s], Some(e) if e.asid == asid && e.vpn == vpn) {
            self.slots[s] = None;
        }
    }

    pub fn flush_all(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
        self.flushes += 1;
    }

    /// Every cached entry, for hygiene checks.
    pub fn cached(&self) -> impl Iterator<Item = (Asid, u32, PageDescriptor)> + '_ {
        self.slots.iter().flatten().map(|e| (e.asid, e.vpn, e.desc))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressSpace {
    pub asid: Asid,
    pub pgdir: FrameId,
    /// Leaf tables of the private directory slots, kept while swapped out.
    pub private_leaves: [Option<FrameId>; N_PRIVATE_DIRS],
    pub residents: Vec<CompartmentId>,
}

impl AddressSpace {
    pub fn cr3(&self) -> u64 {
        cr3_value(self.pgdir, self.asid)
    }
}

pub fn cr3_value(pgdir: FrameId, asid: Asid) -> u64 {
    ((pgdir.0 as u64) << PAGE_SHIFT) | (asid.0 as u64 & 0xFFF)
}

pub fn cr3_parts(cr3: u64) -> (FrameId, Asid) {
    (FrameId((cr3 >> PAGE_SHIFT) as u32), Asid((cr3 & 0xFFF) as u16))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MmuError {
    #[error("actor {0} is not the monitor")]
    NotMonitor(Actor),
    #[error("address {0:#x} is not mapped")]
    UnmappedAddress(u32),
    #[error("unknown address space {0}")]
    UnknownAddressSpace(Asid),
    #[error("page-table pool exhausted")]
    PtPoolExhausted,
    #[error("private pool exhausted")]
    PoolExhausted,
    #[error("address space {0} already exists")]
    DuplicateAddressSpace(Asid),
}

/// A reserved, page-aligned range of virtual pages handed out to one pkey.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivatePool {
    pub asid: Asid,
    pub pkey: Pkey,
    pub base_vpn: u32,
    pub capacity: u32,
    pub used: u32,
}

impl PrivatePool {
    pub fn new(asid: Asid, pkey: Pkey, base_vpn: u32, capacity: u32) -> PrivatePool {
        PrivatePool {
            asid,
            pkey,
            base_vpn,
            capacity,
            used: 0,
        }
    }

    pub fn remaining(&self) -> u32 {
        self.capacity - self.used
    }
}

#[derive(Debug, Clone)]
pub struct Mmu {
    pub phys: PhysMemory,
    pub tlb: Tlb,
    pub trace: Trace,
    spaces: BTreeMap<Asid, AddressSpace>,
    active: Option<Asid>,
    pt_pool: Vec<FrameId>,
    pt_used: usize,
    shared_leaves: [Option<FrameId>; 4],
    raw_root: Option<(FrameId, Asid)>,
    /// Number of root-entry writes performed by address-space switches.
    pub dir_writes: u64,
}

impl Default for Mmu {
    fn default() -> Self {
        Mmu::new()
    }
}

fn require_monitor(actor: Actor) -> Result<(), MmuError> {
    if actor == Actor::Monitor {
        Ok(())
    } else {
        Err(MmuError::NotMonitor(actor))
    }
}

impl Mmu {
    /// Reserves the page-table pool and maps it (tagged with the monitor's
    /// pkey) at [`PT_BASE`].
    pub fn new() -> Mmu {
        Mmu::with_pt_pkey(Pkey::MONITOR)
    }

    /// Like [`Mmu::new`] but tags the page-table pool with `pt_pkey`.
    pub fn with_pt_pkey(pt_pkey: Pkey) -> Mmu {
        let mut phys = PhysMemory::default();
        let pt_pool: Vec<FrameId> = (0..PT_POOL_FRAMES).map(|_| phys.alloc()).collect();
        let pt_leaf = pt_pool[0];
        for (i, f) in pt_pool.iter().enumerate() {
            phys.set_entry(pt_leaf, i, PageDescriptor::data(*f, pt_pkey).to_pte());
        }
        let mut shared_leaves = [None; 4];
        shared_leaves[DIR_PT] = Some(pt_leaf);
        Mmu {
            phys,
            tlb: Tlb::default(),
            trace: Trace::default(),
            spaces: BTreeMap::new(),
            active: None,
            pt_pool,
            pt_used: 1,
            shared_leaves,
            raw_root: None,
            dir_writes: 0,
        }
    }

    fn alloc_table(&mut self) -> Result<FrameId, MmuError> {
        let f = *self.pt_pool.get(self.pt_used).ok_or(MmuError::PtPoolExhausted)?;
        self.pt_used += 1;
        Ok(f)
    }

    /// Virtual address at which a page-table frame is visible.
    pub fn pt_vaddr(&self, frame: FrameId) -> Option<u32> {
        let i = self.pt_pool.iter().position(|f| *f == frame)?;
        Some(PT_BASE + (i as u32) * PAGE_SIZE as u32)
    }

    /// Virtual addresses of page-table frames currently in use.
    pub fn pt_pages_in_use(&self) -> Range<u32> {
        PT_BASE..PT_BASE + (self.pt_used as u32) * PAGE_SIZE as u32
    }

    pub fn is_pt_frame(&self, frame: FrameId) -> bool {
        self.pt_pool[..self.pt_used].contains(&frame)
    }

    pub fn create_space(&mut self, asid: Asid, actor: Actor) -> Result<&AddressSpace, MmuError> {
        require_monitor(actor)?;
        if self.spaces.contains_key(&asid) {
            return Err(MmuError::DuplicateAddressSpace(asid));
        }
        let root = self.alloc_table()?;
        for dir in SHARED_DIRS {
            if let Some(leaf) = self.shared_leaves[dir] {
                self.phys.set_entry(root, dir, dir_entry(leaf));
            }
        }
        self.spaces.insert(
            asid,
            AddressSpace {
                asid,
                pgdir: root,
                private_leaves: [None; N_PRIVATE_DIRS],
                residents: Vec::new(),
            },
        );
        if self.active.is_none() {
            self.active = Some(asid);
        }
        self.trace.record("create-as", actor, format!("{} pgdir={}", asid, root.0), "ok");
        Ok(&self.spaces[&asid])
    }

    pub fn space(&self, asid: Asid) -> Option<&AddressSpace> {
        self.spaces.get(&asid)
    }

    pub fn space_mut(&mut self, asid: Asid) -> Option<&mut AddressSpace> {
        self.spaces.get_mut(&asid)
    }

    pub fn spaces(&self) -> impl Iterator<Item = &AddressSpace> {
        self.spaces.values()
    }

    /// ASID tagging TLB lookups: that of a raw CR3 load if one is in
    /// effect, else that of the active space.
    pub fn active_asid(&self) -> Asid {
        match self.raw_root {
            Some((_, a)) => a,
            None => self.active.expect("no address space created"),
        }
    }

    /// Root installed by a CR3 write that bypassed the monitor, if any.
    pub fn raw_root(&self) -> Option<(FrameId, Asid)> {
        self.raw_root
    }

    /// Hardware effect of an unmediated `mov cr3`: later walks start at the
    /// given frame, whatever it holds.
    pub fn load_raw_cr3(&mut self, cr3: u64, actor: Actor) {
        let (f, a) = cr3_parts(cr3);
        self.raw_root = Some((f, a));
        self.trace.record("cr3-load", actor, format!("pgdir={} {}", f.0, a), "raw");
    }

    pub fn active_space(&self) -> &AddressSpace {
        &self.spaces[&self.active.expect("no address space created")]
    }

    /// Leaf table that holds `vaddr` in `asid`, allocating it if `create`.
    fn leaf_for(&mut self, asid: Asid, vaddr: u32, create: bool) -> Result<Option<FrameId>, MmuError> {
        if vaddr >> VADDR_BITS != 0 {
            return Ok(None);
        }
        let dir = dir_index(vaddr);
        if SHARED_DIRS.contains(&dir) {
            if self.shared_leaves[dir].is_none() && create {
                let leaf = self.alloc_table()?;
                self.shared_leaves[dir] = Some(leaf);
                let roots: Vec<FrameId> = self.spaces.values().map(|s| s.pgdir).collect();
                for r in roots {
                    self.phys.set_entry(r, dir, dir_entry(leaf));
                }
            }
            return Ok(self.shared_leaves[dir]);
        }
        if !PRIVATE_DIRS.contains(&dir) {
            return Ok(None);
        }
        let slot = dir - PRIVATE_DIRS.start;
        let space = self.spaces.get(&asid).ok_or(MmuError::UnknownAddressSpace(asid))?;
        if let Some(l) = space.private_leaves[slot] {
            return Ok(Some(l));
        }
        if !create {
            return Ok(None);
        }
        let leaf = self.alloc_table()?;
        let space = self.spaces.get_mut(&asid).unwrap();
        space.private_leaves[slot] = Some(leaf);
        let root = space.pgdir;
        if self.active == Some(asid) {
            self.phys.set_entry(root, dir, dir_entry(leaf));
        }
        Ok(Some(leaf))
    }

    /// Installs a leaf mapping. Monitor only.
    pub fn map(&mut self, asid: Asid, vaddr: u32, desc: PageDescriptor, actor: Actor) -> Result<(), MmuError> {
        if let Err(e) = require_monitor(actor) {
            self.trace.record("map", actor, format!("{:#x}", vaddr), "not-monitor");
            return Err(e);
        }
        let leaf = self
            .leaf_for(asid, vaddr, true)?
            .ok_or(MmuError::UnmappedAddress(vaddr))?;
        self.phys.set_entry(leaf, leaf_index(vaddr), desc.to_pte());
        self.invalidate(asid, vaddr);
        self.trace.record(
            "map",
            actor,
            format!("{} {:#x} frame={} {}", asid, vaddr, desc.frame.0, desc.pkey),
            "ok",
        );
        Ok(())
    }

    fn invalidate(&mut self, asid: Asid, vaddr: u32) {
        let vpn = page_of(vaddr);
        if SHARED_DIRS.contains(&dir_index(vaddr)) {
            let all: Vec<Asid> = self.spaces.keys().copied().collect();
            for a in all {
                self.tlb.invalidate(a, vpn);
            }
        } else {
            self.tlb.invalidate(asid, vpn);
        }
    }

    /// Table walk through the active root, as the hardware would do it.
    pub fn walk(&self, vaddr: u32) -> Option<PageDescriptor> {
        if vaddr >> VADDR_BITS != 0 {
            return None;
        }
        let root = self.raw_root.map_or_else(|| self.active_space().pgdir, |(f, _)| f);
        if root.0 as usize >= self.phys.frame_count() {
            return None;
        }
        let de = self.phys.entry(root, dir_index(vaddr));
        if de & PTE_PRESENT == 0 {
            return None;
        }
        let leaf = FrameId(((de & PTE_FRAME_MASK) >> PAGE_SHIFT) as u32);
        if leaf.0 as usize >= self.phys.frame_count() {
            return None;
        }
        PageDescriptor::from_pte(self.phys.entry(leaf, leaf_index(vaddr)))
    }

    /// Descriptor for `vaddr` in a specific space, ignoring which one is active.
    pub fn lookup_in(&self, asid: Asid, vaddr: u32) -> Option<PageDescriptor> {
        if vaddr >> VADDR_BITS != 0 {
            return None;
        }
        let dir = dir_index(vaddr);
        let leaf = if SHARED_DIRS.contains(&dir) {
            self.shared_leaves[dir]?
        } else if PRIVATE_DIRS.contains(&dir) {
            self.spaces.get(&asid)?.private_leaves[dir - PRIVATE_DIRS.start]?
        } else {
            return None;
        };
        PageDescriptor::from_pte(self.phys.entry(leaf, leaf_index(vaddr)))
    }

    /// Translates through the TLB of the active ASID, walking on a miss.
    pub fn translate(&mut self, vaddr: u32) -> Result<(PageDescriptor, bool), MmuError> {
        let asid = self.active_asid();
        let vpn = page_of(vaddr);
        if let Some(d) = self.tlb.lookup(asid, vpn) {
            self.trace.record("translate", Actor::Hardware, format!("{} {:#x}", asid, vaddr), "hit");
            return Ok((d, true));
        }
        match self.walk(vaddr) {
            Some(d) => {
                self.tlb.fill(asid, vpn, d);
                self.trace.record("translate", Actor::Hardware, format!("{} {:#x}", asid, vaddr), "miss");
                Ok((d, false))
            }
            None => {
                self.trace
                    .record("translate", Actor::Hardware, format!("{} {:#x}", asid, vaddr), "unmapped");
                Err(MmuError::UnmappedAddress(vaddr))
            }
        }
    }

    /// Translate plus protection-key check. Returns the backing frame.
    pub fn access(&mut self, pkrs: PkrsValue, vaddr: u32, kind: AccessKind, actor: Actor) -> Result<FrameId, DenyReason> {
        let verdict = match self.translate(vaddr) {
            Err(_) => Err(DenyReason::Unmapped),
            Ok((d, _)) => match check_access(pkrs, &d, kind) {
                Access::Allow => Ok(d.frame),
                Access::Deny(r) => Err(r),
            },
        };
        let v = match &verdict {
            Ok(_) => "allow".to_string(),
            Err(r) => format!("deny:{}", r.label()),
        };
        self.trace.record("access", actor, format!("{} {:#x} pkrs={}", kind, vaddr, pkrs), v);
        verdict
    }

    /// Retags one page. Frame and contents are untouched; the TLB entry for
    /// the page is invalidated (in every ASID for shared directories).
    pub fn set_pkey(&mut self, asid: Asid, vaddr: u32, pkey: Pkey, actor: Actor) -> Result<(), MmuError> {
        if let Err(e) = require_monitor(actor) {
            self.trace
                .record("retag", actor, format!("{} {:#x} -> {}", asid, vaddr, pkey), "not-monitor");
            return Err(e);
        }
        let leaf = self
            .leaf_for(asid, vaddr, false)?
            .ok_or(MmuError::UnmappedAddress(vaddr))?;
        let idx = leaf_index(vaddr);
        let mut d = PageDescriptor::from_pte(self.phys.entry(leaf, idx)).ok_or(MmuError::UnmappedAddress(vaddr))?;
        let old = d.pkey;
        d.pkey = pkey;
        self.phys.set_entry(leaf, idx, d.to_pte());
        self.invalidate(asid, vaddr);
        self.trace.record(
            "retag",
            actor,
            format!("{} {:#x} {} -> {} frame={}", asid, vaddr, old, pkey, d.frame.0),
            "ok",
        );
        Ok(())
    }

    /// Swaps the private directory slots of the active space for those of
    /// `target` and makes it active. Performs no TLB flush; CR3 is loaded by
    /// the caller. Returns the number of root-entry writes.
    pub fn switch_address_space(&mut self, target: Asid, actor: Actor) -> Result<usize, MmuError> {
        require_monitor(actor)?;
        let tgt = self.spaces.get(&target).ok_or(MmuError::UnknownAddressSpace(target))?.clone();
        let src = self.active_space().clone();
        let mut writes = 0;
        if src.asid != target {
            for (slot, dir) in PRIVATE_DIRS.enumerate() {
                self.phys.set_entry(src.pgdir, dir, 0);
                let e = tgt.private_leaves[slot].map_or(0, dir_entry);
                self.phys.set_entry(tgt.pgdir, dir, e);
                writes += 2;
            }
            self.active = Some(target);
        }
        self.raw_root = None;
        self.dir_writes += writes as u64;
        self.trace.record(
            "as-switch",
            actor,
            format!("{} -> {} dir-writes={}", src.asid, target, writes),
            "ok",
        );
        Ok(writes)
    }

    /// Root directory entries of a space, for structural comparisons.
    pub fn root_entries(&self, asid: Asid) -> Option<Vec<u64>> {
        let s = self.spaces.get(&asid)?;
        Some((0..ENTRIES_PER_TABLE).map(|i| self.phys.entry(s.pgdir, i)).collect())
    }

    /// Maps `n_pages` fresh frames from `pool`, tagged with the pool's pkey.
    pub fn alloc_private(&mut self, pool: &mut PrivatePool, n_pages: u32, actor: Actor) -> Result<Range<u32>, MmuError> {
        require_monitor(actor)?;
        if n_pages > pool.remaining() {
            self.trace.record(
                "alloc-private",
                actor,
                format!("{} {} pages", pool.pkey, n_pages),
                "pool-exhausted",
            );
            return Err(MmuError::PoolExhausted);
        }
        let start = page_base(pool.base_vpn + pool.used);
        for i in 0..n_pages {
            let f = self.phys.alloc();
            self.map(pool.asid, start + i * PAGE_SIZE as u32, PageDescriptor::data(f, pool.pkey), actor)?;
        }
        pool.used += n_pages;
        Ok(start..start + n_pages * PAGE_SIZE as u32)
    }

    /// Copies bytes out of physical memory behind a mapped virtual range of
    /// the given space, without any permission check.
    pub fn phys_read(&self, asid: Asid, vaddr: u32, buf: &mut [u8]) -> Result<(), MmuError> {
        for (i, b) in buf.iter_mut().enumerate() {
            let va = vaddr.wrapping_add(i as u32);
            let d = self.lookup_in(asid, va).ok_or(MmuError::UnmappedAddress(va))?;
            *b = self.phys.frame(d.frame)[(va as usize) & (PAGE_SIZE - 1)];
        }
        Ok(())
    }

    pub fn phys_write(&mut self, asid: Asid, vaddr: u32, data: &[u8]) -> Result<(), MmuError> {
        for (i, b) in data.iter().enumerate() {
            let va = vaddr.wrapping_add(i as u32);
            let d = self.lookup_in(asid, va).ok_or(MmuError::UnmappedAddress(va))?;
            self.phys.frame_mut(d.frame)[(va as usize) & (PAGE_SIZE - 1)] = *b;
        }
        Ok(())
    }
}

pub fn dir_entry(leaf: FrameId) -> u64 {
    PTE_PRESENT | PTE_WRITABLE | ((leaf.0 as u64) << PAGE_SHIFT)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mmu_with_spaces(n: u16) -> Mmu {
        let mut m = Mmu::new();
        for a in 0..n {
            m.create_space(Asid(a), Actor::Monitor).unwrap();
        }
        m
    }

    #[test]
    fn pte_round_trip() {
        for pk in 0..16 {
            let d = PageDescriptor {
                frame: FrameId(0x1234),
                writable: pk % 2 == 0,
                no_execute: pk % 3 == 0,
                supervisor: true,
                pkey: Pkey::new(pk).unwrap(),
            };
            assert_eq!(PageDescriptor::from_pte(d.to_pte()), Some(d));
            assert_eq!((d.to_pte() >> 59) & 0xF, pk as u64);
        }
    }

    #[test]
    fn own_compartment_write_allowed() {
        let d = PageDescriptor::data(FrameId(9), Pkey::new(3).unwrap());
        let pkrs = PkrsValue::ALL_DISABLED.with(Pkey::new(3).unwrap(), false, false);
        assert_eq!(check_access(pkrs, &d, AccessKind::Write), Access::Allow);
    }

    #[test]
    fn xom_code_is_unreadable_but_executable() {
        let d = PageDescriptor::code(FrameId(1));
        let pkrs = PkrsValue(0).with(Pkey::CODE, false, true);
        assert_eq!(
            check_access(pkrs, &d, AccessKind::Read),
            Access::Deny(DenyReason::AccessDisabled(Pkey::CODE))
        );
        assert_eq!(check_access(pkrs, &d, AccessKind::Execute), Access::Allow);
    }

    #[test]
    fn second_translate_hits() {
        let mut m = mmu_with_spaces(1);
        let f = m.phys.alloc();
        m.map(Asid(0), 0x1000, PageDescriptor::data(f, Pkey::CORE), Actor::Monitor).unwrap();
        assert!(!m.translate(0x1000).unwrap().1);
        assert!(m.translate(0x1000).unwrap().1);
    }

    #[test]
    fn asid_switch_misses_and_never_flushes() {
        let mut m = mmu_with_spaces(2);
        let f = m.phys.alloc();
        m.map(Asid(0), 0x1000, PageDescriptor::data(f, Pkey::CORE), Actor::Monitor).unwrap();
        m.translate(0x1000).unwrap();
        m.switch_address_space(Asid(1), Actor::Monitor).unwrap();
        let (d, hit) = m.translate(0x1000).unwrap();
        assert!(!hit);
        assert_eq!(d.frame, f);
        assert_eq!(m.tlb.flushes, 0);
    }

    #[test]
    fn shared_subtree_translates_to_same_frame() {
        let mut m = mmu_with_spaces(2);
        let f = m.phys.alloc();
        let va = dir_base(DIR_CORE) + 0x5000;
        m.map(Asid(0), va, PageDescriptor::data(f, Pkey::CORE), Actor::Monitor).unwrap();
        let a = m.translate(va).unwrap().0.frame;
        m.switch_address_space(Asid(1), Actor::Monitor).unwrap();
        let b = m.translate(va).unwrap().0.frame;
        assert_eq!(a, b);
        let r0 = m.root_entries(Asid(0)).unwrap();
        let r1 = m.root_entries(Asid(1)).unwrap();
        assert_eq!(r0[DIR_CORE], r1[DIR_CORE]);
    }

    #[test]
    fn private_page_invisible_from_other_space() {
        let mut m = mmu_with_spaces(2);
        let f = m.phys.alloc();
        let va = dir_base(PRIVATE_DIRS.start) + 0x3000;
        m.map(Asid(0), va, PageDescriptor::data(f, Pkey::new(3).unwrap()), Actor::Monitor).unwrap();
        assert!(m.translate(va).is_ok());
        m.switch_address_space(Asid(1), Actor::Monitor).unwrap();
        assert_eq!(m.translate(va), Err(MmuError::UnmappedAddress(va)));
    }

    #[test]
    fn switch_is_an_involution_on_roots() {
        let mut m = mmu_with_spaces(2);
        for a in 0..2u16 {
            let f = m.phys.alloc();
            m.map(Asid(a), dir_base(5) + 0x2000, PageDescriptor::data(f, Pkey::new(4).unwrap()), Actor::Monitor)
                .unwrap();
        }
        let before: Vec<_> = (0..2).map(|a| m.root_entries(Asid(a)).unwrap()).collect();
        let w1 = m.switch_address_space(Asid(1), Actor::Monitor).unwrap();
        let w2 = m.switch_address_space(Asid(0), Actor::Monitor).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(w1, 2 * N_PRIVATE_DIRS);
        let after: Vec<_> = (0..2).map(|a| m.root_entries(Asid(a)).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn unknown_space_is_rejected() {
        let mut m = mmu_with_spaces(1);
        assert_eq!(
            m.switch_address_space(Asid(9), Actor::Monitor),
            Err(MmuError::UnknownAddressSpace(Asid(9)))
        );
    }

    #[test]
    fn retag_keeps_frame_and_bytes() {
        let mut m = mmu_with_spaces(1);
        let f = m.phys.alloc();
        m.phys.frame_mut(f)[17] = 0xAB;
        let va = dir_base(4) + 0x1000;
        let k3 = Pkey::new(3).unwrap();
        let k4 = Pkey::new(4).unwrap();
        m.map(Asid(0), va, PageDescriptor::data(f, k3), Actor::Monitor).unwrap();
        let before = *m.phys.frame(f);
        m.set_pkey(Asid(0), va, k4, Actor::Monitor).unwrap();
        let d = m.walk(va).unwrap();
        assert_eq!(d.frame, f);
        assert_eq!(d.pkey, k4);
        assert_eq!(*m.phys.frame(f), before);
    }

    #[test]
    fn compartment_cannot_retag() {
        let mut m = mmu_with_spaces(1);
        let f = m.phys.alloc();
        m.map(Asid(0), 0x1000, PageDescriptor::data(f, Pkey::CORE), Actor::Monitor).unwrap();
        let who = Actor::Compartment(CompartmentId(5));
        assert_eq!(
            m.set_pkey(Asid(0), 0x1000, Pkey::new(3).unwrap(), who),
            Err(MmuError::NotMonitor(who))
        );
    }

    #[test]
    fn retag_is_not_served_stale_from_tlb() {
        let mut m = mmu_with_spaces(1);
        let f = m.phys.alloc();
        let va = dir_base(4) + 0x1000;
        m.map(Asid(0), va, PageDescriptor::data(f, Pkey::new(3).unwrap()), Actor::Monitor).unwrap();
        m.translate(va).unwrap();
        assert!(m.translate(va).unwrap().1);
        m.set_pkey(Asid(0), va, Pkey::new(4).unwrap(), Actor::Monitor).unwrap();
        let (d, hit) = m.translate(va).unwrap();
        assert!(!hit);
        assert_eq!(d.pkey.value(), 4);
        let (d, hit) = m.translate(va).unwrap();
        assert!(hit);
        assert_eq!(d.pkey.value(), 4);
    }

    #[test]
    fn private_pools_are_page_aligned_and_disjoint() {
        let mut m = mmu_with_spaces(1);
        let k3 = Pkey::new(3).unwrap();
        let k4 = Pkey::new(4).unwrap();
        let base = page_of(dir_base(4));
        let mut p3 = PrivatePool::new(Asid(0), k3, base, 4);
        let mut p4 = PrivatePool::new(Asid(0), k4, base + 4, 4);
        let r3 = m.alloc_private(&mut p3, 1, Actor::Monitor).unwrap();
        assert_eq!(r3.start % PAGE_SIZE as u32, 0);
        assert_eq!(m.walk(r3.start).unwrap().pkey, k3);
        let r4 = m.alloc_private(&mut p4, 2, Actor::Monitor).unwrap();
        let f3: Vec<_> = r3.clone().step_by(PAGE_SIZE).map(|v| m.walk(v).unwrap().frame).collect();
        let f4: Vec<_> = r4.clone().step_by(PAGE_SIZE).map(|v| m.walk(v).unwrap().frame).collect();
        assert!(f3.iter().all(|f| !f4.contains(f)));
    }

    #[test]
    fn pool_exhausts_on_fifth_request() {
        let mut m = mmu_with_spaces(1);
        let mut p = PrivatePool::new(Asid(0), Pkey::new(3).unwrap(), page_of(dir_base(4)), 4);
        for _ in 0..4 {
            m.alloc_private(&mut p, 1, Actor::Monitor).unwrap();
        }
        assert_eq!(m.alloc_private(&mut p, 1, Actor::Monitor), Err(MmuError::PoolExhausted));
    }

    #[test]
    fn page_tables_are_monitor_tagged() {
        let mut m = mmu_with_spaces(2);
        let f = m.phys.alloc();
        m.map(Asid(0), dir_base(4), PageDescriptor::data(f, Pkey::new(3).unwrap()), Actor::Monitor).unwrap();
        for va in m.pt_pages_in_use().step_by(PAGE_SIZE) {
            let d = m.walk(va).unwrap();
            assert_eq!(d.pkey, Pkey::MONITOR);
            assert!(m.is_pt_frame(d.frame));
        }
    }
}
