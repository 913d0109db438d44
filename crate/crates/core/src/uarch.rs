//! PC-indexed front-end structures: BTB, direction buffer, RAS, I-cache and ITLB.
//!
//! Each structure can be keyed either by the archetype address of a fetch
//! (remap on) or by the raw extended PC `(p << 32) | addr` (remap off, the
//! naive duplicated-code mode where every phantom occupies its own entries).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::phantom::ExtendedPc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemapToggles {
    pub btb: bool,
    pub itlb: bool,
    pub icache: bool,
}

impl Default for RemapToggles {
    fn default() -> Self {
        RemapToggles { btb: true, itlb: true, icache: true }
    }
}

impl RemapToggles {
    pub fn all(on: bool) -> Self {
        RemapToggles { btb: on, itlb: on, icache: on }
    }
}

/// Geometry and penalties. Sizes must be powers of two where used as moduli.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UarchConfig {
    pub btb_entries: usize,
    pub bdb_entries: usize,
    pub ras_entries: usize,
    pub icache_sets: usize,
    pub icache_ways: usize,
    pub icache_line_bytes: u64,
    pub itlb_entries: usize,
    pub page_bytes: u64,
    pub mispredict_penalty: u64,
    pub icache_miss_penalty: u64,
    pub itlb_miss_penalty: u64,
    /// Extra cycles per selector adjustment at a taken transfer.
    pub fetch_extra_cycles: u64,
    /// Extra cycles per remapped I-cache access.
    pub icache_extra_cycles: u64,
}

impl Default for UarchConfig {
    fn default() -> Self {
        UarchConfig {
            btb_entries: 64,
            bdb_entries: 1024,
            ras_entries: 8,
            icache_sets: 16,
            icache_ways: 2,
            icache_line_bytes: 16,
            itlb_entries: 8,
            page_bytes: 4096,
            mispredict_penalty: 8,
            icache_miss_penalty: 15,
            itlb_miss_penalty: 20,
            fetch_extra_cycles: 0,
            icache_extra_cycles: 0,
        }
    }
}

impl UarchConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        let sizes = [self.btb_entries, self.bdb_entries, self.ras_entries, self.icache_sets, self.icache_ways, self.itlb_entries];
        if sizes.contains(&0) {
            return Err("structure sizes must be non-zero");
        }
        if self.icache_line_bytes == 0 || self.page_bytes == 0 {
            return Err("line and page sizes must be non-zero");
        }
        Ok(())
    }
}

fn key(pc: ExtendedPc, va: u32, remap: bool) -> u64 {
    if remap {
        va as u64
    } else {
        pc.raw_key()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BtbEntry {
    tag: u64,
    target: ExtendedPc,
    valid: bool,
}

/// Result of a BTB probe: `s` is the hit signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BtbLookup {
    pub s: bool,
    pub predicted: ExtendedPc,
}

/// Direct-mapped branch target buffer holding already-randomized targets.
#[derive(Debug, Clone)]
pub struct Btb {
    table: Vec<BtbEntry>,
    pub hits: u64,
    pub misses: u64,
}

impl Btb {
    pub fn new(entries: usize) -> Self {
        Btb { table: vec![BtbEntry::default(); entries], hits: 0, misses: 0 }
    }

    pub fn index(&self, key: u64) -> usize {
        ((key >> 2) % self.table.len() as u64) as usize
    }

    pub fn lookup(&mut self, key: u64) -> BtbLookup {
        let e = self.table[self.index(key)];
        if e.valid && e.tag == key {
            self.hits += 1;
            BtbLookup { s: true, predicted: e.target }
        } else {
            self.misses += 1;
            BtbLookup { s: false, predicted: ExtendedPc::default() }
        }
    }

    pub fn update(&mut self, key: u64, target: ExtendedPc) {
        let idx = self.index(key);
        self.table[idx] = BtbEntry { tag: key, target, valid: true };
    }
}

/// Two-bit saturating direction counters, always indexed by archetype.
#[derive(Debug, Clone)]
pub struct Bdb {
    counters: Vec<u8>,
}

impl Bdb {
    pub fn new(entries: usize) -> Self {
        // weakly not-taken
        Bdb { counters: vec![1; entries] }
    }

    fn index(&self, va: u32) -> usize {
        ((va >> 2) as usize) % self.counters.len()
    }

    pub fn predict(&self, va: u32) -> bool {
        self.counters[self.index(va)] >= 2
    }

    pub fn update(&mut self, va: u32, taken: bool) {
        let i = self.index(va);
        let c = &mut self.counters[i];
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
    }

    pub fn counter(&self, va: u32) -> u8 {
        self.counters[self.index(va)]
    }
}

/// Circular return-address predictor. Overflow overwrites the oldest entry.
#[derive(Debug, Clone)]
pub struct Ras {
    slots: Vec<ExtendedPc>,
    top: usize,
    len: usize,
}

impl Ras {
    pub fn new(entries: usize) -> Self {
        Ras { slots: vec![ExtendedPc::default(); entries], top: 0, len: 0 }
    }

    pub fn push(&mut self, ret: ExtendedPc) {
        self.top = (self.top + 1) % self.slots.len();
        self.slots[self.top] = ret;
        self.len = (self.len + 1).min(self.slots.len());
    }

    pub fn pop(&mut self) -> Option<ExtendedPc> {
        if self.len == 0 {
            return None;
        }
        let v = self.slots[self.top];
        self.top = (self.top + self.slots.len() - 1) % self.slots.len();
        self.len -= 1;
        Some(v)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Line {
    tag: u64,
    valid: bool,
    last_used: u64,
}

/// Set-associative LRU instruction cache.
#[derive(Debug, Clone)]
pub struct ICache {
    sets: Vec<Vec<Line>>,
    line_bytes: u64,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl ICache {
    pub fn new(sets: usize, ways: usize, line_bytes: u64) -> Self {
        ICache { sets: vec![vec![Line::default(); ways]; sets], line_bytes, clock: 0, hits: 0, misses: 0 }
    }

    pub fn set_index(&self, key: u64) -> usize {
        ((key / self.line_bytes) % self.sets.len() as u64) as usize
    }

    pub fn access(&mut self, key: u64) -> bool {
        self.clock += 1;
        let set_idx = self.set_index(key);
        let tag = key / (self.line_bytes * self.sets.len() as u64);
        let clock = self.clock;
        let set = &mut self.sets[set_idx];
        if let Some(line) = set.iter_mut().find(|l| l.valid && l.tag == tag) {
            line.last_used = clock;
            self.hits += 1;
            return true;
        }
        let victim = set
            .iter()
            .enumerate()
            .min_by_key(|(_, l)| if l.valid { l.last_used } else { 0 })
            .map(|(i, _)| i)
            .unwrap_or(0);
        set[victim] = Line { tag, valid: true, last_used: clock };
        self.misses += 1;
        false
    }
}

/// Fully associative LRU ITLB over identity-mapped pages.
#[derive(Debug, Clone)]
pub struct Itlb {
    pages: Vec<Line>,
    page_bytes: u64,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl Itlb {
    pub fn new(entries: usize, page_bytes: u64) -> Self {
        Itlb { pages: vec![Line::default(); entries], page_bytes, clock: 0, hits: 0, misses: 0 }
    }

    pub fn page(&self, key: u64) -> u64 {
        key / self.page_bytes
    }

    pub fn access(&mut self, key: u64) -> bool {
        self.clock += 1;
        let page = self.page(key);
        let clock = self.clock;
        if let Some(e) = self.pages.iter_mut().find(|e| e.valid && e.tag == page) {
            e.last_used = clock;
            self.hits += 1;
            return true;
        }
        let victim = self
            .pages
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| if e.valid { e.last_used } else { 0 })
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.pages[victim] = Line { tag: page, valid: true, last_used: clock };
        self.misses += 1;
        false
    }
}

/// Hit flag and extra cycles of one cache or TLB access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub hit: bool,
    pub cycles: u64,
}

/// Multisets of indices touched per structure, recorded when tracing is on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Touched {
    pub btb: BTreeMap<u64, u64>,
    pub icache: BTreeMap<u64, u64>,
    pub itlb: BTreeMap<u64, u64>,
    /// Distinct BTB keys installed.
    pub btb_keys: BTreeSet<u64>,
}

/// All front-end structures of one machine.
#[derive(Debug, Clone)]
pub struct Uarch {
    pub cfg: UarchConfig,
    pub toggles: RemapToggles,
    pub btb: Btb,
    pub bdb: Bdb,
    pub ras: Ras,
    pub icache: ICache,
    pub itlb: Itlb,
    pub bdb_mispredicts: u64,
    pub ras_mispredicts: u64,
    pub branch_mispredicts: u64,
    touched: Option<Touched>,
}

impl Uarch {
    pub fn new(cfg: UarchConfig, toggles: RemapToggles) -> Self {
        Uarch {
            cfg,
            toggles,
            btb: Btb::new(cfg.btb_entries),
            bdb: Bdb::new(cfg.bdb_entries),
            ras: Ras::new(cfg.ras_entries),
            icache: ICache::new(cfg.icache_sets, cfg.icache_ways, cfg.icache_line_bytes),
            itlb: Itlb::new(cfg.itlb_entries, cfg.page_bytes),
            bdb_mispredicts: 0,
            ras_mispredicts: 0,
            branch_mispredicts: 0,
            touched: None,
        }
    }

    pub fn enable_tracing(&mut self) {
        self.touched.get_or_insert_with(Touched::default);
    }

    pub fn touched(&self) -> Option<&Touched> {
        self.touched.as_ref()
    }

    pub fn btb_access(&mut self, pc: ExtendedPc, va: u32) -> BtbLookup {
        let k = key(pc, va, self.toggles.btb);
        if let Some(t) = &mut self.touched {
            *t.btb.entry(self.btb.index(k) as u64).or_default() += 1;
        }
        self.btb.lookup(k)
    }

    pub fn btb_update(&mut self, branch_pc: ExtendedPc, va: u32, target: ExtendedPc) {
        let k = key(branch_pc, va, self.toggles.btb);
        if let Some(t) = &mut self.touched {
            t.btb_keys.insert(k);
        }
        self.btb.update(k, target);
    }

    pub fn icache_access(&mut self, pc: ExtendedPc, va: u32) -> Access {
        let k = key(pc, va, self.toggles.icache);
        if let Some(t) = &mut self.touched {
            *t.icache.entry(self.icache.set_index(k) as u64).or_default() += 1;
        }
        let hit = self.icache.access(k);
        let mut cycles = if hit { 0 } else { self.cfg.icache_miss_penalty };
        if self.toggles.icache && pc.p != 0 {
            cycles += self.cfg.icache_extra_cycles;
        }
        Access { hit, cycles }
    }

    pub fn itlb_access(&mut self, pc: ExtendedPc, va: u32) -> Access {
        let k = key(pc, va, self.toggles.itlb);
        if let Some(t) = &mut self.touched {
            *t.itlb.entry(self.itlb.page(k)).or_default() += 1;
        }
        let hit = self.itlb.access(k);
        Access { hit, cycles: if hit { 0 } else { self.cfg.itlb_miss_penalty } }
    }

    /// Penalty for a transfer whose predicted next PC was `predicted`.
    pub fn charge_branch(&mut self, predicted: Option<ExtendedPc>, resolved: ExtendedPc) -> u64 {
        if predicted == Some(resolved) {
            0
        } else {
            self.branch_mispredicts += 1;
            self.cfg.mispredict_penalty
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{phantom_name, PhantomConfig};

    #[test]
    fn remapped_phantoms_share_a_btb_entry() {
        let cfg = PhantomConfig::default();
        let mut u = Uarch::new(UarchConfig::default(), RemapToggles::default());
        let va = 0x2000;
        let a = phantom_name(va, 3, &cfg).unwrap();
        let b = phantom_name(va, 7, &cfg).unwrap();
        assert!(!u.btb_access(a, va).s);
        u.btb_update(a, va, ExtendedPc::new(1, 0x3000));
        let hit = u.btb_access(b, va);
        assert!(hit.s);
        assert_eq!(hit.predicted, ExtendedPc::new(1, 0x3000));
    }

    #[test]
    fn unmapped_btb_separates_domains() {
        let cfg = PhantomConfig { n: 2, delta: 4 };
        let mut u = Uarch::new(UarchConfig::default(), RemapToggles::all(false));
        u.enable_tracing();
        let va = 0x2000;
        for p in 0..4 {
            let pc = phantom_name(va, p, &cfg).unwrap();
            u.btb_update(pc, va, ExtendedPc::new(0, 0x3000));
        }
        assert_eq!(u.touched().unwrap().btb_keys.len(), 4);
    }

    #[test]
    fn itlb_worked_example() {
        let d2 = PhantomConfig { n: 8, delta: 2 };
        let mut u = Uarch::new(UarchConfig::default(), RemapToggles::default());
        let a = ExtendedPc::new(2, 0x00BB_FFF4);
        let b = ExtendedPc::new(0, 0x00BB_FFF8);
        let va = crate::phantom::archetype(a, &d2).unwrap();
        assert_eq!(va, crate::phantom::archetype(b, &d2).unwrap());
        assert!(!u.itlb_access(a, va).hit);
        assert!(u.itlb_access(b, va).hit);
        assert_eq!(u.itlb.misses, 1);
    }

    #[test]
    fn cold_btb_misses() {
        let mut u = Uarch::new(UarchConfig::default(), RemapToggles::default());
        assert!(!u.btb_access(ExtendedPc::new(0, 0x1000), 0x1000).s);
    }

    #[test]
    fn alternating_branch_always_mispredicts() {
        // hand-simulated: counter starts at 1 and oscillates 1 -> 2 -> 1
        let mut bdb = Bdb::new(1024);
        let va = 0x1010;
        let mut mispredicts = Vec::new();
        for i in 0..8 {
            let taken = i % 2 == 0;
            mispredicts.push(bdb.predict(va) != taken);
            bdb.update(va, taken);
        }
        assert_eq!(mispredicts, vec![true; 8]);
        // a steady taken branch trains after two executions
        let mut bdb = Bdb::new(1024);
        let seq: Vec<bool> = (0..4).map(|_| { let p = bdb.predict(va); bdb.update(va, true); p }).collect();
        assert_eq!(seq, vec![false, true, true, true]);
    }

    #[test]
    fn icache_lru_evicts_oldest() {
        let mut c = ICache::new(1, 2, 16);
        assert!(!c.access(0));
        assert!(!c.access(16));
        assert!(c.access(0));
        assert!(!c.access(32)); // evicts 16
        assert!(c.access(0));
        assert!(!c.access(16));
    }

    #[test]
    fn ras_is_circular() {
        let mut r = Ras::new(2);
        for i in 0..3 {
            r.push(ExtendedPc::new(0, i));
        }
        assert_eq!(r.pop(), Some(ExtendedPc::new(0, 2)));
        assert_eq!(r.pop(), Some(ExtendedPc::new(0, 1)));
        assert_eq!(r.pop(), None);
    }
}
