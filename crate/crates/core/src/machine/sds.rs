//! Secret Domain Stack: a bounded hardware stack of phantom indices that
//! spills whole frames, encrypted, to a store the adversary cannot read.

use super::cipher::{ctr_apply, PtrEncKey};

pub const DEFAULT_CAPACITY: usize = 256;

const SPILL_NONCE_BASE: u32 = 0x8000_0000;

#[derive(Debug, Clone)]
struct SpillFrame {
    nonce: u32,
    words: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SecretDomainStack {
    entries: Vec<u8>,
    capacity: usize,
    spill_store: Vec<SpillFrame>,
    frames_written: u32,
    pub spills: u64,
    pub fills: u64,
}

impl SecretDomainStack {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "SDS capacity must be positive");
        SecretDomainStack {
            entries: Vec::with_capacity(capacity),
            capacity,
            spill_store: Vec::new(),
            frames_written: 0,
            spills: 0,
            fills: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries resident in the hardware array.
    pub fn top(&self) -> usize {
        self.entries.len()
    }

    pub fn spilled_frames(&self) -> usize {
        self.spill_store.len()
    }

    /// Resident entries plus all spilled ones.
    pub fn depth(&self) -> usize {
        self.entries.len() + self.spill_store.len() * self.capacity
    }

    pub fn push(&mut self, p: u8, key: &PtrEncKey) {
        if self.entries.len() == self.capacity {
            self.spill(key);
        }
        self.entries.push(p);
    }

    /// `None` when the logical stack is empty.
    pub fn pop(&mut self, key: &PtrEncKey) -> Option<u8> {
        if self.entries.is_empty() {
            self.fill(key)?;
        }
        self.entries.pop()
    }

    /// Pops until the logical depth equals `depth`.
    pub fn truncate(&mut self, depth: usize, key: &PtrEncKey) {
        while self.depth() > depth {
            if self.entries.is_empty() {
                // whole frames can be dropped without decrypting
                if self.depth() - self.capacity >= depth {
                    self.spill_store.pop();
                    continue;
                }
                self.fill(key);
            }
            let keep = self.entries.len() - (self.depth() - depth).min(self.entries.len());
            self.entries.truncate(keep);
        }
    }

    fn spill(&mut self, key: &PtrEncKey) {
        let mut words: Vec<u32> = self
            .entries
            .chunks(4)
            .map(|c| c.iter().enumerate().fold(0u32, |w, (i, &p)| w | (p as u32) << (8 * i)))
            .collect();
        let nonce = SPILL_NONCE_BASE | self.frames_written.wrapping_mul(0x100) & 0x7FFF_FFFF;
        ctr_apply(key, nonce, &mut words);
        self.spill_store.push(SpillFrame { nonce, words });
        self.frames_written = self.frames_written.wrapping_add(1);
        self.entries.clear();
        self.spills += 1;
    }

    fn fill(&mut self, key: &PtrEncKey) -> Option<()> {
        let mut frame = self.spill_store.pop()?;
        ctr_apply(key, frame.nonce, &mut frame.words);
        self.entries.clear();
        self.entries.extend(
            frame
                .words
                .iter()
                .flat_map(|w| w.to_le_bytes())
                .take(self.capacity),
        );
        self.fills += 1;
        Some(())
    }

    #[cfg(test)]
    fn raw_spill_words(&self) -> Vec<u32> {
        self.spill_store.iter().flat_map(|f| f.words.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key() -> PtrEncKey {
        PtrEncKey::from_seed(5)
    }

    #[test]
    fn push_pop() {
        let mut s = SecretDomainStack::new(DEFAULT_CAPACITY);
        s.push(200, &key());
        assert_eq!(s.pop(&key()), Some(200));
        assert_eq!(s.pop(&key()), None);
    }

    #[test]
    fn overflow_spills_one_frame() {
        let k = key();
        let mut s = SecretDomainStack::new(256);
        for i in 0..257u32 {
            s.push(i as u8, &k);
        }
        assert_eq!(s.spilled_frames(), 1);
        assert_eq!(s.top(), 1);
        assert_eq!(s.depth(), 257);
        assert_eq!(s.spills, 1);
        for i in (0..257u32).rev() {
            assert_eq!(s.pop(&k), Some(i as u8));
        }
        assert_eq!(s.fills, 1);
        assert_eq!(s.pop(&k), None);
    }

    #[test]
    fn spilled_frames_are_not_plaintext() {
        let k = key();
        let mut s = SecretDomainStack::new(8);
        for _ in 0..9 {
            s.push(0, &k);
        }
        assert!(s.raw_spill_words().iter().any(|&w| w != 0));
    }

    #[test]
    fn truncate_across_frames() {
        let k = key();
        let mut s = SecretDomainStack::new(4);
        for i in 0..11u8 {
            s.push(i, &k);
        }
        s.truncate(6, &k);
        assert_eq!(s.depth(), 6);
        assert_eq!(s.pop(&k), Some(5));
        s.truncate(2, &k);
        assert_eq!(s.pop(&k), Some(1));
        s.truncate(100, &k);
        assert_eq!(s.depth(), 1);
    }

    proptest! {
        #[test]
        fn behaves_like_a_plain_stack(ops in proptest::collection::vec(proptest::option::of(any::<u8>()), 0..600), cap in 1usize..20) {
            let k = key();
            let mut s = SecretDomainStack::new(cap);
            let mut model = Vec::new();
            for op in ops {
                match op {
                    Some(p) => { s.push(p, &k); model.push(p); }
                    None => prop_assert_eq!(s.pop(&k), model.pop()),
                }
                prop_assert_eq!(s.depth(), model.len());
                prop_assert!(s.top() <= cap);
            }
        }
    }
}
