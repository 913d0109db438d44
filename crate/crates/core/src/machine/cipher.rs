//! Toy pointer cipher: a 4-round Feistel network on 16-bit halves, plus a
//! counter-mode keystream built from it.

use std::fmt;

use crate::phantom::SelectorRng;

const KEY_SALT: u64 = 0xC1F3_E5A7_0D15_EA5E;

/// Four 16-bit round keys. Debug output never shows them.
#[derive(Clone, PartialEq, Eq)]
pub struct PtrEncKey([u16; 4]);

impl fmt::Debug for PtrEncKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PtrEncKey(..)")
    }
}

impl PtrEncKey {
    pub fn from_round_keys(keys: [u16; 4]) -> Self {
        PtrEncKey(keys)
    }

    /// Draws the round keys from a stream separate from the selector's.
    pub fn from_seed(seed: u64) -> Self {
        let w = SelectorRng::new(seed ^ KEY_SALT).next_u64();
        PtrEncKey([w as u16, (w >> 16) as u16, (w >> 32) as u16, (w >> 48) as u16])
    }
}

fn round(h: u16, k: u16) -> u16 {
    (h ^ k).wrapping_mul(0x9E37).wrapping_add(h.rotate_left(3))
}

pub fn encrypt(v: u32, key: &PtrEncKey) -> u32 {
    let (mut l, mut r) = ((v >> 16) as u16, v as u16);
    for &k in &key.0 {
        (l, r) = (r, l ^ round(r, k));
    }
    (l as u32) << 16 | r as u32
}

pub fn decrypt(v: u32, key: &PtrEncKey) -> u32 {
    let (mut l, mut r) = ((v >> 16) as u16, v as u16);
    for &k in key.0.iter().rev() {
        (l, r) = (r ^ round(l, k), l);
    }
    (l as u32) << 16 | r as u32
}

/// XORs `words` with the keystream `E(nonce + i)`. Applying it twice restores the input.
pub fn ctr_apply(key: &PtrEncKey, nonce: u32, words: &mut [u32]) {
    for (i, w) in words.iter_mut().enumerate() {
        *w ^= encrypt(nonce.wrapping_add(i as u32), key);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_vectors() {
        // from a standalone implementation of the same rounds
        let zero = PtrEncKey::from_round_keys([0; 4]);
        assert_eq!(encrypt(0, &zero), 0x0000_0000);
        assert_eq!(encrypt(0x1234_5678, &PtrEncKey::from_round_keys([1, 2, 3, 4])), 0xe106_4a1d);
        let k = PtrEncKey::from_round_keys([0xa5a5, 0x5a5a, 0xffff, 0x0001]);
        assert_eq!(encrypt(0xdead_beef, &k), 0x2fbf_f71a);
    }

    #[test]
    fn inverse_on_many_values() {
        let mut rng = SelectorRng::new(7);
        let key = PtrEncKey::from_seed(99);
        for _ in 0..100_000 {
            let v = rng.next_u64() as u32;
            assert_eq!(decrypt(encrypt(v, &key), &key), v);
        }
    }

    #[test]
    fn avalanche() {
        let mut rng = SelectorRng::new(3);
        let key = PtrEncKey::from_seed(11);
        let samples = 10_000;
        let mut flipped = 0u64;
        for _ in 0..samples {
            let v = rng.next_u64() as u32;
            let bit = rng.below(32) as u32;
            flipped += (encrypt(v, &key) ^ encrypt(v ^ (1 << bit), &key)).count_ones() as u64;
        }
        let mean = flipped as f64 / samples as f64;
        assert!(mean >= 8.0, "mean flipped bits {mean}");
    }

    #[test]
    fn key_is_hidden_from_debug() {
        let key = PtrEncKey::from_round_keys([0x1234, 0, 0, 0]);
        assert!(!format!("{key:?}").contains("1234"));
        assert!(!format!("{key:?}").contains("4660"));
    }

    #[test]
    fn keys_differ_by_seed() {
        assert_ne!(PtrEncKey::from_seed(1), PtrEncKey::from_seed(2));
    }

    proptest! {
        #[test]
        fn ctr_round_trips(words in proptest::collection::vec(any::<u32>(), 0..64), nonce: u32, seed: u64) {
            let key = PtrEncKey::from_seed(seed);
            let mut w = words.clone();
            ctr_apply(&key, nonce, &mut w);
            ctr_apply(&key, nonce, &mut w);
            prop_assert_eq!(w, words);
        }

        #[test]
        fn decrypt_inverts(v: u32, keys: [u16; 4]) {
            let key = PtrEncKey::from_round_keys(keys);
            prop_assert_eq!(decrypt(encrypt(v, &key), &key), v);
        }
    }
}
