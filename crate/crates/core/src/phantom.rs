//! Phantom naming: extended program counters, the name map and its inverse,
//! and the randomizing selector.
//!
//! Every instruction at virtual address `va` has `N = 2^n` names, one per
//! phantom index `p`. The name of `va` in phantom `p` is `{p, va - p*delta}`;
//! the archetype of a name `{p, a}` is `a + p*delta`. The phantom index is kept
//! in its own field next to the 32-bit address rather than in the upper bits
//! of a wider address.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported phantom index width.
pub const MAX_INDEX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Width of the phantom index; `N = 2^n` phantoms.
    pub n: u8,
    /// Security shift in bytes between consecutive phantoms.
    pub delta: u32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { n: 8, delta: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PhantomError {
    #[error("phantom index {p} out of range for n={n}")]
    Index { p: u32, n: u8 },
    #[error("name of 0x{va:08x} in phantom {p} underflows the address space")]
    Underflow { va: u32, p: u8 },
    #[error("archetype of {{{p}, 0x{addr:08x}}} overflows the address space")]
    Overflow { addr: u32, p: u8 },
    #[error("invalid phantom config: {0}")]
    Config(&'static str),
}

impl PhantomConfig {
    pub fn new(n: u8, delta: u32) -> Result<Self, PhantomError> {
        let cfg = PhantomConfig { n, delta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.n > MAX_INDEX_BITS {
            return Err(PhantomError::Config("n must be at most 8"));
        }
        if self.delta == 0 || !self.delta.is_multiple_of(4) {
            return Err(PhantomError::Config("delta must be a positive multiple of 4"));
        }
        Ok(())
    }

    /// Number of phantoms, `2^n`.
    pub fn phantoms(&self) -> u32 {
        1 << self.n
    }

    /// Largest shift any phantom applies, `(2^n - 1) * delta`.
    pub fn max_shift(&self) -> u64 {
        (self.phantoms() as u64 - 1) * self.delta as u64
    }

    fn check_index(&self, p: u8) -> Result<(), PhantomError> {
        if (p as u32) < self.phantoms() {
            Ok(())
        } else {
            Err(PhantomError::Index { p: p as u32, n: self.n })
        }
    }
}

/// A program counter extended with its phantom index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ExtendedPc {
    pub p: u8,
    pub addr: u32,
}

impl ExtendedPc {
    pub const fn new(p: u8, addr: u32) -> Self {
        ExtendedPc { p, addr }
    }

    /// Raw `(p << 32) | addr` key, as a structure indexed by the unmapped name sees it.
    pub fn raw_key(&self) -> u64 {
        (self.p as u64) << 32 | self.addr as u64
    }
}

impl fmt::Display for ExtendedPc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}, 0x{:08x}}}", self.p, self.addr)
    }
}

/// Name of `va` in phantom `p`.
pub fn phantom_name(va: u32, p: u8, cfg: &PhantomConfig) -> Result<ExtendedPc, PhantomError> {
    cfg.check_index(p)?;
    let shift = p as u64 * cfg.delta as u64;
    let addr = (va as u64)
        .checked_sub(shift)
        .ok_or(PhantomError::Underflow { va, p })?;
    Ok(ExtendedPc::new(p, addr as u32))
}

/// The virtual address a name resolves to.
pub fn archetype(epc: ExtendedPc, cfg: &PhantomConfig) -> Result<u32, PhantomError> {
    let va = epc.addr as u64 + epc.p as u64 * cfg.delta as u64;
    u32::try_from(va).map_err(|_| PhantomError::Overflow { addr: epc.addr, p: epc.p })
}

/// Moves `target` into phantom `p_next` while keeping its archetype:
/// `{p_next, addr - (p_next - p_target) * delta}`.
pub fn selector_adjust(
    target: ExtendedPc,
    p_next: u8,
    cfg: &PhantomConfig,
) -> Result<ExtendedPc, PhantomError> {
    cfg.check_index(p_next)?;
    cfg.check_index(target.p)?;
    let adjusted =
        target.addr as i64 - (p_next as i64 - target.p as i64) * cfg.delta as i64;
    if adjusted < 0 {
        let va = archetype(target, cfg).unwrap_or(u32::MAX);
        return Err(PhantomError::Underflow { va, p: p_next });
    }
    u32::try_from(adjusted)
        .map(|addr| ExtendedPc::new(p_next, addr))
        .map_err(|_| PhantomError::Overflow { addr: target.addr, p: target.p })
}

/// Draws a fresh phantom index and re-names `target` into it.
pub fn selector_next(
    target: ExtendedPc,
    rng: &mut SelectorRng,
    cfg: &PhantomConfig,
) -> Result<ExtendedPc, PhantomError> {
    let p_next = rng.draw_index(cfg.n);
    selector_adjust(target, p_next, cfg)
}

/// Probability that a chain of `gadgets` domain guesses all hit, `N^-P`.
pub fn analytic_success_probability(phantoms: u32, gadgets: u32) -> f64 {
    assert!(phantoms >= 1, "at least one phantom");
    (phantoms as f64).powf(-(gadgets as f64))
}

/// splitmix64 generator. `draw_index(n)` returns the top `n` bits of the next output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectorRng {
    state: u64,
}

impl SelectorRng {
    pub fn new(seed: u64) -> Self {
        SelectorRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform index in `[0, 2^n)`. For `n = 0` this is always 0 and does not
    /// advance the generator.
    pub fn draw_index(&mut self, n: u8) -> u8 {
        if n == 0 {
            0
        } else {
            (self.next_u64() >> (64 - n as u32)) as u8
        }
    }

    /// Uniform value in `[0, bound)` by rejection.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n: u8, delta: u32) -> PhantomConfig {
        PhantomConfig::new(n, delta).unwrap()
    }

    #[test]
    fn name_examples() {
        // δ = 2 is only used to mirror the worked ITLB example; it bypasses validation.
        let d2 = PhantomConfig { n: 8, delta: 2 };
        assert_eq!(phantom_name(0x00BB_FFF8, 2, &d2).unwrap(), ExtendedPc::new(2, 0x00BB_FFF4));
        assert_eq!(archetype(ExtendedPc::new(2, 0x00BB_FFF4), &d2).unwrap(), 0x00BB_FFF8);
        assert_eq!(phantom_name(0x1234, 0, &cfg(8, 4)).unwrap(), ExtendedPc::new(0, 0x1234));
        assert_eq!(phantom_name(0x2000, 255, &cfg(8, 4)).unwrap(), ExtendedPc::new(255, 0x1C04));
        assert_eq!(archetype(ExtendedPc::new(8, 0x0FF4), &cfg(8, 4)).unwrap(), 0x1014);
    }

    #[test]
    fn range_errors() {
        assert!(matches!(phantom_name(8, 3, &cfg(8, 4)), Err(PhantomError::Underflow { .. })));
        assert!(matches!(phantom_name(0x2000, 4, &cfg(2, 4)), Err(PhantomError::Index { .. })));
        assert!(matches!(
            archetype(ExtendedPc::new(1, u32::MAX), &cfg(1, 4)),
            Err(PhantomError::Overflow { .. })
        ));
        assert!(PhantomConfig::new(9, 4).is_err());
        assert!(PhantomConfig::new(8, 6).is_err());
    }

    #[test]
    fn selector_worked_example() {
        let c = cfg(8, 4);
        let pc_new = 0x0001_0000;
        let target = ExtendedPc::new(5, pc_new);
        assert_eq!(selector_adjust(target, 8, &c).unwrap(), ExtendedPc::new(8, pc_new - 3 * 4));
        assert_eq!(selector_adjust(target, 2, &c).unwrap(), ExtendedPc::new(2, pc_new + 3 * 4));
        assert_eq!(selector_adjust(target, 5, &c).unwrap(), target);
    }

    #[test]
    fn degenerate_selector_is_identity() {
        let c = cfg(0, 4);
        let mut rng = SelectorRng::new(7);
        let t = ExtendedPc::new(0, 0x4000);
        for _ in 0..100 {
            assert_eq!(selector_next(t, &mut rng, &c).unwrap(), t);
        }
    }

    #[test]
    fn analytic_values() {
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(analytic_success_probability(256, 13), 4.93e-32) < 0.01);
        assert!(rel(analytic_success_probability(256, 6), 3.55e-15) < 0.01);
        assert!(rel(analytic_success_probability(256, 5), 9.09e-13) < 0.01);
        assert!(rel(analytic_success_probability(256, 1), 0.0039) < 0.01);
        assert_eq!(analytic_success_probability(17, 0), 1.0);
    }

    #[test]
    fn splitmix_golden() {
        // values from a standalone reference implementation
        let mut r = SelectorRng::new(0);
        assert_eq!(r.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(r.next_u64(), 0x6e78_9e6a_a1b9_65f4);
        let mut r = SelectorRng::new(42);
        assert_eq!(r.next_u64(), 0xbdd7_3226_2feb_6e95);
        let mut r = SelectorRng::new(42);
        assert_eq!(r.draw_index(8), 189);
    }

    #[test]
    fn selector_uniformity() {
        let mut rng = SelectorRng::new(2024);
        let mut counts = [0u64; 256];
        let draws = 1_000_000u64;
        for _ in 0..draws {
            counts[rng.draw_index(8) as usize] += 1;
        }
        let expected = draws as f64 / 256.0;
        let sigma = (draws as f64 * (1.0 / 256.0) * (255.0 / 256.0)).sqrt();
        let mut chi2 = 0.0;
        for &c in &counts {
            assert!((c as f64 - expected).abs() <= 5.0 * sigma);
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // χ²(255) critical value at α = 0.001
        assert!(chi2 < 330.52, "chi2 = {chi2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn selector_keeps_archetype(seed in any::<u64>(), va in 0x1000u32..0xF000_0000, p in any::<u8>()) {
            let c = cfg(8, 4);
            let t = phantom_name(va, p, &c).unwrap();
            let mut rng = SelectorRng::new(seed);
            let next = selector_next(t, &mut rng, &c).unwrap();
            prop_assert_eq!(archetype(next, &c).unwrap(), va);
        }
    }

    #[test]
    fn name_round_trip_million() {
        let c = cfg(8, 4);
        let mut rng = SelectorRng::new(99);
        let mut failures = 0;
        for _ in 0..1_000_000 {
            let p = rng.draw_index(8);
            let va = (c.max_shift() + rng.below(u32::MAX as u64 - c.max_shift())) as u32;
            let name = phantom_name(va, p, &c).unwrap();
            if archetype(name, &c).unwrap() != va {
                failures += 1;
            }
        }
        assert_eq!(failures, 0);
    }
}
