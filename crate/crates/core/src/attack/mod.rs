//! Code-reuse adversary: arbitrary read of mapped memory, writes to writable
//! memory only, payload builders, single trials and Monte Carlo campaigns.

pub mod stats;
pub mod victims;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{assemble, ProgramImage};
use crate::isa::{decode, Instruction};
use crate::machine::{ConfigError, ExceptionKind, MachineConfig, MachineState, Status, Termination};
use crate::phantom::{analytic_success_probability, SelectorRng};

pub use victims::{catalog, MatrixCell, Victim, VictimCatalog};

pub const SENTINEL: u32 = 0x1337_C0DE;

const GUESS_SALT: u64 = 0x6A09_E667_F3BC_C908;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    RopChain,
    Ret2libc,
    FptrHijack,
    JitropChain,
}

/// How the adversary picks the domain guess for each gadget.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessMode {
    /// Fresh uniform guesses per trial.
    #[default]
    Uniform,
    /// The same guesses every trial.
    Fixed(Vec<u32>),
    /// Oracle mode: each gadget lands exactly `k` instructions-worth of
    /// shift away from its target (`k = 0` always lands correctly).
    ForcedOffset(i32),
    /// Guesses recovered from the stored return words, given the return
    /// addresses an unrandomized run of the same binary leaves there.
    Disclosed,
}

/// Where the payload is written.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    /// Consecutive words from the stack pointer at the trigger.
    #[default]
    Stack,
    /// The word at a data symbol.
    Symbol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Gadget symbols or `0x` addresses; for `jitrop_chain`, instruction
    /// patterns (`;`-separated) the adversary searches for in code.
    pub gadgets: Vec<String>,
    #[serde(default)]
    pub guesses: GuessMode,
    /// Symbol of the instruction before which the corruption happens.
    pub trigger: String,
    #[serde(default)]
    pub slot: Slot,
}

impl AttackSpec {
    /// Number of domain guesses the payload depends on.
    pub fn chain_length(&self) -> u32 {
        match self.kind {
            AttackKind::FptrHijack => 0,
            _ => self.gadgets.len() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("gadget encoding {gadget:#010x} - {guess}*delta leaves the address space")]
    Underflow { gadget: u32, guess: i64 },
    #[error("unknown symbol '{0}'")]
    UnknownSymbol(String),
    #[error("gadget {0:#010x} is not in executable memory")]
    NotCode(u32),
    #[error("{0} needs at least one gadget")]
    Empty(&'static str),
    #[error("fixed guesses: expected {expected}, got {got}")]
    GuessCount { expected: usize, got: usize },
    #[error("pattern '{0}' does not assemble")]
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("trigger '{0}' was never reached")]
    TriggerNotReached(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no code matches gadget pattern '{0}'")]
    GadgetNotFound(String),
    #[error("payload write to {0:#010x} rejected")]
    Write(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("write to {addr:#010x} rejected: not writable")]
pub struct WriteFault {
    pub addr: u32,
}

/// The attacker's only view of a running victim: memory disclosure over
/// everything mapped, writes to writable memory, and the stack pointer.
/// It has no handle on the SDS, the domain, the key or the selector.
pub struct Adversary<'m> {
    machine: &'m mut MachineState,
}

impl<'m> Adversary<'m> {
    pub fn new(machine: &'m mut MachineState) -> Self {
        Adversary { machine }
    }

    pub fn read(&self, addr: u32, len: u32) -> Option<Vec<u8>> {
        (0..len).map(|i| self.machine.memory().load_byte(addr.checked_add(i)?)).collect()
    }

    pub fn read_word(&self, addr: u32) -> Option<u32> {
        Some(u32::from_le_bytes(self.read(addr, 4)?.try_into().ok()?))
    }

    pub fn write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), WriteFault> {
        // check the whole range first so a rejected write changes nothing
        for i in 0..bytes.len() as u32 {
            let a = addr.checked_add(i).ok_or(WriteFault { addr })?;
            let b = self.machine.memory().load_byte(a).ok_or(WriteFault { addr: a })?;
            self.machine.memory_mut().store_byte(a, b).ok_or(WriteFault { addr: a })?;
        }
        for (i, &b) in bytes.iter().enumerate() {
            self.machine.memory_mut().store_byte(addr + i as u32, b);
        }
        Ok(())
    }

    pub fn write_word(&mut self, addr: u32, value: u32) -> Result<(), WriteFault> {
        self.write(addr, &value.to_le_bytes())
    }

    pub fn stack_pointer(&self) -> u32 {
        self.machine.regs()[crate::isa::SP as usize]
    }

    /// Mapped `(base, length)` ranges, code and data alike.
    pub fn mapped(&self) -> Vec<(u32, u64)> {
        self.machine.memory().mapped_ranges()
    }

    /// Decodable instructions found by reading all mapped memory.
    pub fn disassemble_all(&self) -> Vec<(u32, Instruction)> {
        let mut out = Vec::new();
        for (base, len) in self.mapped() {
            for off in (0..len).step_by(4) {
                let va = base + off as u32;
                if let Some(i) = self.read_word(va).and_then(|w| decode(w).ok()) {
                    out.push((va, i));
                }
            }
        }
        out
    }
}

/// Payload words `g_i - q_i * delta`, the encoding that lands on `g_i` when
/// the popped domain equals `q_i`.
pub fn build_rop_payload(gadgets: &[u32], guesses: &[i64], delta: u32) -> Result<Vec<u32>, SpecError> {
    gadgets
        .iter()
        .zip(guesses)
        .map(|(&g, &q)| {
            let w = g as i64 - q * delta as i64;
            u32::try_from(w).map_err(|_| SpecError::Underflow { gadget: g, guess: q })
        })
        .collect()
}

fn resolve(image: &ProgramImage, name: &str) -> Result<u32, SpecError> {
    let va = match name.strip_prefix("0x") {
        Some(hex) => u32::from_str_radix(hex, 16).map_err(|_| SpecError::UnknownSymbol(name.into()))?,
        None => image.symbol(name).ok_or_else(|| SpecError::UnknownSymbol(name.into()))?,
    };
    Ok(va)
}

/// Resolves symbolic gadgets to code addresses.
pub fn resolve_gadgets(spec: &AttackSpec, image: &ProgramImage) -> Result<Vec<u32>, SpecError> {
    if spec.gadgets.is_empty() {
        return Err(SpecError::Empty("attack"));
    }
    if spec.kind == AttackKind::JitropChain {
        return Ok(Vec::new());
    }
    spec.gadgets
        .iter()
        .map(|g| {
            let va = resolve(image, g)?;
            image.code_word(va).map(|_| va).ok_or(SpecError::NotCode(va))
        })
        .collect()
}

fn pattern_instructions(pattern: &str) -> Result<Vec<Instruction>, SpecError> {
    let src = pattern.replace(';', "\n");
    let img = assemble(&src).map_err(|_| SpecError::Pattern(pattern.into()))?;
    img.rx_sections()
        .flat_map(|s| s.words.iter())
        .map(|&w| decode(w).map_err(|_| SpecError::Pattern(pattern.into())))
        .collect()
}

/// JIT-ROP discovery: locates each pattern by reading and decoding code.
pub fn jitrop_scan(adv: &Adversary<'_>, patterns: &[String]) -> Result<Vec<u32>, HarnessError> {
    let code = adv.disassemble_all();
    let by_va: std::collections::HashMap<u32, Instruction> = code.iter().copied().collect();
    patterns
        .iter()
        .map(|p| {
            let want = pattern_instructions(p)?;
            code.iter()
                .map(|&(va, _)| va)
                .find(|&va| {
                    want.iter()
                        .enumerate()
                        .all(|(i, w)| by_va.get(&(va + 4 * i as u32)).is_some_and(|got| got == w))
                })
                .ok_or_else(|| HarnessError::GadgetNotFound(p.clone()))
        })
        .collect()
}

/// Return addresses of the frames live at `trigger`, as the adversary
/// derives them from the binary: a run without phantom naming.
fn plain_return_words(victim: &Victim, trigger: u32, count: usize, cfg: &MachineConfig, max_cycles: u64) -> Vec<Option<u32>> {
    let mut plain = *cfg;
    plain.features.pns = false;
    let Ok(mut m) = MachineState::from_program(victim.program.clone(), 0, plain) else {
        return vec![None; count];
    };
    if !m.run_until(trigger, max_cycles) {
        return vec![None; count];
    }
    let adv = Adversary::new(&mut m);
    let sp = adv.stack_pointer();
    (0..count).map(|i| adv.read_word(sp + 4 * i as u32)).collect()
}

/// Domain recovered from a stored return word and the address it stands for.
fn disclosed_guess(word: u32, ret: u32, delta: u32) -> i64 {
    let d = ret.wrapping_sub(word);
    if delta == 0 || !d.is_multiple_of(delta) {
        0
    } else {
        (d / delta) as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Trap,
    DecodeFault,
    FetchFault,
    OtherCrash,
    NoEffect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialResult {
    pub outcome: Outcome,
    /// The trap hit was the very first instruction after the hijacked transfer.
    pub trap_on_first_landing: bool,
}

/// Seed of the adversary's own guess stream for a trial.
fn guess_rng(seed: u64) -> SelectorRng {
    SelectorRng::new(seed ^ GUESS_SALT)
}

/// Runs `victim` to the trigger, lets the adversary corrupt memory and
/// resumes until the win condition, a stop, or the cycle budget.
pub fn run_trial(
    victim: &Victim,
    spec: &AttackSpec,
    seed: u64,
    cfg: &MachineConfig,
    max_cycles: u64,
) -> Result<TrialResult, HarnessError> {
    let image = &victim.image;
    let trigger = resolve(image, &spec.trigger)?;
    let mut gadgets = resolve_gadgets(spec, image)?;
    let mut m = MachineState::from_program(victim.program.clone(), seed, *cfg)?;
    if !m.run_until(trigger, max_cycles) {
        return Err(HarnessError::TriggerNotReached(spec.trigger.clone()));
    }
    let p_count = gadgets.len().max(spec.gadgets.len());
    let phantoms = if cfg.features.pns { cfg.phantom.phantoms() } else { 1 };
    let delta = cfg.phantom.delta;

    let guesses: Vec<i64> = match &spec.guesses {
        GuessMode::Uniform => {
            let mut rng = guess_rng(seed);
            (0..p_count).map(|_| rng.below(phantoms as u64) as i64).collect()
        }
        GuessMode::Fixed(q) => {
            if q.len() != p_count {
                return Err(SpecError::GuessCount { expected: p_count, got: q.len() }.into());
            }
            q.iter().map(|&x| x as i64).collect()
        }
        GuessMode::ForcedOffset(k) => (0..p_count)
            .map(|i| m.sds_peek(i).map_or(0, |p| if cfg.features.pns { p as i64 } else { 0 }) - *k as i64)
            .collect(),
        GuessMode::Disclosed => {
            let rets = plain_return_words(victim, trigger, p_count, cfg, max_cycles);
            let adv = Adversary::new(&mut m);
            let sp = adv.stack_pointer();
            rets.iter()
                .enumerate()
                .map(|(i, r)| match (adv.read_word(sp + 4 * i as u32), r) {
                    (Some(w), Some(r)) => disclosed_guess(w, *r, delta),
                    _ => 0,
                })
                .collect()
        }
    };

    let mut adv = Adversary::new(&mut m);
    if spec.kind == AttackKind::JitropChain {
        gadgets = jitrop_scan(&adv, &spec.gadgets)?;
    }
    let slot = match &spec.slot {
        Slot::Stack => adv.stack_pointer(),
        Slot::Symbol(s) => resolve(image, s)?,
    };
    let words = match spec.kind {
        AttackKind::FptrHijack => vec![gadgets[0]],
        _ => build_rop_payload(&gadgets, &guesses, delta)?,
    };
    for (i, &w) in words.iter().enumerate() {
        let at = slot.wrapping_add(4 * i as u32);
        adv.write_word(at, w).map_err(|_| HarnessError::Write(at))?;
    }

    // the hijacked transfer itself, then note where it landed
    let mut landing = None;
    if spec.kind != AttackKind::FptrHijack {
        m.step();
        if m.status() == Status::Running {
            landing = m.current_va().map(|va| (va, m.counters().committed));
        }
    }
    let r = m.run(max_cycles);
    let outcome = if r.out.contains(&SENTINEL) {
        Outcome::Success
    } else {
        match (r.termination, r.exception.map(|e| e.kind)) {
            (Termination::Exception, Some(ExceptionKind::TrapExecuted)) => Outcome::Trap,
            (Termination::Exception, Some(ExceptionKind::DecodeFault)) => Outcome::DecodeFault,
            (Termination::Exception, Some(ExceptionKind::FetchFault)) => Outcome::FetchFault,
            (Termination::Halt, _) => Outcome::NoEffect,
            _ => Outcome::OtherCrash,
        }
    };
    let trap_on_first_landing = outcome == Outcome::Trap
        && landing.is_some_and(|(va, committed)| {
            committed == r.committed && image.trap_locations.binary_search(&va).is_ok()
        });
    Ok(TrialResult { outcome, trap_on_first_landing })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignResult {
    pub trials: u64,
    pub successes: u64,
    pub trap_hits: u64,
    pub decode_faults: u64,
    pub fetch_faults: u64,
    pub other_crashes: u64,
    pub no_effect: u64,
    pub trap_first_landing: u64,
    pub empirical_rate: f64,
    pub analytic_rate: f64,
    pub z: Option<f64>,
    /// Largest success count consistent with the analytic rate at 99.9%.
    pub poisson_bound: u64,
}

impl CampaignResult {
    pub fn failures(&self) -> u64 {
        self.trials - self.successes
    }

    pub fn within_poisson_bound(&self) -> bool {
        self.successes <= self.poisson_bound
    }
}

/// `N^-P`, times the chance that a raw pointer decrypts to the intended
/// target when pointer encryption sits on the path.
pub fn analytic_rate(spec: &AttackSpec, cfg: &MachineConfig) -> f64 {
    let phantoms = if cfg.features.pns { cfg.phantom.phantoms() } else { 1 };
    let chain = analytic_success_probability(phantoms, spec.chain_length());
    if spec.kind == AttackKind::FptrHijack && cfg.features.ptrenc {
        chain * 2f64.powi(-32)
    } else {
        chain
    }
}

/// Independent trials with seeds `base_seed + t`, run in parallel and
/// merged in trial order.
pub fn run_campaign(
    victim: &Victim,
    spec: &AttackSpec,
    trials: u64,
    base_seed: u64,
    cfg: &MachineConfig,
    max_cycles: u64,
) -> Result<CampaignResult, HarnessError> {
    assert!(trials >= 1, "a campaign needs at least one trial");
    let results: Vec<TrialResult> = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(victim, spec, base_seed.wrapping_add(t), cfg, max_cycles))
        .collect::<Result<_, _>>()?;
    let count = |o: Outcome| results.iter().filter(|r| r.outcome == o).count() as u64;
    let successes = count(Outcome::Success);
    let analytic = analytic_rate(spec, cfg);
    let empirical = successes as f64 / trials as f64;
    Ok(CampaignResult {
        trials,
        successes,
        trap_hits: count(Outcome::Trap),
        decode_faults: count(Outcome::DecodeFault),
        fetch_faults: count(Outcome::FetchFault),
        other_crashes: count(Outcome::OtherCrash),
        no_effect: count(Outcome::NoEffect),
        trap_first_landing: results.iter().filter(|r| r.trap_on_first_landing).count() as u64,
        empirical_rate: empirical,
        analytic_rate: analytic,
        z: stats::z_score(empirical, analytic, trials),
        poisson_bound: stats::poisson_upper_bound(analytic * trials as f64, 0.999),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub vector: String,
    pub payload: String,
    pub victim: String,
    pub baseline_outcome: Outcome,
    pub baseline_success: bool,
    pub pns: CampaignResult,
    pub mitigated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixReport {
    pub cells: Vec<CellReport>,
    pub all_baseline_succeed: bool,
    pub all_mitigated: bool,
}

/// Baseline configuration of the matrix: no phantoms, no pointer encryption.
pub fn baseline_config(cfg: &MachineConfig) -> MachineConfig {
    let mut b = *cfg;
    b.features.pns = false;
    b.features.ptrenc = false;
    b
}

/// For every cell: one baseline trial, then a PNS campaign classified
/// against its own analytic rate.
pub fn run_attack_matrix(
    catalog: &VictimCatalog,
    cfg: &MachineConfig,
    trials: u64,
    base_seed: u64,
    max_cycles: u64,
) -> Result<MatrixReport, HarnessError> {
    let baseline = baseline_config(cfg);
    let mut cells = Vec::new();
    for cell in &catalog.cells {
        let victim = catalog
            .victims
            .get(&cell.victim)
            .ok_or_else(|| SpecError::UnknownSymbol(cell.victim.clone()))?;
        let base = run_trial(victim, &cell.spec, base_seed, &baseline, max_cycles)?;
        let pns = run_campaign(victim, &cell.spec, trials, base_seed, cfg, max_cycles)?;
        cells.push(CellReport {
            vector: cell.vector.clone(),
            payload: cell.payload.clone(),
            victim: cell.victim.clone(),
            baseline_outcome: base.outcome,
            baseline_success: base.outcome == Outcome::Success,
            mitigated: pns.within_poisson_bound(),
            pns,
        });
    }
    Ok(MatrixReport {
        all_baseline_succeed: cells.iter().all(|c| c.baseline_success),
        all_mitigated: cells.iter().all(|c| c.mitigated),
        cells,
    })
}
