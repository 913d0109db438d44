//! Gadget discovery and survival of gadget chains under one-domain shifts.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::image::{hex32, parse_hex32, ProgramImage};
use crate::isa::{decode, Instruction, Opcode, INSN_BYTES, NUM_REGS, SP};
use crate::machine::{alu, cipher, PtrEncKey};
use crate::phantom::SelectorRng;

pub const DEFAULT_MAX_LEN: usize = 5;
/// Random machine states per equivalence check.
pub const DEFAULT_STATES: usize = 64;
/// Longest shifted decode before giving up.
const SHIFT_CAP: usize = 64;
/// Offsets analysed, in units of the shift.
pub const OFFSETS: [i32; 2] = [-1, 1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gadget {
    pub start: u32,
    pub instructions: Vec<Instruction>,
}

impl Gadget {
    pub fn text(&self) -> String {
        render(&self.instructions, self.start)
    }
}

fn render(seq: &[Instruction], start: u32) -> String {
    seq.iter()
        .enumerate()
        .map(|(i, insn)| insn.display_at(start.wrapping_add(INSN_BYTES * i as u32)).to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Every word-aligned start in executable memory whose forward decode
/// reaches RET, JR or CALLR within `max_len` instructions without passing
/// other control flow, HALT or TRAP.
pub fn scan_gadgets(image: &ProgramImage, max_len: usize) -> Vec<Gadget> {
    let mut out = Vec::new();
    for sec in image.rx_sections() {
        for i in 0..sec.words.len() {
            let start = sec.base + INSN_BYTES * i as u32;
            let mut seq = Vec::new();
            for w in sec.words[i..].iter().take(max_len) {
                let Ok(insn) = decode(*w) else { break };
                seq.push(insn);
                if insn.op.is_gadget_terminator() {
                    out.push(Gadget { start, instructions: seq });
                    break;
                }
                if insn.op.ends_block() {
                    break;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ShiftError {
    #[error("shifted start lies outside executable memory at {0:#010x}")]
    OutOfText(u32),
    #[error("undecodable word at {0:#010x}")]
    Decode(u32),
    #[error("no terminator within 64 instructions")]
    TooLong,
}

/// The instructions a transfer to `gadget.start + k * delta` executes up to
/// the first terminator, fault or trap. Planted traps met by falling through
/// are skipped, as the machine does.
pub fn shift_decode(gadget: &Gadget, k: i32, delta: u32, image: &ProgramImage) -> Result<Vec<Instruction>, ShiftError> {
    let start = gadget.start as i64 + k as i64 * delta as i64;
    if !(0..=u32::MAX as i64).contains(&start) {
        return Err(ShiftError::OutOfText(start as u32));
    }
    let mut va = start as u32;
    let mut seq = Vec::new();
    while seq.len() < SHIFT_CAP {
        let word = image.code_word(va).ok_or(ShiftError::OutOfText(va))?;
        let insn = decode(word).map_err(|_| ShiftError::Decode(va))?;
        let fell_through = va != start as u32;
        if fell_through && insn.op == Opcode::Trap && image.trap_locations.binary_search(&va).is_ok() {
            va = va.wrapping_add(INSN_BYTES);
            continue;
        }
        seq.push(insn);
        if insn.op.ends_block() {
            return Ok(seq);
        }
        va = va.wrapping_add(INSN_BYTES);
    }
    Err(ShiftError::TooLong)
}

/// What a sequence did to a sandbox state.
#[derive(Debug, PartialEq, Eq)]
struct Effects {
    regs: [u32; NUM_REGS],
    writes: BTreeMap<u32, u32>,
    out: Vec<u32>,
    target: u32,
}

struct Sandbox {
    regs: [u32; NUM_REGS],
    writes: BTreeMap<u32, u32>,
    salt: u64,
    key: PtrEncKey,
}

impl Sandbox {
    fn new(state: u64) -> Self {
        let mut rng = SelectorRng::new(0x5A4D_B0C5_0000_0000 ^ state);
        let mut regs = [0u32; NUM_REGS];
        for r in regs.iter_mut() {
            // word-aligned so that loads through any register are legal
            *r = (rng.next_u64() as u32) & !3;
        }
        regs[SP as usize] = 0x0007_0000 + ((rng.next_u64() as u32) & 0xFFFC);
        Sandbox { regs, writes: BTreeMap::new(), salt: rng.next_u64(), key: PtrEncKey::from_seed(rng.next_u64()) }
    }

    fn load(&self, addr: u32) -> Option<u32> {
        if !addr.is_multiple_of(4) {
            return None;
        }
        Some(match self.writes.get(&addr) {
            Some(&w) => w,
            None => SelectorRng::new(self.salt ^ addr as u64).next_u64() as u32,
        })
    }

    fn store(&mut self, addr: u32, v: u32) -> Option<()> {
        addr.is_multiple_of(4).then(|| {
            self.writes.insert(addr, v);
        })
    }

    /// Runs `seq` to its terminator; `None` on any fault or a sequence that
    /// stops anywhere but an indirect transfer.
    fn run(mut self, seq: &[Instruction]) -> Option<Effects> {
        let mut out = Vec::new();
        for insn in seq {
            let (rd, ra) = (insn.rd as usize, insn.ra as usize);
            let target = match insn.op {
                Opcode::Nop => None,
                Opcode::Out => {
                    out.push(self.regs[rd]);
                    None
                }
                Opcode::Ld => {
                    self.regs[rd] = self.load(self.regs[ra].wrapping_add(insn.imm as u32))?;
                    None
                }
                Opcode::St => {
                    self.store(self.regs[ra].wrapping_add(insn.imm as u32), self.regs[rd])?;
                    None
                }
                Opcode::Encp => {
                    self.regs[rd] = cipher::encrypt(self.regs[rd], &self.key);
                    None
                }
                Opcode::Decp => {
                    self.regs[rd] = cipher::decrypt(self.regs[rd], &self.key);
                    None
                }
                Opcode::Ret => {
                    let sp = self.regs[SP as usize];
                    let t = self.load(sp)?;
                    self.regs[SP as usize] = sp.wrapping_add(4);
                    Some(t)
                }
                Opcode::Jr => Some(self.regs[ra]),
                // the pushed return address depends on where the call sits
                Opcode::Callr => {
                    let t = self.regs[ra];
                    self.regs[SP as usize] = self.regs[SP as usize].wrapping_sub(4);
                    Some(t)
                }
                Opcode::Halt | Opcode::Trap => return None,
                op if op.is_control_flow() => return None,
                _ => {
                    self.regs[rd] = alu(insn, &self.regs)?;
                    None
                }
            };
            if let Some(target) = target {
                return Some(Effects { regs: self.regs, writes: self.writes, out, target });
            }
        }
        None
    }
}

/// Concrete-testing equivalence over `states` random machine states: same
/// registers, memory writes, output and transfer target on every one.
pub fn semantically_equivalent(g1: &[Instruction], g2: &[Instruction], states: usize) -> bool {
    if g1 == g2 {
        return true;
    }
    (0..states as u64).all(|s| match Sandbox::new(s).run(g2) {
        None => false,
        Some(e2) => Sandbox::new(s).run(g1) == Some(e2),
    })
}

/// Whether `g` still does the same thing when entered `k` shifts away.
pub fn survives_shift(g: &Gadget, k: i32, delta: u32, image: &ProgramImage) -> bool {
    shift_decode(g, k, delta, image).is_ok_and(|seq| semantically_equivalent(&g.instructions, &seq, DEFAULT_STATES))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SurvivalError {
    #[error("no gadget starts at {0:#010x}")]
    UnknownGadget(u32),
    #[error("cannot resolve gadget '{0}'")]
    UnknownSymbol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShiftOutcome {
    pub k: i32,
    pub survives: bool,
    pub decoded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GadgetSurvival {
    #[serde(serialize_with = "ser_hex")]
    pub start: u32,
    pub text: String,
    pub shifts: Vec<ShiftOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainSurvival {
    pub gadgets: Vec<GadgetSurvival>,
    /// Offsets at which every gadget of the chain survives.
    pub surviving_offsets: Vec<i32>,
}

impl ChainSurvival {
    pub fn survives(&self, k: i32) -> bool {
        self.surviving_offsets.contains(&k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SurvivalReport {
    pub gadgets: usize,
    pub chains_before: usize,
    pub chains_after: usize,
    pub per_chain: Vec<ChainSurvival>,
}

fn ser_hex<S: serde::Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex32(*v))
}

/// Survival of each chain at offsets -1 and +1; a chain counts as alive
/// after the shift if it survives either one.
pub fn chain_survival(chains: &[Vec<u32>], delta: u32, image: &ProgramImage) -> Result<SurvivalReport, SurvivalError> {
    let scan = scan_gadgets(image, DEFAULT_MAX_LEN);
    let by_start: HashMap<u32, &Gadget> = scan.iter().map(|g| (g.start, g)).collect();
    let mut per_chain = Vec::with_capacity(chains.len());
    for chain in chains {
        let mut gadgets = Vec::with_capacity(chain.len());
        for &va in chain {
            let g = by_start.get(&va).ok_or(SurvivalError::UnknownGadget(va))?;
            let shifts = OFFSETS
                .iter()
                .map(|&k| {
                    let seq = shift_decode(g, k, delta, image).ok();
                    ShiftOutcome {
                        k,
                        survives: survives_shift(g, k, delta, image),
                        decoded: seq.map(|s| render(&s, (va as i64 + k as i64 * delta as i64) as u32)),
                    }
                })
                .collect();
            gadgets.push(GadgetSurvival { start: va, text: g.text(), shifts });
        }
        let surviving_offsets = OFFSETS
            .iter()
            .enumerate()
            .filter(|(i, _)| gadgets.iter().all(|g: &GadgetSurvival| g.shifts[*i].survives))
            .map(|(_, &k)| k)
            .collect();
        per_chain.push(ChainSurvival { gadgets, surviving_offsets });
    }
    let chains_after = per_chain.iter().filter(|c| !c.surviving_offsets.is_empty()).count();
    Ok(SurvivalReport { gadgets: scan.len(), chains_before: chains.len(), chains_after, per_chain })
}

/// Chain entries given as symbol names or `0x` addresses.
pub fn resolve_chains(chains: &[Vec<String>], image: &ProgramImage) -> Result<Vec<Vec<u32>>, SurvivalError> {
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|s| {
                    image.symbol(s).or_else(|| parse_hex32(s).ok()).ok_or_else(|| SurvivalError::UnknownSymbol(s.clone()))
                })
                .collect()
        })
        .collect()
}
