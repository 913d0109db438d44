//! Basic-block identification and the trap-insertion rewrite.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use super::{InvariantError, Perm, ProgramImage, Reloc, TRAP_WORD};
use crate::isa::{decode, encode, Instruction, Opcode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasicBlock {
    /// First instruction of the block.
    pub entry: u32,
    /// Last instruction of the block.
    pub end: u32,
    /// Address reached by falling off (or returning past) the last instruction.
    pub fallthrough_successor: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("undecodable word at 0x{0:08x}")]
    Decode(u32),
    #[error("branch at 0x{from:08x} targets 0x{to:08x} outside text")]
    TargetOutsideText { from: u32, to: u32 },
    #[error("entry 0x{0:08x} is not in text")]
    Entry(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("image already has traps")]
    AlreadyTrapped,
    #[error("no entry basic block: text is empty")]
    EmptyText,
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("offset to 0x{target:08x} no longer fits at 0x{at:08x}")]
    Range { at: u32, target: u32 },
    #[error(transparent)]
    Layout(#[from] InvariantError),
}

fn decoded(image: &ProgramImage, va: u32) -> Result<Instruction, AnalysisError> {
    let w = image.code_word(va).ok_or(AnalysisError::Entry(va))?;
    decode(w).map_err(|_| AnalysisError::Decode(va))
}

/// Basic-block leaders: the entry, direct-transfer targets, address-taken
/// code labels, section starts, and every instruction following a block end.
fn leaders(image: &ProgramImage) -> Result<BTreeSet<u32>, AnalysisError> {
    let mut leaders = BTreeSet::new();
    if image.code_word(image.entry).is_none() {
        return Err(AnalysisError::Entry(image.entry));
    }
    leaders.insert(image.entry);
    for r in &image.relocs {
        if image.code_word(r.target()).is_some() {
            leaders.insert(r.target());
        }
    }
    for s in image.rx_sections() {
        if s.words.is_empty() {
            continue;
        }
        leaders.insert(s.base);
        for (i, &w) in s.words.iter().enumerate() {
            let va = s.base + 4 * i as u32;
            let insn = decode(w).map_err(|_| AnalysisError::Decode(va))?;
            if let Some(t) = insn.direct_target(va) {
                if image.code_word(t).is_none() {
                    return Err(AnalysisError::TargetOutsideText { from: va, to: t });
                }
                leaders.insert(t);
            }
            if insn.op.ends_block() && s.contains(va.wrapping_add(4)) {
                leaders.insert(va + 4);
            }
        }
    }
    Ok(leaders)
}

/// Partitions the text into basic blocks.
pub fn identify_bbls(image: &ProgramImage) -> Result<Vec<BasicBlock>, AnalysisError> {
    let leaders = leaders(image)?;
    let mut blocks = Vec::with_capacity(leaders.len());
    for s in image.rx_sections() {
        let in_section: Vec<u32> = leaders.range(s.base..).take_while(|&&l| s.contains(l)).copied().collect();
        for (i, &entry) in in_section.iter().enumerate() {
            let next = in_section.get(i + 1).copied().map(u64::from).unwrap_or(s.end());
            let end = (next - 4) as u32;
            let last = decoded(image, end)?;
            let falls = !matches!(last.op, Opcode::Jmp | Opcode::Jr | Opcode::Ret | Opcode::Halt | Opcode::Trap);
            let fallthrough_successor = (falls && s.contains(end.wrapping_add(4))).then_some(end + 4);
            blocks.push(BasicBlock { entry, end, fallthrough_successor });
        }
    }
    Ok(blocks)
}

/// Inserts a TRAP word in front of every basic block and re-lays-out the text
/// so that every legitimate transfer lands on the instruction after the trap.
pub fn insert_traps(image: &ProgramImage) -> Result<ProgramImage, RewriteError> {
    if image.trap_mode {
        return Err(RewriteError::AlreadyTrapped);
    }
    if image.rx_sections().all(|s| s.words.is_empty()) {
        return Err(RewriteError::EmptyText);
    }
    let leaders = leaders(image)?;

    // old instruction address -> new instruction address
    let mut moved: HashMap<u32, u32> = HashMap::new();
    let mut out = image.clone();
    let mut bbl_starts = Vec::new();
    for (si, s) in image.sections.iter().enumerate() {
        if s.perm != Perm::Rx {
            continue;
        }
        let mut words = Vec::with_capacity(s.words.len() + leaders.len());
        for (i, &w) in s.words.iter().enumerate() {
            let va = s.base + 4 * i as u32;
            if leaders.contains(&va) {
                words.push(TRAP_WORD);
                bbl_starts.push(s.base as u64 + 4 * words.len() as u64);
            }
            let new_va = s.base as u64 + 4 * words.len() as u64;
            if new_va > u32::MAX as u64 {
                return Err(RewriteError::Range { at: va, target: va });
            }
            moved.insert(va, new_va as u32);
            words.push(w);
        }
        let old_end = s.end();
        let new_end = s.base as u64 + 4 * words.len() as u64;
        if old_end <= u32::MAX as u64 && new_end <= u32::MAX as u64 {
            moved.entry(old_end as u32).or_insert(new_end as u32);
        }
        out.sections[si].words = words;
    }
    let relocate = |va: u32| moved.get(&va).copied().unwrap_or(va);

    // fix PC-relative transfers
    for (si, s) in image.sections.iter().enumerate() {
        if s.perm != Perm::Rx {
            continue;
        }
        for (i, &w) in s.words.iter().enumerate() {
            let va = s.base + 4 * i as u32;
            let insn = decode(w).map_err(|_| AnalysisError::Decode(va))?;
            if let Some(target) = insn.direct_target(va) {
                let new_va = relocate(va);
                let new_target = relocate(target);
                let off = (new_target as i64 - (new_va as i64 + 4)) / 4;
                let patched = Instruction { imm: off as i32, ..insn };
                let word = encode(&patched).map_err(|_| RewriteError::Range { at: va, target })?;
                let idx = ((new_va - s.base) / 4) as usize;
                out.sections[si].words[idx] = word;
            }
        }
    }

    // address constants
    let mut relocs = Vec::with_capacity(image.relocs.len());
    for r in &image.relocs {
        match *r {
            Reloc::DataWord { at, target } => {
                let new_target = relocate(target);
                let sec = out.sections.iter_mut().find(|s| s.contains(at)).expect("reloc inside a section");
                let idx = ((at - sec.base) / 4) as usize;
                sec.words[idx] = new_target;
                relocs.push(Reloc::DataWord { at, target: new_target });
            }
            Reloc::Ldi { at, target } => {
                let new_at = relocate(at);
                let new_target = relocate(target);
                let sec = out.sections.iter_mut().find(|s| s.contains(new_at)).expect("reloc inside text");
                let idx = ((new_at - sec.base) / 4) as usize;
                let insn = decode(sec.words[idx]).map_err(|_| AnalysisError::Decode(at))?;
                let patched = Instruction { imm: new_target as i32, ..insn };
                sec.words[idx] =
                    encode(&patched).map_err(|_| RewriteError::Range { at: new_at, target: new_target })?;
                relocs.push(Reloc::Ldi { at: new_at, target: new_target });
            }
        }
    }

    for va in out.symbols.values_mut() {
        *va = relocate(*va);
    }
    out.entry = relocate(image.entry);
    out.relocs = relocs;
    out.trap_mode = true;
    let bbl_starts: Vec<u32> = bbl_starts.into_iter().map(|v| v as u32).collect();
    out.trap_locations = bbl_starts.iter().map(|&v| v - 4).collect();
    out.bbl_starts = bbl_starts;
    out.validate_layout()?;
    Ok(out)
}
