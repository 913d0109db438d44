//! Program images: sections, symbols and the basic-block/trap tables.

mod asm;
mod format;
pub use format::{hex32, parse_hex32};
mod rewrite;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::isa::{self, Opcode};
use crate::phantom::PhantomConfig;

pub use asm::{assemble, AssemblyError};
pub use format::{load, save, LoadError};
pub use rewrite::{identify_bbls, insert_traps, AnalysisError, BasicBlock, RewriteError};

/// Default load address of the first text section.
pub const TEXT_BASE: u32 = 0x1000;
/// Default load address of the first data section.
pub const DATA_BASE: u32 = 0x4000;
/// Word value of an inserted trap.
pub const TRAP_WORD: u32 = 0x0200_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perm {
    Rx,
    Rw,
}

impl Perm {
    pub fn as_str(self) -> &'static str {
        match self {
            Perm::Rx => "rx",
            Perm::Rw => "rw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub base: u32,
    pub perm: Perm,
    pub words: Vec<u32>,
}

impl Section {
    /// One past the last byte.
    pub fn end(&self) -> u64 {
        self.base as u64 + 4 * self.words.len() as u64
    }

    pub fn contains(&self, va: u32) -> bool {
        va >= self.base && (va as u64) < self.end()
    }

    pub fn word_at(&self, va: u32) -> Option<u32> {
        if self.contains(va) && va.is_multiple_of(4) {
            Some(self.words[((va - self.base) / 4) as usize])
        } else {
            None
        }
    }
}

/// An absolute code address the assembler emitted. The trap rewriter uses
/// these to move address constants along with the code they name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Reloc {
    /// `.word label` at `at`.
    DataWord { at: u32, target: u32 },
    /// `ldi rd, label` at `at`.
    Ldi { at: u32, target: u32 },
}

impl Reloc {
    pub(crate) fn target(&self) -> u32 {
        match *self {
            Reloc::DataWord { target, .. } | Reloc::Ldi { target, .. } => target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramImage {
    pub entry: u32,
    pub trap_mode: bool,
    pub sections: Vec<Section>,
    pub symbols: BTreeMap<String, u32>,
    pub bbl_starts: Vec<u32>,
    pub trap_locations: Vec<u32>,
    pub(crate) relocs: Vec<Reloc>,
}

/// Image invariant names, as reported by the loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invariant {
    Alignment,
    Overlap,
    PhantomRange,
    TrapTable,
    Entry,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Invariant::Alignment => "alignment",
            Invariant::Overlap => "overlap",
            Invariant::PhantomRange => "phantom-range",
            Invariant::TrapTable => "trap-table",
            Invariant::Entry => "entry",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("image invariant violated: {invariant} ({detail})")]
pub struct InvariantError {
    pub invariant: Invariant,
    pub detail: String,
}

fn violated(invariant: Invariant, detail: impl Into<String>) -> InvariantError {
    InvariantError { invariant, detail: detail.into() }
}

impl ProgramImage {
    pub fn rx_sections(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| s.perm == Perm::Rx)
    }

    pub fn section_containing(&self, va: u32) -> Option<&Section> {
        self.sections.iter().find(|s| s.contains(va))
    }

    /// Instruction word at `va` if it lies in an rx section.
    pub fn code_word(&self, va: u32) -> Option<u32> {
        self.rx_sections().find_map(|s| s.word_at(va))
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    /// Number of code bytes across rx sections.
    pub fn text_bytes(&self) -> u64 {
        self.rx_sections().map(|s| 4 * s.words.len() as u64).sum()
    }

    /// Checks the layout invariants that do not depend on the phantom configuration.
    pub fn validate_layout(&self) -> Result<(), InvariantError> {
        for s in &self.sections {
            if s.base % 4 != 0 {
                return Err(violated(Invariant::Alignment, format!("section {} base", s.name)));
            }
            if s.end() > 1 << 32 {
                return Err(violated(Invariant::Overlap, format!("section {} wraps", s.name)));
            }
        }
        let mut spans: Vec<_> = self
            .sections
            .iter()
            .filter(|s| !s.words.is_empty())
            .map(|s| (s.base as u64, s.end(), &s.name))
            .collect();
        spans.sort();
        for pair in spans.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(violated(
                    Invariant::Overlap,
                    format!("sections {} and {}", pair[0].2, pair[1].2),
                ));
            }
        }
        if self.rx_sections().any(|s| !s.words.is_empty()) && self.code_word(self.entry).is_none() {
            return Err(violated(Invariant::Entry, format!("0x{:08x} not in text", self.entry)));
        }
        self.validate_trap_tables()
    }

    fn validate_trap_tables(&self) -> Result<(), InvariantError> {
        let sorted = |v: &[u32]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.bbl_starts) || !sorted(&self.trap_locations) {
            return Err(violated(Invariant::TrapTable, "tables must be sorted and unique"));
        }
        if !self.trap_mode {
            if !self.trap_locations.is_empty() {
                return Err(violated(Invariant::TrapTable, "trap locations without trap mode"));
            }
            return Ok(());
        }
        if self.trap_locations.len() != self.bbl_starts.len() {
            return Err(violated(Invariant::TrapTable, "one trap per basic block"));
        }
        for (&trap, &start) in self.trap_locations.iter().zip(&self.bbl_starts) {
            if self.code_word(trap) != Some(TRAP_WORD) {
                return Err(violated(Invariant::TrapTable, format!("no trap at 0x{trap:08x}")));
            }
            if trap.checked_add(4) != Some(start) || self.code_word(start).is_none() {
                return Err(violated(
                    Invariant::TrapTable,
                    format!("trap 0x{trap:08x} does not precede a block"),
                ));
            }
        }
        Ok(())
    }

    /// Checks that every phantom name of every code address stays in 32 bits.
    pub fn validate_phantom_range(&self, cfg: &PhantomConfig) -> Result<(), InvariantError> {
        let shift = cfg.max_shift();
        for s in self.rx_sections().filter(|s| !s.words.is_empty()) {
            if (s.base as u64) < shift || s.end() - 1 > u32::MAX as u64 - shift {
                return Err(violated(
                    Invariant::PhantomRange,
                    format!(
                        "section {} at 0x{:08x} needs {} bytes of headroom on both sides",
                        s.name, s.base, shift
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self, cfg: &PhantomConfig) -> Result<(), InvariantError> {
        self.validate_layout()?;
        self.validate_phantom_range(cfg)
    }

    /// Disassembly listing of all rx sections, one instruction per line.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        let labels: BTreeMap<u32, Vec<&str>> =
            self.symbols.iter().fold(BTreeMap::new(), |mut m, (name, &va)| {
                m.entry(va).or_insert_with(Vec::new).push(name.as_str());
                m
            });
        for s in self.rx_sections() {
            for (i, &w) in s.words.iter().enumerate() {
                let va = s.base + 4 * i as u32;
                for l in labels.get(&va).into_iter().flatten() {
                    out.push_str(&format!("{l}:\n"));
                }
                out.push_str(&format!("  {va:08x}  {w:08x}  {}\n", isa::disassemble(w, va)));
            }
        }
        out
    }

    /// Whether the instruction at `va` is a direct or indirect transfer.
    pub fn is_transfer_at(&self, va: u32) -> bool {
        self.code_word(va)
            .and_then(|w| isa::decode(w).ok())
            .is_some_and(|i| i.op.is_control_flow() || i.op == Opcode::Halt)
    }
}
