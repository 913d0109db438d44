//! Sparse byte-addressed memory. Code regions are pre-decoded and shared
//! between machines; writable regions are per machine.

use std::sync::Arc;

use crate::image::{Perm, ProgramImage, TRAP_WORD};
use crate::isa::{decode, Instruction};

/// Top of the initial stack (exclusive).
pub const STACK_TOP: u32 = 0x0008_0000;
pub const STACK_BYTES: u32 = 0x4000;

#[derive(Debug)]
pub struct CodeRegion {
    pub base: u32,
    pub words: Vec<u32>,
    decoded: Vec<Option<Instruction>>,
}

impl CodeRegion {
    fn slot(&self, va: u32) -> Option<usize> {
        if va < self.base || !va.is_multiple_of(4) {
            return None;
        }
        let i = ((va - self.base) / 4) as usize;
        (i < self.words.len()).then_some(i)
    }

    pub fn end(&self) -> u64 {
        self.base as u64 + 4 * self.words.len() as u64
    }
}

#[derive(Debug, Clone)]
pub struct DataRegion {
    pub base: u32,
    pub bytes: Vec<u8>,
    /// Part of the loaded image (as opposed to the stack).
    pub from_image: bool,
}

impl DataRegion {
    fn end(&self) -> u64 {
        self.base as u64 + self.bytes.len() as u64
    }

    fn offset(&self, va: u32, len: u32) -> Option<usize> {
        (va >= self.base && va as u64 + len as u64 <= self.end()).then(|| (va - self.base) as usize)
    }
}

/// Immutable, decoded view of an image's code plus its initial data.
#[derive(Debug)]
pub struct Program {
    pub code: Vec<CodeRegion>,
    pub data: Vec<DataRegion>,
    pub entry: u32,
    pub trap_mode: bool,
    trap_locations: Vec<u32>,
}

impl Program {
    pub fn new(image: &ProgramImage) -> Arc<Self> {
        let mut code = Vec::new();
        let mut data = Vec::new();
        for s in image.sections.iter().filter(|s| !s.words.is_empty()) {
            match s.perm {
                Perm::Rx => code.push(CodeRegion {
                    base: s.base,
                    decoded: s.words.iter().map(|&w| decode(w).ok()).collect(),
                    words: s.words.clone(),
                }),
                Perm::Rw => data.push(DataRegion {
                    base: s.base,
                    bytes: s.words.iter().flat_map(|w| w.to_le_bytes()).collect(),
                    from_image: true,
                }),
            }
        }
        code.sort_by_key(|c| c.base);
        data.sort_by_key(|d| d.base);
        Arc::new(Program {
            code,
            data,
            entry: image.entry,
            trap_mode: image.trap_mode,
            trap_locations: image.trap_locations.clone(),
        })
    }

    fn code_slot(&self, va: u32) -> Option<(&CodeRegion, usize)> {
        self.code.iter().find_map(|c| c.slot(va).map(|i| (c, i)))
    }

    /// The decoded instruction at `va`: outer `None` if not code,
    /// inner `None` if the word does not decode.
    pub fn fetch(&self, va: u32) -> Option<Result<Instruction, u32>> {
        self.code_slot(va).map(|(c, i)| c.decoded[i].ok_or(c.words[i]))
    }

    pub fn code_word(&self, va: u32) -> Option<u32> {
        self.code_slot(va).map(|(c, i)| c.words[i])
    }

    /// Whether `va` holds an inserted trap (as listed in the trap table).
    pub fn is_inserted_trap(&self, va: u32) -> bool {
        self.trap_mode
            && self.trap_locations.binary_search(&va).is_ok()
            && self.code_word(va) == Some(TRAP_WORD)
    }
}

#[derive(Debug, Clone)]
pub struct Memory {
    program: Arc<Program>,
    data: Vec<DataRegion>,
}

impl Memory {
    pub fn new(program: Arc<Program>) -> Self {
        let mut data = program.data.clone();
        data.push(DataRegion {
            base: STACK_TOP - STACK_BYTES,
            bytes: vec![0; STACK_BYTES as usize],
            from_image: false,
        });
        data.sort_by_key(|d| d.base);
        Memory { program, data }
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    fn data_region(&self, va: u32, len: u32) -> Option<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .find_map(|(r, d)| d.offset(va, len).map(|o| (r, o)))
    }

    /// Aligned word load from any mapped region (code is readable).
    pub fn load_word(&self, va: u32) -> Option<u32> {
        if !va.is_multiple_of(4) {
            return None;
        }
        if let Some(w) = self.program.code_word(va) {
            return Some(w);
        }
        let (r, o) = self.data_region(va, 4)?;
        Some(u32::from_le_bytes(self.data[r].bytes[o..o + 4].try_into().unwrap()))
    }

    /// Aligned word store; only writable regions accept it.
    pub fn store_word(&mut self, va: u32, value: u32) -> Option<()> {
        if !va.is_multiple_of(4) {
            return None;
        }
        let (r, o) = self.data_region(va, 4)?;
        self.data[r].bytes[o..o + 4].copy_from_slice(&value.to_le_bytes());
        Some(())
    }

    /// Byte read from any mapped region.
    pub fn load_byte(&self, va: u32) -> Option<u8> {
        if let Some(w) = self.program.code_word(va & !3) {
            return Some(w.to_le_bytes()[(va & 3) as usize]);
        }
        let (r, o) = self.data_region(va, 1)?;
        Some(self.data[r].bytes[o])
    }

    pub fn store_byte(&mut self, va: u32, value: u8) -> Option<()> {
        let (r, o) = self.data_region(va, 1)?;
        self.data[r].bytes[o] = value;
        Some(())
    }

    /// `(base, length)` of every mapped region, in address order.
    pub fn mapped_ranges(&self) -> Vec<(u32, u64)> {
        let mut v: Vec<_> = self
            .program
            .code
            .iter()
            .map(|c| (c.base, c.end() - c.base as u64))
            .chain(self.data.iter().map(|d| (d.base, d.bytes.len() as u64)))
            .collect();
        v.sort();
        v
    }

    /// Writable image bytes in address order (the stack is not included).
    pub fn image_data_bytes(&self) -> impl Iterator<Item = &u8> {
        self.data.iter().filter(|d| d.from_image).flat_map(|d| d.bytes.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::assemble;

    #[test]
    fn permissions() {
        let img = assemble("_start: halt\n.data\nv: .word 0x11223344\n").unwrap();
        let mut m = Memory::new(Program::new(&img));
        assert_eq!(m.load_word(0x4000), Some(0x1122_3344));
        assert_eq!(m.load_byte(0x4001), Some(0x33));
        assert_eq!(m.load_word(0x1000), Some(0x0100_0000));
        assert!(m.store_word(0x1000, 0).is_none());
        assert!(m.store_word(0x4002, 0).is_none());
        assert!(m.store_word(STACK_TOP - 4, 9).is_some());
        assert!(m.store_word(STACK_TOP, 9).is_none());
        assert_eq!(m.load_word(STACK_TOP - 4), Some(9));
        assert_eq!(m.image_data_bytes().count(), 4);
    }
}
