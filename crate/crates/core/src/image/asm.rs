//! Two-pass assembler for PNS-32 source text.
//!
//! One instruction or directive per line, `#` starts a comment. Directives:
//! `.text`, `.data`, `.org ADDR`, `.word V[, V...]`. Labels are `name:` and may
//! share a line with an instruction. Branch and jump targets are labels,
//! absolute addresses, or `+k`/`-k` instructions relative to the branch itself.
//! The entry point is `_start` when defined, otherwise the first text address.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{Perm, ProgramImage, Reloc, Section, DATA_BASE, TEXT_BASE};
use crate::isa::{encode, Format, Instruction, Opcode, SP};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct AssemblyError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, AssemblyError> {
    Err(AssemblyError { line, msg: msg.into() })
}

#[derive(Debug)]
enum Item {
    Insn { line: usize, op: Opcode, args: Vec<String> },
    Word { line: usize, expr: String },
}

struct PendingSection {
    name: String,
    base: u32,
    perm: Perm,
    items: Vec<Item>,
}

impl PendingSection {
    fn cursor(&self) -> u64 {
        self.base as u64 + 4 * self.items.len() as u64
    }
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else {
        body.replace('_', "").parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_reg(s: &str, line: usize) -> Result<u8, AssemblyError> {
    let s = s.trim();
    if s == "sp" {
        return Ok(SP);
    }
    match s.strip_prefix('r').and_then(|n| n.parse::<u8>().ok()) {
        Some(r) if r < 16 => Ok(r),
        _ => err(line, format!("bad register '{s}'")),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

struct Assembler {
    sections: Vec<PendingSection>,
    current: Option<usize>,
    kind: Perm,
    labels: HashMap<String, u32>,
    label_lines: HashMap<String, usize>,
}

impl Assembler {
    fn section_mut(&mut self) -> &mut PendingSection {
        let idx = match self.current {
            Some(i) => i,
            None => self.open(self.kind, None),
        };
        &mut self.sections[idx]
    }

    fn open(&mut self, kind: Perm, base: Option<u32>) -> usize {
        let prefix = match kind {
            Perm::Rx => "text",
            Perm::Rw => "data",
        };
        let count = self.sections.iter().filter(|s| s.perm == kind).count();
        let name = if count == 0 { prefix.to_string() } else { format!("{prefix}{count}") };
        let default = self
            .sections
            .iter()
            .rev()
            .find(|s| s.perm == kind)
            .map(|s| s.cursor() as u32)
            .unwrap_or(match kind {
                Perm::Rx => TEXT_BASE,
                Perm::Rw => DATA_BASE,
            });
        self.sections.push(PendingSection {
            name,
            base: base.unwrap_or(default),
            perm: kind,
            items: Vec::new(),
        });
        self.current = Some(self.sections.len() - 1);
        self.current.unwrap()
    }

    fn switch(&mut self, kind: Perm) {
        self.kind = kind;
        self.current = self.sections.iter().rposition(|s| s.perm == kind);
    }

    fn org(&mut self, addr: u32) {
        match self.current {
            Some(i) if self.sections[i].items.is_empty() => self.sections[i].base = addr,
            _ => {
                self.open(self.kind, Some(addr));
            }
        }
    }

    fn first_pass(&mut self, source: &str) -> Result<(), AssemblyError> {
        for (idx, raw) in source.lines().enumerate() {
            let line = idx + 1;
            let mut text = raw.split('#').next().unwrap_or("").trim();
            while let Some(colon) = text.find(':') {
                let label = text[..colon].trim();
                if !is_ident(label) {
                    break;
                }
                // labels bind to the next emitted address in the current section
                let at = self.section_mut().cursor();
                if at > u32::MAX as u64 {
                    return err(line, "address overflow");
                }
                if let Some(prev) = self.label_lines.insert(label.to_string(), line) {
                    return err(line, format!("duplicate label '{label}' (first on line {prev})"));
                }
                self.labels.insert(label.to_string(), at as u32);
                text = text[colon + 1..].trim();
            }
            if text.is_empty() {
                continue;
            }
            let (head, rest) = match text.find(char::is_whitespace) {
                Some(i) => (&text[..i], text[i..].trim()),
                None => (text, ""),
            };
            let args: Vec<String> = if rest.is_empty() {
                Vec::new()
            } else {
                rest.split(',').map(|a| a.trim().to_string()).collect()
            };
            match head {
                ".text" => self.switch(Perm::Rx),
                ".data" => self.switch(Perm::Rw),
                ".org" => {
                    let addr = match args.as_slice() {
                        [a] => parse_number(a),
                        _ => None,
                    };
                    match addr {
                        Some(a) if (0..=u32::MAX as i64).contains(&a) && a % 4 == 0 => {
                            self.org(a as u32)
                        }
                        _ => return err(line, "'.org' needs one 4-aligned address"),
                    }
                }
                ".word" => {
                    if self.kind == Perm::Rx {
                        return err(line, "'.word' not allowed in text; code and data are separate");
                    }
                    if args.is_empty() {
                        return err(line, "'.word' needs a value");
                    }
                    for expr in args {
                        self.section_mut().items.push(Item::Word { line, expr });
                    }
                }
                d if d.starts_with('.') => return err(line, format!("unknown directive '{d}'")),
                m => {
                    let op = Opcode::from_mnemonic(&m.to_ascii_lowercase())
                        .ok_or_else(|| AssemblyError { line, msg: format!("unknown mnemonic '{m}'") })?;
                    if self.kind == Perm::Rw {
                        return err(line, "instructions not allowed in data");
                    }
                    self.section_mut().items.push(Item::Insn { line, op, args });
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, expr: &str, line: usize) -> Result<(i64, bool), AssemblyError> {
        if let Some(v) = parse_number(expr) {
            return Ok((v, false));
        }
        match self.labels.get(expr.trim()) {
            Some(&va) => Ok((va as i64, true)),
            None => err(line, format!("undefined label '{}'", expr.trim())),
        }
    }

    fn target_offset(&self, arg: &str, va: u32, line: usize) -> Result<i64, AssemblyError> {
        let arg = arg.trim();
        let target = if arg.starts_with('+') || arg.starts_with('-') {
            let k = parse_number(arg).ok_or_else(|| AssemblyError { line, msg: format!("bad offset '{arg}'") })?;
            va as i64 + 4 * k
        } else {
            self.resolve(arg, line)?.0
        };
        if target % 4 != 0 {
            return err(line, format!("misaligned target 0x{target:x}"));
        }
        Ok((target - (va as i64 + 4)) / 4)
    }

    fn build(
        &self,
        op: Opcode,
        args: &[String],
        va: u32,
        line: usize,
        relocs: &mut Vec<Reloc>,
    ) -> Result<u32, AssemblyError> {
        let want = match op.format() {
            Format::Bare => 0,
            Format::Reg3 | Format::Branch => 3,
            Format::Reg2 | Format::Mem | Format::Imm16 => 2,
            Format::Jump | Format::RegTarget | Format::RegD => 1,
        };
        if args.len() != want {
            return err(line, format!("'{}' takes {want} operand(s)", op.mnemonic()));
        }
        let reg = |i: usize| parse_reg(&args[i], line);
        let insn = match op.format() {
            Format::Bare => Instruction::bare(op),
            Format::Reg3 => Instruction::reg3(op, reg(0)?, reg(1)?, reg(2)?),
            Format::Reg2 => Instruction::reg3(op, reg(0)?, reg(1)?, 0),
            Format::Mem => {
                let m = args[1].trim();
                let open = m.find('(');
                let (off, base) = match (open, m.strip_suffix(')')) {
                    (Some(o), Some(inner)) => (m[..o].trim(), &inner[o + 1..]),
                    _ => return err(line, format!("bad memory operand '{m}'")),
                };
                let imm = if off.is_empty() { 0 } else { self.resolve(off, line)?.0 };
                Instruction::with_imm(op, reg(0)?, parse_reg(base, line)?, 0, clamp(imm))
            }
            Format::Imm16 => {
                let (v, is_label) = self.resolve(&args[1], line)?;
                if is_label {
                    relocs.push(Reloc::Ldi { at: va, target: v as u32 });
                }
                Instruction::with_imm(op, reg(0)?, 0, 0, clamp(v))
            }
            Format::Branch => {
                let off = self.target_offset(&args[2], va, line)?;
                Instruction::with_imm(op, 0, reg(0)?, reg(1)?, clamp(off))
            }
            Format::Jump => Instruction::with_imm(op, 0, 0, 0, clamp(self.target_offset(&args[0], va, line)?)),
            Format::RegTarget => Instruction::reg3(op, 0, reg(0)?, 0),
            Format::RegD => Instruction::reg3(op, reg(0)?, 0, 0),
        };
        encode(&insn).map_err(|e| AssemblyError { line, msg: e.to_string() })
    }
}

fn clamp(v: i64) -> i32 {
    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

/// Assembles source text into an image without trap tables.
pub fn assemble(source: &str) -> Result<ProgramImage, AssemblyError> {
    let mut asm = Assembler {
        sections: Vec::new(),
        current: None,
        kind: Perm::Rx,
        labels: HashMap::new(),
        label_lines: HashMap::new(),
    };
    asm.first_pass(source)?;

    let mut relocs = Vec::new();
    let mut sections = Vec::new();
    for ps in &asm.sections {
        if ps.cursor() > 1 << 32 {
            return err(0, format!("section {} runs past the address space", ps.name));
        }
        let mut words = Vec::with_capacity(ps.items.len());
        for (i, item) in ps.items.iter().enumerate() {
            let va = ps.base + 4 * i as u32;
            let word = match item {
                Item::Insn { line, op, args } => asm.build(*op, args, va, *line, &mut relocs)?,
                Item::Word { line, expr } => {
                    let (v, is_label) = asm.resolve(expr, *line)?;
                    if !(i32::MIN as i64..=u32::MAX as i64).contains(&v) {
                        return err(*line, format!("'.word' value {v} out of range"));
                    }
                    if is_label {
                        relocs.push(Reloc::DataWord { at: va, target: v as u32 });
                    }
                    v as u32
                }
            };
            words.push(word);
        }
        sections.push(Section { name: ps.name.clone(), base: ps.base, perm: ps.perm, words });
    }

    let first_text = sections.iter().find(|s| s.perm == Perm::Rx).map(|s| s.base);
    let entry = asm.labels.get("_start").copied().or(first_text).unwrap_or(TEXT_BASE);
    let symbols: BTreeMap<String, u32> = asm.labels.into_iter().collect();
    let image = ProgramImage {
        entry,
        trap_mode: false,
        sections,
        symbols,
        bbl_starts: Vec::new(),
        trap_locations: Vec::new(),
        relocs,
    };
    image.validate_layout().map_err(|e| AssemblyError { line: 0, msg: e.to_string() })?;
    Ok(image)
}
