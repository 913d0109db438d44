//! The architectural simulator over extended program counters.

pub mod cipher;
pub mod memory;
pub mod sds;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{hex32, InvariantError, ProgramImage};
use crate::isa::{Instruction, Opcode, NUM_REGS, SP};
use crate::phantom::{archetype, phantom_name, selector_adjust, ExtendedPc, PhantomConfig, PhantomError, SelectorRng};
use crate::uarch::{RemapToggles, Touched, Uarch, UarchConfig};

pub use cipher::PtrEncKey;
pub use memory::{Memory, Program, STACK_BYTES, STACK_TOP};
pub use sds::SecretDomainStack;

/// Cycles charged for ENCP/DECP and for the context pseudo-instructions.
pub const CRYPTO_CYCLES: u64 = 8;
/// Words in a saved context: 16 registers, resume address, SDS depth, check word.
pub const CONTEXT_WORDS: u32 = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Features {
    pub pns: bool,
    pub traps: bool,
    pub ptrenc: bool,
    pub remap: RemapToggles,
}

impl Default for Features {
    fn default() -> Self {
        Features { pns: true, traps: true, ptrenc: true, remap: RemapToggles::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineConfig {
    pub phantom: PhantomConfig,
    pub features: Features,
    pub uarch: UarchConfig,
    pub sds_capacity: usize,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            phantom: PhantomConfig::default(),
            features: Features::default(),
            uarch: UarchConfig::default(),
            sds_capacity: sds::DEFAULT_CAPACITY,
        }
    }
}

impl MachineConfig {
    /// Same configuration with trap support matched to an image.
    pub fn for_image(mut self, image: &ProgramImage) -> Self {
        self.features.traps = image.trap_mode;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("traps {features} in the configuration but the image trap mode is {image}")]
    TrapMismatch { features: &'static str, image: &'static str },
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Image(#[from] InvariantError),
    #[error("invalid microarchitecture configuration: {0}")]
    Uarch(&'static str),
    #[error("SDS capacity must be positive")]
    SdsCapacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExceptionKind {
    TrapExecuted,
    DecodeFault,
    FetchFault,
    MemFault,
    SdsUnderflow,
}

impl ExceptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExceptionKind::TrapExecuted => "trap_executed",
            ExceptionKind::DecodeFault => "decode_fault",
            ExceptionKind::FetchFault => "fetch_fault",
            ExceptionKind::MemFault => "mem_fault",
            ExceptionKind::SdsUnderflow => "sds_underflow",
        }
    }
}

impl fmt::Display for ExceptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exception {
    pub kind: ExceptionKind,
    pub at: ExtendedPc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Running,
    Halted,
    Excepted(Exception),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Halt,
    Exception,
    BudgetExceeded,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Halt => "halt",
            Termination::Exception => "exception",
            Termination::BudgetExceeded => "budget",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CycleCounters {
    pub cycles: u64,
    pub committed: u64,
    pub btb_hits: u64,
    pub btb_misses: u64,
    pub bdb_mispredicts: u64,
    pub ras_mispredicts: u64,
    pub branch_mispredicts: u64,
    pub icache_hits: u64,
    pub icache_misses: u64,
    pub itlb_hits: u64,
    pub itlb_misses: u64,
    pub traps_executed: u64,
    pub encp: u64,
    pub decp: u64,
    pub sds_spills: u64,
    pub sds_fills: u64,
    pub exceptions: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub termination: Termination,
    pub cycles: u64,
    pub committed: u64,
    pub out: Vec<u32>,
    pub digest: u64,
    pub counters: CycleCounters,
    pub exception: Option<Exception>,
}

#[derive(Serialize)]
struct ExceptionDoc {
    kind: &'static str,
    p: u8,
    addr: String,
}

#[derive(Serialize)]
struct RunResultDoc<'a> {
    termination: &'static str,
    cycles: u64,
    committed: u64,
    out: Vec<String>,
    digest: String,
    counters: &'a CycleCounters,
    exception: Option<ExceptionDoc>,
}

impl RunResult {
    pub fn to_json(&self) -> String {
        let doc = RunResultDoc {
            termination: self.termination.as_str(),
            cycles: self.cycles,
            committed: self.committed,
            out: self.out.iter().map(|&v| hex32(v)).collect(),
            digest: format!("0x{:016x}", self.digest),
            counters: &self.counters,
            exception: self.exception.map(|e| ExceptionDoc {
                kind: e.kind.as_str(),
                p: e.at.p,
                addr: hex32(e.at.addr),
            }),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("run results serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextOp {
    Save,
    Restore,
}

/// A one-shot runtime call performed when execution first reaches `at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextHook {
    pub at: u32,
    pub op: ContextOp,
    pub buf: u32,
}

/// FNV-1a 64 of a byte stream.
pub fn fnv1a64<'a>(bytes: impl IntoIterator<Item = &'a u8>) -> u64 {
    let mut h = FnvHasher::default();
    for &b in bytes {
        h.write_u8(b);
    }
    h.finish()
}

/// Register-only instruction semantics; `None` for anything touching memory or control flow.
pub fn alu(insn: &Instruction, regs: &[u32; NUM_REGS]) -> Option<u32> {
    let a = regs[insn.ra as usize];
    let b = regs[insn.rb as usize];
    Some(match insn.op {
        Opcode::Add => a.wrapping_add(b),
        Opcode::Sub => a.wrapping_sub(b),
        Opcode::Xor => a ^ b,
        Opcode::And => a & b,
        Opcode::Or => a | b,
        Opcode::Shl => a << (b & 31),
        Opcode::Shr => a >> (b & 31),
        Opcode::Mov => a,
        Opcode::Ldi => insn.imm as u32,
        Opcode::Lui => (insn.imm as u32) << 16 | (regs[insn.rd as usize] & 0xFFFF),
        _ => return None,
    })
}

#[derive(Debug, Clone)]
pub struct MachineState {
    regs: [u32; NUM_REGS],
    pc: ExtendedPc,
    mem: Memory,
    sds: SecretDomainStack,
    key: PtrEncKey,
    rng: SelectorRng,
    forced: VecDeque<u8>,
    /// Naming actually in effect: `n = 0` when PNS is off.
    naming: PhantomConfig,
    cfg: MachineConfig,
    uarch: Uarch,
    counters: CycleCounters,
    out: Vec<u32>,
    status: Status,
    trace: Option<Vec<ExtendedPc>>,
    hooks: Vec<(ContextHook, bool)>,
}

impl MachineState {
    /// Loads a validated image into a fresh machine.
    pub fn reset(image: &ProgramImage, seed: u64, cfg: MachineConfig) -> Result<Self, ConfigError> {
        image.validate(&cfg.phantom)?;
        Self::from_program(Program::new(image), seed, cfg)
    }

    /// Like `reset`, but the first selector draws (starting with the initial
    /// domain) are taken from `draws` instead of the RNG.
    pub fn reset_with_draws(
        image: &ProgramImage,
        seed: u64,
        cfg: MachineConfig,
        draws: impl IntoIterator<Item = u8>,
    ) -> Result<Self, ConfigError> {
        image.validate(&cfg.phantom)?;
        Self::start(Program::new(image), seed, cfg, draws.into_iter().collect())
    }

    /// Starts from an already decoded program, shared across machines.
    pub fn from_program(program: Arc<Program>, seed: u64, cfg: MachineConfig) -> Result<Self, ConfigError> {
        Self::start(program, seed, cfg, VecDeque::new())
    }

    fn start(program: Arc<Program>, seed: u64, cfg: MachineConfig, forced: VecDeque<u8>) -> Result<Self, ConfigError> {
        cfg.phantom.validate()?;
        cfg.uarch.validate().map_err(ConfigError::Uarch)?;
        if cfg.sds_capacity == 0 {
            return Err(ConfigError::SdsCapacity);
        }
        let on_off = |b: bool| if b { "enabled" } else { "disabled" };
        if cfg.features.traps != program.trap_mode {
            return Err(ConfigError::TrapMismatch {
                features: on_off(cfg.features.traps),
                image: on_off(program.trap_mode),
            });
        }
        let naming = PhantomConfig { n: if cfg.features.pns { cfg.phantom.n } else { 0 }, ..cfg.phantom };
        let mut m = MachineState {
            regs: [0; NUM_REGS],
            pc: ExtendedPc::default(),
            mem: Memory::new(program),
            sds: SecretDomainStack::new(cfg.sds_capacity),
            key: PtrEncKey::from_seed(seed),
            rng: SelectorRng::new(seed),
            forced,
            naming,
            cfg,
            uarch: Uarch::new(cfg.uarch, cfg.features.remap),
            counters: CycleCounters::default(),
            out: Vec::new(),
            status: Status::Running,
            trace: None,
            hooks: Vec::new(),
        };
        m.regs[SP as usize] = STACK_TOP;
        let entry = m.mem.program().entry;
        let p0 = m.draw();
        m.pc = phantom_name(entry, p0, &naming)?;
        Ok(m)
    }

    pub fn pc(&self) -> ExtendedPc {
        self.pc
    }

    pub fn regs(&self) -> &[u32; NUM_REGS] {
        &self.regs
    }

    pub fn set_reg(&mut self, r: u8, v: u32) {
        self.regs[r as usize] = v;
    }

    pub fn memory(&self) -> &Memory {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.mem
    }

    pub fn out_stream(&self) -> &[u32] {
        &self.out
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    /// Logical SDS depth (resident plus spilled entries).
    pub fn sds_depth(&self) -> usize {
        self.sds.depth()
    }

    /// Simulator-side view of the `i`-th SDS entry from the top, for
    /// oracle-driven experiments. Not reachable from guest code or the
    /// adversary primitives.
    pub(crate) fn sds_peek(&self, i: usize) -> Option<u8> {
        let mut copy = self.sds.clone();
        for _ in 0..i {
            copy.pop(&self.key)?;
        }
        copy.pop(&self.key)
    }

    /// Archetype address of the current PC.
    pub fn current_va(&self) -> Option<u32> {
        archetype(self.pc, &self.naming).ok()
    }

    /// Queues selector draws used before the RNG is consulted again.
    pub fn force_draws(&mut self, draws: impl IntoIterator<Item = u8>) {
        self.forced.extend(draws);
    }

    pub fn enable_commit_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    /// Extended PCs of committed instructions, in order.
    pub fn commit_trace(&self) -> Option<&[ExtendedPc]> {
        self.trace.as_deref()
    }

    pub fn enable_uarch_tracing(&mut self) {
        self.uarch.enable_tracing();
    }

    pub fn touched(&self) -> Option<&Touched> {
        self.uarch.touched()
    }

    pub fn add_hook(&mut self, hook: ContextHook) {
        self.hooks.push((hook, false));
    }

    fn draw(&mut self) -> u8 {
        if self.naming.n == 0 {
            return 0;
        }
        match self.forced.pop_front() {
            Some(p) => p & ((1u16 << self.naming.n) - 1) as u8,
            None => self.rng.draw_index(self.naming.n),
        }
    }

    fn raise(&mut self, kind: ExceptionKind, at: ExtendedPc) -> Exception {
        let e = Exception { kind, at };
        *self.counters.exceptions.entry(kind.as_str().to_string()).or_default() += 1;
        if kind == ExceptionKind::TrapExecuted {
            self.counters.traps_executed += 1;
        }
        self.status = Status::Excepted(e);
        e
    }

    /// Sequential successor in the same domain, stepping over an inserted trap.
    fn fall_through(&self, pc: ExtendedPc, va: u32) -> ExtendedPc {
        let next = va.wrapping_add(4);
        let step = if self.cfg.features.traps && self.mem.program().is_inserted_trap(next) { 8 } else { 4 };
        ExtendedPc::new(pc.p, pc.addr.wrapping_add(step))
    }

    /// Resolves a transfer at `pc`/`va` and returns the next PC. The BTB
    /// holds an already randomized target; a hit whose archetype matches is
    /// used as-is, otherwise a fresh draw is taken. Either way the entry is
    /// refilled with the next draw.
    fn transfer(
        &mut self,
        pc: ExtendedPc,
        va: u32,
        target_va: u32,
        taken: bool,
        conditional: bool,
        fall_through: ExtendedPc,
    ) -> Result<ExtendedPc, ExceptionKind> {
        let lookup = self.uarch.btb_access(pc, va);
        let predict_taken = !conditional || self.uarch.bdb.predict(va);
        let predicted = if predict_taken { lookup.s.then_some(lookup.predicted) } else { Some(fall_through) };
        let next = if taken {
            let here = phantom_name(target_va, pc.p, &self.naming).map_err(|_| ExceptionKind::FetchFault)?;
            let reuse = lookup.s && archetype(lookup.predicted, &self.naming) == Ok(target_va);
            let next = if reuse { lookup.predicted } else { self.select(here)? };
            let upcoming = self.select(here)?;
            self.uarch.btb_update(pc, va, upcoming);
            self.counters.cycles += self.cfg.uarch.fetch_extra_cycles;
            next
        } else {
            fall_through
        };
        if conditional {
            if predict_taken != taken {
                self.uarch.bdb_mispredicts += 1;
            }
            self.uarch.bdb.update(va, taken);
        }
        self.counters.cycles += self.uarch.charge_branch(predicted, next);
        Ok(next)
    }

    fn select(&mut self, target: ExtendedPc) -> Result<ExtendedPc, ExceptionKind> {
        let p = self.draw();
        selector_adjust(target, p, &self.naming).map_err(|_| ExceptionKind::FetchFault)
    }

    fn fire_hooks(&mut self, va: u32) -> Result<(), Exception> {
        let Some(i) = self.hooks.iter().position(|(h, fired)| !fired && h.at == va) else {
            return Ok(());
        };
        self.hooks[i].1 = true;
        let hook = self.hooks[i].0;
        match hook.op {
            ContextOp::Save => self.save_context(hook.buf),
            ContextOp::Restore => self.restore_context(hook.buf),
        }
    }

    /// Executes one instruction. Does nothing once halted or excepted.
    pub fn step(&mut self) -> Status {
        if self.status != Status::Running {
            return self.status;
        }
        if !self.hooks.is_empty() {
            if let Some(va) = self.current_va() {
                if self.fire_hooks(va).is_err() {
                    return self.status;
                }
            }
        }
        let pc = self.pc;
        if let Err(kind) = self.execute(pc) {
            let at = if kind == ExceptionKind::FetchFault && self.pc != pc { self.pc } else { pc };
            self.raise(kind, at);
        }
        self.status
    }

    fn execute(&mut self, pc: ExtendedPc) -> Result<(), ExceptionKind> {
        use ExceptionKind::*;
        let va = archetype(pc, &self.naming).map_err(|_| FetchFault)?;
        let itlb = self.uarch.itlb_access(pc, va);
        let icache = self.uarch.icache_access(pc, va);
        self.counters.cycles += 1 + itlb.cycles + icache.cycles;
        let insn = match self.mem.program().fetch(va) {
            None => return Err(FetchFault),
            Some(Err(_)) => return Err(DecodeFault),
            Some(Ok(i)) => i,
        };
        let seq = self.fall_through(pc, va);
        let (rd, ra, rb) = (insn.rd as usize, insn.ra as usize, insn.rb as usize);
        let mut next = seq;
        match insn.op {
            Opcode::Trap => return Err(TrapExecuted),
            Opcode::Halt => self.status = Status::Halted,
            Opcode::Nop => {}
            Opcode::Out => self.out.push(self.regs[rd]),
            Opcode::Ld => {
                let addr = self.regs[ra].wrapping_add(insn.imm as u32);
                self.regs[rd] = self.mem.load_word(addr).ok_or(MemFault)?;
            }
            Opcode::St => {
                let addr = self.regs[ra].wrapping_add(insn.imm as u32);
                self.mem.store_word(addr, self.regs[rd]).ok_or(MemFault)?;
            }
            Opcode::Encp | Opcode::Decp => {
                if insn.op == Opcode::Encp {
                    self.counters.encp += 1;
                } else {
                    self.counters.decp += 1;
                }
                if self.cfg.features.ptrenc {
                    let v = self.regs[rd];
                    self.regs[rd] = if insn.op == Opcode::Encp {
                        cipher::encrypt(v, &self.key)
                    } else {
                        cipher::decrypt(v, &self.key)
                    };
                    self.counters.cycles += CRYPTO_CYCLES - 1;
                }
            }
            Opcode::Jmp => {
                let t = insn.direct_target(va).unwrap();
                next = self.transfer(pc, va, t, true, false, seq)?;
            }
            Opcode::Jr => next = self.transfer(pc, va, self.regs[ra], true, false, seq)?,
            Opcode::Beq | Opcode::Bne => {
                let eq = self.regs[ra] == self.regs[rb];
                let taken = eq == (insn.op == Opcode::Beq);
                let t = insn.direct_target(va).unwrap();
                next = self.transfer(pc, va, t, taken, true, seq)?;
            }
            Opcode::Call | Opcode::Callr => {
                let target = if insn.op == Opcode::Call { insn.direct_target(va).unwrap() } else { self.regs[ra] };
                // seq.addr is already return_va - p*delta
                let sp = self.regs[SP as usize].wrapping_sub(4);
                self.mem.store_word(sp, seq.addr).ok_or(MemFault)?;
                self.regs[SP as usize] = sp;
                if self.cfg.features.pns {
                    self.sds.push(pc.p, &self.key);
                }
                self.uarch.ras.push(seq);
                next = self.transfer(pc, va, target, true, false, seq)?;
            }
            Opcode::Ret => {
                let sp = self.regs[SP as usize];
                let v = self.mem.load_word(sp).ok_or(MemFault)?;
                let p = if self.cfg.features.pns { self.sds.pop(&self.key).ok_or(SdsUnderflow)? } else { 0 };
                self.regs[SP as usize] = sp.wrapping_add(4);
                next = ExtendedPc::new(p, v);
                let predicted = self.uarch.ras.pop();
                if predicted != Some(next) {
                    self.uarch.ras_mispredicts += 1;
                }
                self.counters.cycles += self.uarch.charge_branch(predicted, next);
            }
            _ => self.regs[rd] = alu(&insn, &self.regs).expect("remaining opcodes are register ops"),
        }
        self.counters.committed += 1;
        if let Some(t) = &mut self.trace {
            t.push(pc);
        }
        self.pc = next;
        Ok(())
    }

    fn context_words(&self) -> Vec<u32> {
        let mut w: Vec<u32> = self.regs.to_vec();
        w.push(self.current_va().unwrap_or(0));
        w.push(self.sds.depth() as u32);
        let check = fnv1a64(w.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>().iter()) as u32;
        w.push(check);
        w
    }

    /// Stores an encrypted snapshot of the registers, resume point and SDS depth at `buf`.
    pub fn save_context(&mut self, buf: u32) -> Result<(), Exception> {
        let pc = self.pc;
        let mut words = self.context_words();
        cipher::ctr_apply(&self.key, buf, &mut words);
        self.counters.cycles += CRYPTO_CYCLES;
        for (i, &w) in words.iter().enumerate() {
            if self.mem.store_word(buf.wrapping_add(4 * i as u32), w).is_none() {
                return Err(self.raise(ExceptionKind::MemFault, pc));
            }
        }
        Ok(())
    }

    /// Reinstates a snapshot written by `save_context`, truncating the SDS to
    /// the saved depth and resuming in a freshly drawn domain.
    pub fn restore_context(&mut self, buf: u32) -> Result<(), Exception> {
        let pc = self.pc;
        self.counters.cycles += CRYPTO_CYCLES;
        let mut words = Vec::with_capacity(CONTEXT_WORDS as usize);
        for i in 0..CONTEXT_WORDS {
            match self.mem.load_word(buf.wrapping_add(4 * i)) {
                Some(w) => words.push(w),
                None => return Err(self.raise(ExceptionKind::MemFault, pc)),
            }
        }
        cipher::ctr_apply(&self.key, buf, &mut words);
        let check = fnv1a64(words[..18].iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>().iter()) as u32;
        let depth = words[17] as usize;
        if check != words[18] || depth > self.sds.depth() {
            return Err(self.raise(ExceptionKind::MemFault, pc));
        }
        self.regs.copy_from_slice(&words[..NUM_REGS]);
        self.sds.truncate(depth, &self.key);
        let resume = phantom_name(words[16], pc.p, &self.naming)
            .map_err(|_| ExceptionKind::FetchFault)
            .and_then(|t| self.select(t));
        match resume {
            Ok(next) => {
                self.pc = next;
                Ok(())
            }
            Err(kind) => Err(self.raise(kind, pc)),
        }
    }

    /// FNV-1a 64 over the registers (little-endian) and then the image's
    /// writable bytes in address order.
    pub fn digest(&self) -> u64 {
        let regs: Vec<u8> = self.regs.iter().flat_map(|r| r.to_le_bytes()).collect();
        fnv1a64(regs.iter().chain(self.mem.image_data_bytes()))
    }

    pub fn counters(&self) -> CycleCounters {
        let u = &self.uarch;
        CycleCounters {
            btb_hits: u.btb.hits,
            btb_misses: u.btb.misses,
            bdb_mispredicts: u.bdb_mispredicts,
            ras_mispredicts: u.ras_mispredicts,
            branch_mispredicts: u.branch_mispredicts,
            icache_hits: u.icache.hits,
            icache_misses: u.icache.misses,
            itlb_hits: u.itlb.hits,
            itlb_misses: u.itlb.misses,
            sds_spills: self.sds.spills,
            sds_fills: self.sds.fills,
            ..self.counters.clone()
        }
    }

    /// Steps until the PC's archetype equals `va` (before executing it),
    /// the machine stops, or the budget runs out. Returns whether `va` was reached.
    pub fn run_until(&mut self, va: u32, max_cycles: u64) -> bool {
        while self.status == Status::Running && self.counters.cycles < max_cycles {
            if self.current_va() == Some(va) {
                return true;
            }
            self.step();
        }
        false
    }

    /// Runs until halt, exception or `max_cycles`. On budget exhaustion the
    /// machine is stopped at the budget cycle; an instruction in flight at
    /// that point still counts as committed.
    pub fn run(&mut self, max_cycles: u64) -> RunResult {
        assert!(max_cycles > 0, "cycle budget must be positive");
        while self.status == Status::Running && self.counters.cycles < max_cycles {
            self.step();
        }
        let termination = match self.status {
            Status::Running => {
                self.counters.cycles = self.counters.cycles.min(max_cycles);
                Termination::BudgetExceeded
            }
            Status::Halted => Termination::Halt,
            Status::Excepted(_) => Termination::Exception,
        };
        self.result(termination)
    }

    fn result(&self, termination: Termination) -> RunResult {
        let counters = self.counters();
        RunResult {
            termination,
            cycles: counters.cycles,
            committed: counters.committed,
            out: self.out.clone(),
            digest: self.digest(),
            counters,
            exception: match self.status {
                Status::Excepted(e) => Some(e),
                _ => None,
            },
        }
    }
}
