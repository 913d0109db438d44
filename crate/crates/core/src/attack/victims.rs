//! Generated victim programs with planted vulnerabilities and gadgets, and
//! the attack matrix built on them.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::image::{assemble, insert_traps, ProgramImage};
use crate::machine::Program;

use super::{AttackKind, AttackSpec, GuessMode, Slot};

/// Output of every victim when left alone.
pub const BENIGN_OUT: u32 = 0x600D;
/// Instructions of faulting filler on each side of a gadget.
const ISLAND: usize = 256;

pub const SET_SENTINEL: &str = "ldi r1, -16162; lui r1, 0x1337; ret";
pub const OUT_R1: &str = "out r1; ret";

/// A `ld` from an unaligned address: any landing here faults at once
/// without ending a basic block, so no traps are planted inside the island.
fn island(src: &mut String) {
    for _ in 0..ISLAND {
        src.push_str("        ld r0, 1(r0)\n");
    }
    src.push_str("        halt\n");
}

fn call_chain(src: &mut String, depth: usize, callee: &str) {
    for i in 1..=depth {
        let next = if i == depth { callee.to_string() } else { format!("c{}", i + 1) };
        writeln!(src, "c{i}:     call {next}\n        ret").unwrap();
    }
}

fn prologue(src: &mut String, setup: &str) {
    src.push_str("_start: ldi r1, 0\n");
    src.push_str(setup);
    src.push_str("        call c1\n        ldi r2, 0x600d\n        out r2\n        halt\n");
}

/// Gadgets, each behind its own island, with the return-to-function target
/// `win` last in the text so that nothing but its own trap lies within a
/// phantom shift of it.
fn gadget_zone(src: &mut String) {
    for (label, body) in [
        ("g_a", "ldi r1, -16162\n        ret"),
        ("g_b", "lui r1, 0x1337\n        ret"),
        ("g_ab", "ldi r1, -16162\n        lui r1, 0x1337\n        ret"),
        ("g_out", "out r1\n        ret"),
    ] {
        island(src);
        writeln!(src, "{label}:   {body}").unwrap();
    }
    island(src);
    src.push_str("win:    ldi r1, -16162\n        lui r1, 0x1337\n        out r1\n        halt\n");
}

/// Return-address smash in a leaf reached through `depth` nested calls.
pub fn stack_victim_source(depth: usize) -> String {
    let mut s = String::new();
    prologue(&mut s, "");
    call_chain(&mut s, depth, "vuln");
    s.push_str("vuln:   ldi r3, 1\n        nop\nvuln_ret: ret\n");
    gadget_zone(&mut s);
    s
}

/// The same smash at the bottom of a recursion.
pub fn recursive_victim_source(depth: usize) -> String {
    let mut s = String::new();
    writeln!(s, "_start: ldi r1, 0\n        ldi r4, {depth}\n        call rec").unwrap();
    s.push_str("        ldi r2, 0x600d\n        out r2\n        halt\n");
    s.push_str("rec:    ldi r3, 0\n        beq r4, r3, leaf\n        ldi r3, 1\n        sub r4, r4, r3\n        call rec\n        ret\n");
    s.push_str("leaf:   nop\nleaf_ret: ret\n");
    gadget_zone(&mut s);
    s
}

/// Encrypted function pointer in a data slot, used through CALLR.
pub fn data_fptr_victim_source(depth: usize) -> String {
    let mut s = String::new();
    prologue(&mut s, "        ldi r5, fptr\n        ld r6, 0(r5)\n        encp r6\n        st r6, 0(r5)\n");
    call_chain(&mut s, depth, "user");
    s.push_str("user:   ldi r5, fptr\nuse:    ld r6, 0(r5)\n        decp r6\n        callr r6\n        ret\n");
    s.push_str("handler: ldi r7, 1\n        ret\n");
    gadget_zone(&mut s);
    s.push_str(".data\nfptr:   .word handler\n");
    s
}

/// Encrypted function pointer kept in a stack local.
pub fn stack_fptr_victim_source(depth: usize) -> String {
    let mut s = String::new();
    prologue(&mut s, "");
    call_chain(&mut s, depth, "user");
    s.push_str(
        "user:   ldi r9, -4\n        add sp, sp, r9\n        ldi r6, handler\n        encp r6\n        st r6, 0(sp)\n        nop\n\
use:    ld r6, 0(sp)\n        decp r6\n        callr r6\n        ldi r9, 4\n        add sp, sp, r9\n        ret\n",
    );
    s.push_str("handler: ldi r7, 1\n        ret\n");
    gadget_zone(&mut s);
    s
}

/// Control victim whose only gadget sits inside a NOP sled, so shifted
/// landings still execute the same effects.
pub fn nop_sled_victim_source(depth: usize) -> String {
    let mut s = String::new();
    prologue(&mut s, "");
    call_chain(&mut s, depth, "vuln");
    s.push_str("vuln:   ldi r3, 1\n        nop\nvuln_ret: ret\n");
    island(&mut s);
    for _ in 0..8 {
        s.push_str("        nop\n");
    }
    s.push_str("sled_g: nop\n        ldi r1, -16162\n        lui r1, 0x1337\n        out r1\n        ret\n");
    island(&mut s);
    s
}

#[derive(Debug, Clone)]
pub struct Victim {
    pub name: String,
    pub source: String,
    /// Trap-instrumented image.
    pub image: ProgramImage,
    pub program: Arc<Program>,
}

impl Victim {
    pub fn build(name: &str, source: String) -> Self {
        let plain = assemble(&source).unwrap_or_else(|e| panic!("victim {name}: {e}"));
        let image = insert_traps(&plain).unwrap_or_else(|e| panic!("victim {name}: {e}"));
        Victim::from_image(name, source, image)
    }

    pub fn from_image(name: &str, source: String, image: ProgramImage) -> Self {
        let program = Program::new(&image);
        Victim { name: name.to_string(), source, image, program }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixCell {
    pub vector: String,
    pub payload: String,
    pub victim: String,
    pub spec: AttackSpec,
}

#[derive(Debug, Clone)]
pub struct VictimCatalog {
    pub victims: BTreeMap<String, Victim>,
    pub cells: Vec<MatrixCell>,
}

pub const NESTING: usize = 6;

fn chain(kind: AttackKind, gadgets: &[&str], trigger: &str, slot: Slot) -> AttackSpec {
    AttackSpec {
        kind,
        gadgets: gadgets.iter().map(|s| s.to_string()).collect(),
        guesses: GuessMode::Uniform,
        trigger: trigger.to_string(),
        slot,
    }
}

/// Standard victims and the attack matrix over them.
pub fn catalog() -> VictimCatalog {
    let victims: BTreeMap<String, Victim> = [
        ("stack", stack_victim_source(NESTING)),
        ("recursive", recursive_victim_source(NESTING)),
        ("data_fptr", data_fptr_victim_source(NESTING)),
        ("stack_fptr", stack_fptr_victim_source(NESTING)),
        ("nop_sled", nop_sled_victim_source(NESTING)),
    ]
    .into_iter()
    .map(|(n, s)| (n.to_string(), Victim::build(n, s)))
    .collect();

    use AttackKind::*;
    let cell = |vector: &str, payload: &str, victim: &str, spec: AttackSpec| MatrixCell {
        vector: vector.into(),
        payload: payload.into(),
        victim: victim.into(),
        spec,
    };
    let cells = vec![
        cell("stack_return", "ret2libc", "stack", chain(Ret2libc, &["win"], "vuln_ret", Slot::Stack)),
        cell("stack_return", "rop_2", "stack", chain(RopChain, &["g_ab", "g_out"], "vuln_ret", Slot::Stack)),
        cell("stack_return", "rop_3", "stack", chain(RopChain, &["g_a", "g_b", "g_out"], "vuln_ret", Slot::Stack)),
        cell("stack_return", "jitrop_2", "stack", chain(JitropChain, &[SET_SENTINEL, OUT_R1], "vuln_ret", Slot::Stack)),
        cell("recursive_return", "ret2libc", "recursive", chain(Ret2libc, &["win"], "leaf_ret", Slot::Stack)),
        cell("recursive_return", "rop_3", "recursive", chain(RopChain, &["g_a", "g_b", "g_out"], "leaf_ret", Slot::Stack)),
        cell("recursive_return", "jitrop_2", "recursive", chain(JitropChain, &[SET_SENTINEL, OUT_R1], "leaf_ret", Slot::Stack)),
        cell("data_pointer", "fptr_hijack", "data_fptr", chain(FptrHijack, &["win"], "use", Slot::Symbol("fptr".into()))),
        cell("stack_pointer", "fptr_hijack", "stack_fptr", chain(FptrHijack, &["win"], "use", Slot::Stack)),
    ];
    VictimCatalog { victims, cells }
}

/// Gadget chains of the demo victim, by symbol.
pub const DEMO_CHAINS: [&[&str]; 2] = [&["g_ab", "g_out"], &["g_a", "g_b", "g_out"]];
/// The NOP-sled control chain.
pub const SLED_CHAIN: &[&str] = &["sled_g"];
