//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::process::Command;
use std::time::Instant;

use pns::attack::stats::proportion_sigma;
use pns::attack::victims::{nop_sled_victim_source, stack_victim_source, DEMO_CHAINS, NESTING, SLED_CHAIN};
use pns::attack::{
    catalog, run_attack_matrix, run_campaign, run_trial, AttackKind, AttackSpec, GuessMode, Outcome,
    Slot, Victim,
};
use pns::corpus;
use pns::gadgets::{chain_survival, resolve_chains, OFFSETS};
use pns::image::{insert_traps, ProgramImage};
use pns::machine::cipher::{decrypt, encrypt};
use pns::machine::{CycleCounters, MachineConfig, MachineState, PtrEncKey, Termination};
use pns::phantom::{
    analytic_success_probability, archetype, phantom_name, selector_adjust, ExtendedPc, PhantomConfig, SelectorRng,
};
use pns::uarch::RemapToggles;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

const BUDGET: u64 = 2_000_000;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn machine(n: u8) -> MachineConfig {
    MachineConfig { phantom: PhantomConfig { n, delta: 4 }, ..MachineConfig::default() }
}

fn spec(kind: AttackKind, gadgets: &[&str], trigger: &str, guesses: GuessMode) -> AttackSpec {
    AttackSpec {
        kind,
        gadgets: gadgets.iter().map(|s| s.to_string()).collect(),
        guesses,
        trigger: trigger.into(),
        slot: Slot::Stack,
    }
}

fn stack_victim() -> Victim {
    Victim::build("stack", stack_victim_source(NESTING))
}

fn chain_spec(p: u32, guesses: GuessMode) -> AttackSpec {
    match p {
        1 => spec(AttackKind::Ret2libc, &["win"], "vuln_ret", guesses),
        2 => spec(AttackKind::RopChain, &["g_ab", "g_out"], "vuln_ret", guesses),
        _ => spec(AttackKind::RopChain, &["g_a", "g_b", "g_out"], "vuln_ret", guesses),
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}

fn c1_analytic() -> Check {
    let mut parts = Vec::new();
    for (p, want) in [(13, 4.93e-32), (6, 3.55e-15), (5, 9.09e-13), (1, 0.0039)] {
        let got = analytic_success_probability(256, p);
        let e = rel_err(got, want);
        ensure(e <= 0.01, format!("(256,{p}) = {got:e}, want {want:e} ({:.3}% off)", e * 100.0))?;
        parts.push(format!("(256,{p})={got:.3e}"));
    }
    Ok(parts.join(" "))
}

fn c2_monte_carlo() -> Check {
    let v = stack_victim();
    let mut parts = Vec::new();
    for (n, p, trials) in [(1u8, 1u32, 100_000u64), (2, 1, 100_000), (2, 2, 100_000), (4, 2, 100_000), (8, 1, 1_000_000)] {
        let r = run_campaign(&v, &chain_spec(p, GuessMode::Uniform), trials, 1000 * n as u64 + p as u64, &machine(n), BUDGET)
            .map_err(|e| e.to_string())?;
        let z = r.z.ok_or("undefined z")?;
        let big_n = 1u32 << n;
        ensure(z.abs() <= 4.0, format!("(N={big_n},P={p}) z={z:.2} rate={}", r.empirical_rate))?;
        parts.push(format!("({big_n},{p}) z={z:+.2}"));
    }
    let r = run_campaign(&v, &chain_spec(2, GuessMode::Uniform), 10_000, 7_000, &machine(8), BUDGET)
        .map_err(|e| e.to_string())?;
    ensure(r.successes <= 3, format!("(256,2) {} successes > 3", r.successes))?;
    parts.push(format!("(256,2) {} successes", r.successes));
    Ok(parts.join(" "))
}

fn images(name: &str) -> (ProgramImage, ProgramImage) {
    let plain = corpus::image(name).unwrap().unwrap();
    let trapped = insert_traps(&plain).unwrap();
    (plain, trapped)
}

fn c3_correctness() -> Check {
    let mut runs = 0;
    for (name, _) in corpus::PROGRAMS {
        let (plain, trapped) = images(name);
        let mut base = machine(0);
        base.features.pns = false;
        let reference = MachineState::reset(&plain, 0, base.for_image(&plain)).unwrap().run(BUDGET);
        ensure(reference.termination == Termination::Halt, format!("{name}: reference did not halt"))?;
        for img in [&plain, &trapped] {
            for setting in [None, Some(1u8), Some(2), Some(4), Some(8)] {
                let mut cfg = machine(setting.unwrap_or(0)).for_image(img);
                cfg.features.pns = setting.is_some();
                for seed in 0..10 {
                    let r = MachineState::reset(img, seed, cfg).unwrap().run(BUDGET);
                    runs += 1;
                    ensure(
                        r.termination == Termination::Halt && r.out == reference.out && r.digest == reference.digest,
                        format!("{name}: traps={} n={setting:?} seed={seed} diverged", img.trap_mode),
                    )?;
                }
            }
        }
    }
    Ok(format!("{} programs, {runs} runs identical", corpus::PROGRAMS.len()))
}

fn c4_selector() -> Check {
    let cfg = machine(8).phantom;
    let pc_new = 0x0001_0000;
    let target = ExtendedPc::new(5, pc_new);
    let a = selector_adjust(target, 8, &cfg).map_err(|e| e.to_string())?;
    let b = selector_adjust(target, 2, &cfg).map_err(|e| e.to_string())?;
    ensure(a == ExtendedPc::new(8, pc_new - 12), format!("p_next=8 gave {a}"))?;
    ensure(b == ExtendedPc::new(2, pc_new + 12), format!("p_next=2 gave {b}"))?;
    Ok(format!("{a} {b}"))
}

fn c5_name_map() -> Check {
    let cfg = PhantomConfig { n: 8, delta: 2 };
    let va = archetype(ExtendedPc::new(2, 0x00BB_FFF4), &cfg).map_err(|e| e.to_string())?;
    ensure(va == 0x00BB_FFF8, format!("archetype gave {va:#010x}"))?;
    let cfg = PhantomConfig { n: 8, delta: 4 };
    let mut rng = SelectorRng::new(5);
    let mut failures = 0;
    for _ in 0..1_000_000 {
        let p = rng.draw_index(8);
        let va = (rng.next_u64() as u32).max(255 * 4);
        let ok = phantom_name(va, p, &cfg).and_then(|e| archetype(e, &cfg)).is_ok_and(|back| back == va);
        failures += !ok as u32;
    }
    ensure(failures == 0, format!("{failures} inverse failures"))?;
    Ok("archetype({2, 0x00bbfff4}) = 0x00bbfff8, 10^6 round trips".into())
}

fn c6_traps() -> Check {
    let v = stack_victim();
    let forced = run_campaign(&v, &chain_spec(1, GuessMode::ForcedOffset(-1)), 10_000, 0, &machine(8), BUDGET)
        .map_err(|e| e.to_string())?;
    ensure(forced.trap_hits == 10_000, format!("k=-1: {} of 10^4 trapped", forced.trap_hits))?;
    let r = run_campaign(&v, &chain_spec(1, GuessMode::Uniform), 100_000, 50_000, &machine(8), BUDGET)
        .map_err(|e| e.to_string())?;
    let n = 256.0;
    let expected = (1.0 / n) / (1.0 - 1.0 / n);
    let failures = r.failures();
    let share = r.trap_first_landing as f64 / failures as f64;
    let sigma = proportion_sigma(expected, failures);
    let dev = (share - expected) / sigma;
    ensure(dev.abs() <= 4.0, format!("trap share {share:.5} vs {expected:.5} ({dev:+.2} sigma)"))?;
    Ok(format!("forced 10000/10000 trapped; share {share:.5} vs {expected:.5} ({dev:+.2} sigma)"))
}

fn traced(img: &ProgramImage, cfg: MachineConfig) -> MachineState {
    let mut m = MachineState::reset(img, 3, cfg.for_image(img)).unwrap();
    m.enable_uarch_tracing();
    m.run(BUDGET);
    m
}

/// Counters over the second half of a run.
fn steady_state(img: &ProgramImage, cfg: MachineConfig) -> CycleCounters {
    let total = MachineState::reset(img, 3, cfg.for_image(img)).unwrap().run(BUDGET).committed;
    let mut m = MachineState::reset(img, 3, cfg.for_image(img)).unwrap();
    while m.counters().committed < total / 2 {
        m.step();
    }
    let warm = m.counters();
    let end = m.run(BUDGET).counters;
    CycleCounters {
        btb_hits: end.btb_hits - warm.btb_hits,
        btb_misses: end.btb_misses - warm.btb_misses,
        icache_misses: end.icache_misses - warm.icache_misses,
        icache_hits: end.icache_hits - warm.icache_hits,
        ..end
    }
}

fn c7_capacity() -> Check {
    for (name, _) in corpus::PROGRAMS {
        let (_, img) = images(name);
        let a = traced(&img, machine(0));
        let b = traced(&img, machine(8));
        let (ta, tb) = (a.touched().unwrap(), b.touched().unwrap());
        ensure(ta.btb == tb.btb && ta.icache == tb.icache && ta.itlb == tb.itlb, format!("{name}: touched sets differ"))?;
    }
    let (_, rich) = images("branch_rich");
    let on = steady_state(&rich, machine(8));
    let mut off_cfg = machine(8);
    off_cfg.features.remap = RemapToggles::all(false);
    let off = steady_state(&rich, off_cfg);
    ensure(
        off.btb_misses > on.btb_misses && off.icache_misses > on.icache_misses,
        format!("remap off btb {} icache {} vs on btb {} icache {}", off.btb_misses, off.icache_misses, on.btb_misses, on.icache_misses),
    )?;
    let (_, lp) = images("loop_sum");
    let rate = |c: &CycleCounters| c.btb_hits as f64 / (c.btb_hits + c.btb_misses) as f64;
    let (l0, l8) = (steady_state(&lp, machine(0)), steady_state(&lp, machine(8)));
    ensure(rate(&l0) == rate(&l8), format!("loop BTB hit rate {} (n=0) vs {} (n=8)", rate(&l0), rate(&l8)))?;
    Ok(format!(
        "touched equal on {} programs; branch_rich misses off/on btb {}/{} icache {}/{}; loop hit rate {:.4}",
        corpus::PROGRAMS.len(),
        off.btb_misses,
        on.btb_misses,
        off.icache_misses,
        on.icache_misses,
        rate(&l8)
    ))
}

fn c8_sds() -> Check {
    let (_, deep) = images("deep_300");
    let mut off = machine(8).for_image(&deep);
    off.features.pns = false;
    let reference = MachineState::reset(&deep, 0, off).unwrap().run(BUDGET);
    let r = MachineState::reset(&deep, 0, machine(8).for_image(&deep)).unwrap().run(BUDGET);
    ensure(r.termination == Termination::Halt, "depth 300 did not halt")?;
    ensure(r.digest == reference.digest, "depth 300 digest differs from pns-off")?;
    ensure(r.counters.sds_spills >= 1, "depth 300 never spilled")?;
    let (_, shallow) = images("deep_244");
    let s = MachineState::reset(&shallow, 0, machine(8).for_image(&shallow)).unwrap().run(BUDGET);
    ensure(s.termination == Termination::Halt && s.counters.sds_spills == 0, "depth 244 spilled or failed")?;
    Ok(format!("depth 300: {} spills, {} fills; depth 244: 0 spills", r.counters.sds_spills, r.counters.sds_fills))
}

fn names(chains: &[&[&str]]) -> Vec<Vec<String>> {
    chains.iter().map(|c| c.iter().map(|s| s.to_string()).collect()).collect()
}

fn c9_gadgets() -> Check {
    let cfg = machine(8);
    let demo = stack_victim();
    let sled = Victim::build("nop_sled", nop_sled_victim_source(NESTING));
    let demo_chains: Vec<&[&str]> = DEMO_CHAINS.to_vec();
    let mut summary = Vec::new();
    for (v, chains, want_alive) in [(&demo, demo_chains, false), (&sled, vec![SLED_CHAIN], true)] {
        let resolved = resolve_chains(&names(&chains), &v.image).map_err(|e| e.to_string())?;
        let report = chain_survival(&resolved, cfg.phantom.delta, &v.image).map_err(|e| e.to_string())?;
        let alive = report.chains_after;
        if want_alive {
            ensure(alive >= 1, "nop sled chain did not survive")?;
        } else {
            ensure(alive == 0, format!("{alive} demo chains survive"))?;
        }
        summary.push(format!("{}: {}/{}", v.name, report.chains_after, report.chains_before));
        for (chain, gadgets) in report.per_chain.iter().zip(&chains) {
            for k in OFFSETS {
                let s = spec(AttackKind::RopChain, gadgets, "vuln_ret", GuessMode::ForcedOffset(k));
                for seed in 0..20 {
                    let r = run_trial(v, &s, seed, &cfg, BUDGET).map_err(|e| e.to_string())?;
                    ensure(
                        (r.outcome == Outcome::Success) == chain.survives(k),
                        format!("{gadgets:?} k={k} seed={seed}: trial {:?} vs analysis {}", r.outcome, chain.survives(k)),
                    )?;
                }
            }
        }
    }
    Ok(format!("after/before {}; cross-check consistent", summary.join(", ")))
}

fn c10_matrix() -> Check {
    let cat = catalog();
    ensure(cat.cells.len() >= 8, "fewer than 8 cells")?;
    let report = run_attack_matrix(&cat, &machine(8), 10_000, 11, BUDGET).map_err(|e| e.to_string())?;
    for c in &report.cells {
        ensure(c.baseline_success, format!("{} {} fails at baseline: {:?}", c.vector, c.payload, c.baseline_outcome))?;
        ensure(
            c.mitigated,
            format!("{} {} not mitigated: {} successes > {}", c.vector, c.payload, c.pns.successes, c.pns.poisson_bound),
        )?;
    }
    Ok(format!("{} cells: all succeed without phantoms, all mitigated at n=8", report.cells.len()))
}

fn c11_ptrenc() -> Check {
    let key = PtrEncKey::from_seed(99);
    let mut rng = SelectorRng::new(1);
    for _ in 0..100_000 {
        let v = rng.next_u64() as u32;
        ensure(decrypt(encrypt(v, &key), &key) == v, format!("round trip failed for {v:#x}"))?;
    }
    let cat = catalog();
    let mut parts = Vec::new();
    for cell in cat.cells.iter().filter(|c| c.spec.kind == AttackKind::FptrHijack) {
        let v = &cat.victims[&cell.victim];
        let on = run_campaign(v, &cell.spec, 100_000, 0, &machine(8), BUDGET).map_err(|e| e.to_string())?;
        ensure(on.within_poisson_bound(), format!("{}: {} successes with ptrenc", cell.vector, on.successes))?;
        let mut off_cfg = machine(8);
        off_cfg.features.ptrenc = false;
        let off = run_campaign(v, &cell.spec, 10_000, 0, &off_cfg, BUDGET).map_err(|e| e.to_string())?;
        let tol = 4.0 * proportion_sigma(off.analytic_rate, off.trials).max(1.0 / off.trials as f64);
        ensure(
            (off.empirical_rate - off.analytic_rate).abs() <= tol,
            format!("{}: ptrenc off rate {} vs {}", cell.vector, off.empirical_rate, off.analytic_rate),
        )?;
        parts.push(format!("{}: on {}/{} off rate {}", cell.vector, on.successes, on.trials, off.empirical_rate));
    }
    Ok(format!("10^5 round trips; {}", parts.join("; ")))
}

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pns")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("pns {args:?} exited {:?}", out.status.code()))?;
    Ok(out.stdout)
}

fn c12_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    cli(&["export", &p("")])?;
    let commands: Vec<Vec<String>> = vec![
        vec!["attack".into(), p("victims/stack.json"), "--spec".into(), p("specs/stack_return_rop_2.json"), "--trials".into(), "20000".into(), "--seed".into(), "5".into()],
        vec!["attack".into(), "--matrix".into(), p("catalog.json"), "--trials".into(), "500".into(), "--seed".into(), "3".into()],
        vec!["gadgets".into(), p("victims/stack.json"), "--chains".into(), p("chains/demo.json")],
        vec!["run".into(), p("corpus/fib_rec.traps.json"), "--config".into(), p("config.json")],
    ];
    for c in &commands {
        let args: Vec<&str> = c.iter().map(String::as_str).collect();
        let a = cli(&args)?;
        let b = cli(&args)?;
        ensure(a == b, format!("{:?} differs between runs", c[0]))?;
    }
    let v = stack_victim();
    let s = chain_spec(2, GuessMode::Uniform);
    let in_pool = |threads: usize| -> Result<String, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        let r = pool.install(|| run_campaign(&v, &s, 20_000, 5, &machine(4), BUDGET)).map_err(|e| e.to_string())?;
        Ok(serde_json::to_string(&r).unwrap())
    };
    ensure(in_pool(1)? == in_pool(4)?, "campaign JSON depends on thread count")?;
    Ok(format!("{} CLI commands byte-identical; campaign JSON equal on 1 and 4 threads", commands.len()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("analytic success probability", c1_analytic),
        ("monte carlo vs analytic", c2_monte_carlo),
        ("structured-programming correctness", c3_correctness),
        ("selector worked example", c4_selector),
        ("name map golden and inverse", c5_name_map),
        ("trap mechanics", c6_traps),
        ("capacity under remapping", c7_capacity),
        ("secret domain stack sizing", c8_sds),
        ("gadget chain survival", c9_gadgets),
        ("attack matrix", c10_matrix),
        ("pointer encryption", c11_ptrenc),
        ("determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
