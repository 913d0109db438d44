//! Bundled assembly programs used by the correctness and capacity suites.

use crate::image::{assemble, AssemblyError, ProgramImage};

pub const PROGRAMS: &[(&str, &str)] = &[
    ("hello", include_str!("../corpus/hello.s")),
    ("loop_sum", include_str!("../corpus/loop_sum.s")),
    ("fib_iter", include_str!("../corpus/fib_iter.s")),
    ("factorial", include_str!("../corpus/factorial.s")),
    ("fib_rec", include_str!("../corpus/fib_rec.s")),
    ("indirect_calls", include_str!("../corpus/indirect_calls.s")),
    ("jump_table", include_str!("../corpus/jump_table.s")),
    ("deep_300", include_str!("../corpus/deep_300.s")),
    ("deep_244", include_str!("../corpus/deep_244.s")),
    ("bubble_sort", include_str!("../corpus/bubble_sort.s")),
    ("gcd", include_str!("../corpus/gcd.s")),
    ("nested_loops", include_str!("../corpus/nested_loops.s")),
    ("call_tree", include_str!("../corpus/call_tree.s")),
    ("branch_rich", include_str!("../corpus/branch_rich.s")),
];

pub fn source(name: &str) -> Option<&'static str> {
    PROGRAMS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn image(name: &str) -> Option<Result<ProgramImage, AssemblyError>> {
    source(name).map(assemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::insert_traps;
    use crate::machine::{MachineConfig, MachineState, Termination};

    fn run(name: &str) -> Vec<u32> {
        let img = image(name).unwrap().unwrap();
        let r = MachineState::reset(&img, 1, MachineConfig::default().for_image(&img)).unwrap().run(10_000_000);
        assert_eq!(r.termination, Termination::Halt, "{name}");
        r.out
    }

    #[test]
    fn all_assemble_and_rewrite() {
        assert!(PROGRAMS.len() >= 10);
        for (name, src) in PROGRAMS {
            let img = assemble(src).unwrap_or_else(|e| panic!("{name}: {e}"));
            insert_traps(&img).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn expected_outputs() {
        assert_eq!(run("hello"), vec![80, 78, 83, 33]);
        assert_eq!(run("loop_sum"), vec![5050]);
        assert_eq!(run("fib_iter")[23], 28657);
        assert_eq!(run("factorial"), vec![40320]);
        assert_eq!(run("fib_rec"), vec![377]);
        assert_eq!(run("indirect_calls"), vec![10, 11, 121]);
        assert_eq!(run("jump_table"), vec![2222]);
        assert_eq!(run("deep_300"), vec![300]);
        assert_eq!(run("deep_244"), vec![244]);
        assert_eq!(run("bubble_sort"), vec![1, 3, 7, 19, 23, 42, 56, 88]);
        assert_eq!(run("gcd"), vec![21, 6, 1]);
        assert_eq!(run("nested_loops"), vec![500]);
        assert_eq!(run("call_tree"), vec![9]);
        assert_eq!(run("branch_rich").len(), 1);
    }
}
