//! Fence-insertion and speculation-blocking transformations.
//!
//! All three passes rewrite kernel procedures and syscall bodies only; user
//! objects, array contents and capability maps pass through unchanged.
//!
//! * Simple fencing guards every load, store and call with a fence and
//!   lowers calls to non-speculative calls.
//! * Optimized fencing tracks two flags along the AST: `may_misspec` (the
//!   instruction may be reached after a mis-speculation) and `buffer_empty`
//!   (the write buffer is known to be empty here), and drops fences that the
//!   flags prove redundant.
//! * Speculation blocking fences after every store, at both branch entries,
//!   around loop bodies, and lowers calls; syscall bodies get a leading
//!   fence.
//!
//! Labels of surviving instructions are preserved so attacks aimed at the
//! original program remain replayable; inserted fences carry no label, and
//! the call-to-scall lowering drops the call's label.

use crate::lang::{cmd_eq_ignoring_labels, Cmd, Instr, StoreEntry, System};
use serde::Serialize;

/// The three rewriting passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Transformation {
    SimpleFencing,
    OptimizedFencing,
    SpeculationBlocking,
}

impl Transformation {
    pub const ALL: [Transformation; 3] = [
        Transformation::SimpleFencing,
        Transformation::OptimizedFencing,
        Transformation::SpeculationBlocking,
    ];

    /// CLI pass name.
    pub fn name(self) -> &'static str {
        match self {
            Transformation::SimpleFencing => "simple",
            Transformation::OptimizedFencing => "opt",
            Transformation::SpeculationBlocking => "nospec",
        }
    }

    pub fn from_name(name: &str) -> Option<Transformation> {
        match name {
            "simple" => Some(Transformation::SimpleFencing),
            "opt" => Some(Transformation::OptimizedFencing),
            "nospec" => Some(Transformation::SpeculationBlocking),
            _ => None,
        }
    }

    pub fn apply_cmd(self, cmd: &[Instr]) -> Cmd {
        match self {
            Transformation::SimpleFencing => simple_fencing_cmd(cmd),
            Transformation::OptimizedFencing => {
                optimized_fencing_cmd(cmd, FlagPair::entry()).0
            }
            Transformation::SpeculationBlocking => speculation_blocking_cmd(cmd),
        }
    }

    pub fn apply_system(self, sys: &System) -> System {
        transform_system(sys, |cmd| self.apply_cmd(cmd), self == Transformation::SpeculationBlocking)
    }
}

/// Static flags threaded by the optimized pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlagPair {
    /// The next instruction may be reached after a mis-speculation.
    pub may_misspec: bool,
    /// The write buffer is known to be empty at the next instruction.
    pub buffer_empty: bool,
}

impl FlagPair {
    /// Entry flags for procedures and syscall bodies: anything may be
    /// speculating and the buffer is unknown.
    pub fn entry() -> FlagPair {
        FlagPair { may_misspec: true, buffer_empty: false }
    }
}

fn transform_system(sys: &System, f: impl Fn(&[Instr]) -> Cmd, fence_syscall_entry: bool) -> System {
    let mut out = sys.clone();
    for id in &sys.idents {
        if id.space != crate::lang::Space::Kernel {
            continue;
        }
        if let Some(StoreEntry::Proc(body)) = sys.store.get(&id.name) {
            out.store.insert(id.name.clone(), StoreEntry::Proc(f(body)));
        }
    }
    for (name, body) in &sys.syscalls {
        let mut rewritten = f(body);
        if fence_syscall_entry {
            rewritten.insert(0, Instr::Fence);
        }
        out.syscalls.insert(name.clone(), rewritten);
    }
    out
}

/// Simple fencing over a command.
pub fn simple_fencing_cmd(cmd: &[Instr]) -> Cmd {
    let mut out = Vec::new();
    for instr in cmd {
        match instr {
            Instr::Skip | Instr::Assign(..) | Instr::Syscall(..) | Instr::Fence => {
                out.push(instr.clone())
            }
            Instr::Load(..) | Instr::Store(..) => {
                out.push(Instr::Fence);
                out.push(instr.clone());
            }
            Instr::Call(_, target, args) => {
                out.push(Instr::Fence);
                out.push(Instr::SCall(target.clone(), args.clone()));
            }
            Instr::SCall(..) => {
                out.push(Instr::Fence);
                out.push(instr.clone());
            }
            Instr::If(l, e, c1, c2) => out.push(Instr::If(
                *l,
                e.clone(),
                simple_fencing_cmd(c1),
                simple_fencing_cmd(c2),
            )),
            Instr::While(l, e, c) => {
                out.push(Instr::While(*l, e.clone(), simple_fencing_cmd(c)))
            }
        }
    }
    out
}

/// Optimized fencing over a command, threading the flag pair.
pub fn optimized_fencing_cmd(cmd: &[Instr], flags: FlagPair) -> (Cmd, FlagPair) {
    let mut out = Vec::new();
    let mut flags = flags;
    for instr in cmd {
        flags = push_optimized(instr, flags, &mut out);
    }
    (out, flags)
}

fn push_optimized(instr: &Instr, flags: FlagPair, out: &mut Cmd) -> FlagPair {
    match instr {
        Instr::Skip | Instr::Assign(..) | Instr::Fence => {
            out.push(instr.clone());
            flags
        }
        Instr::Load(..) => {
            if flags.may_misspec {
                out.push(Instr::Fence);
                out.push(instr.clone());
                // Behind a fresh fence the buffer is empty, and a load over an
                // empty buffer cannot forward stale data.
                FlagPair { may_misspec: false, buffer_empty: true }
            } else {
                out.push(instr.clone());
                // Over a non-empty buffer the load itself may start
                // mis-speculating via stale forwarding.
                FlagPair { may_misspec: !flags.buffer_empty, buffer_empty: flags.buffer_empty }
            }
        }
        Instr::Store(..) => {
            if flags.may_misspec {
                out.push(Instr::Fence);
            }
            out.push(instr.clone());
            FlagPair { may_misspec: false, buffer_empty: false }
        }
        Instr::Call(_, target, args) => {
            out.push(Instr::Fence);
            out.push(Instr::SCall(target.clone(), args.clone()));
            FlagPair::entry()
        }
        Instr::SCall(..) => {
            out.push(Instr::Fence);
            out.push(instr.clone());
            FlagPair::entry()
        }
        Instr::Syscall(..) => {
            out.push(instr.clone());
            FlagPair::entry()
        }
        Instr::If(l, e, c1, c2) => {
            out.push(Instr::If(
                *l,
                e.clone(),
                optimized_fencing_cmd(c1, FlagPair::entry()).0,
                optimized_fencing_cmd(c2, FlagPair::entry()).0,
            ));
            FlagPair::entry()
        }
        Instr::While(l, e, c) => {
            out.push(Instr::While(*l, e.clone(), optimized_fencing_cmd(c, FlagPair::entry()).0));
            FlagPair::entry()
        }
    }
}

/// Speculation blocking over a command.
pub fn speculation_blocking_cmd(cmd: &[Instr]) -> Cmd {
    let mut out = Vec::new();
    for instr in cmd {
        match instr {
            Instr::Skip | Instr::Assign(..) | Instr::Load(..) | Instr::Syscall(..)
            | Instr::Fence => out.push(instr.clone()),
            Instr::Store(..) => {
                out.push(instr.clone());
                out.push(Instr::Fence);
            }
            Instr::Call(_, target, args) => {
                out.push(Instr::SCall(target.clone(), args.clone()))
            }
            Instr::SCall(..) => out.push(instr.clone()),
            Instr::If(l, e, c1, c2) => {
                let mut t = vec![Instr::Fence];
                t.extend(speculation_blocking_cmd(c1));
                let mut f = vec![Instr::Fence];
                f.extend(speculation_blocking_cmd(c2));
                out.push(Instr::If(*l, e.clone(), t, f));
            }
            Instr::While(l, e, c) => {
                let mut body = vec![Instr::Fence];
                body.extend(speculation_blocking_cmd(c));
                out.push(Instr::While(*l, e.clone(), body));
                out.push(Instr::Fence);
            }
        }
    }
    out
}

/// Removes every fence and rewrites non-speculative calls back to plain
/// calls. Labels are re-derived, so comparisons against an original command
/// must ignore labels.
pub fn erase_protection(cmd: &[Instr]) -> Cmd {
    let mut out = Vec::new();
    for instr in cmd {
        match instr {
            Instr::Fence => {}
            Instr::SCall(target, args) => out.push(Instr::Call(0, target.clone(), args.clone())),
            Instr::If(l, e, c1, c2) => {
                out.push(Instr::If(*l, e.clone(), erase_protection(c1), erase_protection(c2)))
            }
            Instr::While(l, e, c) => out.push(Instr::While(*l, e.clone(), erase_protection(c))),
            other => out.push(other.clone()),
        }
    }
    out
}

/// True when `transformed` differs from `original` only by fence insertions
/// and call lowerings in kernel code: user content and capabilities are
/// bit-identical, and erasing the protection recovers each kernel body.
pub fn is_fence_scall_only_delta(original: &System, transformed: &System) -> bool {
    if original.idents != transformed.idents
        || original.caps != transformed.caps
        || original.kappa_user != transformed.kappa_user
        || original.kappa_kernel != transformed.kappa_kernel
        || original.syscalls.len() != transformed.syscalls.len()
    {
        return false;
    }
    for id in &original.idents {
        let (a, b) = (original.store.get(&id.name), transformed.store.get(&id.name));
        match (id.space, a, b) {
            (crate::lang::Space::User, a, b) => {
                if a != b {
                    return false;
                }
            }
            (crate::lang::Space::Kernel, Some(StoreEntry::Array(x)), Some(StoreEntry::Array(y))) => {
                if x != y {
                    return false;
                }
            }
            (
                crate::lang::Space::Kernel,
                Some(StoreEntry::Proc(orig)),
                Some(StoreEntry::Proc(new)),
            ) => {
                if !erases_to(new, orig) {
                    return false;
                }
            }
            _ => return false,
        }
    }
    for (name, orig) in &original.syscalls {
        match transformed.syscalls.get(name) {
            Some(new) if erases_to(new, orig) => {}
            _ => return false,
        }
    }
    true
}

fn erases_to(transformed: &[Instr], original: &[Instr]) -> bool {
    cmd_eq_ignoring_labels(&erase_protection(transformed), original)
}

/// Number of fence instructions in a command, branches included.
pub fn fence_count(cmd: &[Instr]) -> usize {
    cmd.iter()
        .map(|i| match i {
            Instr::Fence => 1,
            Instr::If(_, _, c1, c2) => fence_count(c1) + fence_count(c2),
            Instr::While(_, _, c) => fence_count(c),
            _ => 0,
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse::{parse_cmd_text, parse_system};
    use crate::lang::{Expr, Reg};

    fn fig_system() -> System {
        parse_system(
            "(addr-space 8 8)\n\
             (space user) (array ubuf 2 init 1 2)\n\
             (space kernel)\n\
             (array buf 2 init 0 0)\n\
             (proc helper ((store buf 1)))\n\
             (syscall send (caps buf helper)\n\
               ((if (< x1 2) ((store (+ buf x1) x2) (call helper)) ((skip)))\n\
                (while (< x3 1) ((:= x3 (+ x3 1))))\n\
                (sys recv)))\n\
             (syscall recv (caps buf) ((load ret buf)))",
        )
        .unwrap()
    }

    #[test]
    fn simple_fencing_clauses() {
        assert_eq!(simple_fencing_cmd(&parse_cmd_text("(skip)", 0).unwrap()),
            parse_cmd_text("(skip)", 0).unwrap());
        let fenced = simple_fencing_cmd(&parse_cmd_text("(load x1 0)", 0).unwrap());
        assert!(matches!(fenced[0], Instr::Fence));
        assert!(matches!(fenced[1], Instr::Load(..)));
        let lowered = simple_fencing_cmd(&parse_cmd_text("(call x1 5)", 0).unwrap());
        assert!(matches!(lowered[0], Instr::Fence));
        assert!(matches!(&lowered[1], Instr::SCall(Expr::Reg(Reg::X(1)), args) if args.len() == 1));
    }

    #[test]
    fn optimized_fencing_straight_line_loads_share_one_fence() {
        // load; load; store under entry flags: one leading fence only.
        let cmd = parse_cmd_text("(load x1 0) (load x2 1) (store x3 4)", 0).unwrap();
        let (out, flags) = optimized_fencing_cmd(&cmd, FlagPair::entry());
        let expected = parse_cmd_text("(fence) (load x1 0) (load x2 1) (store x3 4)", 0).unwrap();
        assert!(cmd_eq_ignoring_labels(&out, &expected));
        assert_eq!(flags, FlagPair { may_misspec: false, buffer_empty: false });
    }

    #[test]
    fn optimized_fencing_load_with_clean_flags_is_unfenced() {
        let cmd = parse_cmd_text("(load x1 0)", 0).unwrap();
        let (out, flags) =
            optimized_fencing_cmd(&cmd, FlagPair { may_misspec: false, buffer_empty: true });
        assert!(cmd_eq_ignoring_labels(&out, &cmd));
        assert_eq!(flags, FlagPair { may_misspec: false, buffer_empty: true });
    }

    #[test]
    fn optimized_fencing_skip_preserves_flags() {
        let cmd = parse_cmd_text("(skip)", 0).unwrap();
        for may in [false, true] {
            for empty in [false, true] {
                let flags = FlagPair { may_misspec: may, buffer_empty: empty };
                let (out, after) = optimized_fencing_cmd(&cmd, flags);
                assert!(cmd_eq_ignoring_labels(&out, &cmd));
                assert_eq!(after, flags);
            }
        }
    }

    #[test]
    fn speculation_blocking_clauses() {
        let stored = speculation_blocking_cmd(&parse_cmd_text("(store 0 1)", 0).unwrap());
        assert!(matches!(stored[0], Instr::Store(..)));
        assert!(matches!(stored[1], Instr::Fence));

        let branched =
            speculation_blocking_cmd(&parse_cmd_text("(if x1 ((skip)) ((skip)))", 0).unwrap());
        match &branched[0] {
            Instr::If(_, _, t, f) => {
                assert!(matches!(t[0], Instr::Fence));
                assert!(matches!(f[0], Instr::Fence));
            }
            other => panic!("unexpected {other:?}"),
        }

        let looped = speculation_blocking_cmd(&parse_cmd_text("(while x1 ((skip)))", 0).unwrap());
        match &looped[0] {
            Instr::While(_, _, body) => assert!(matches!(body[0], Instr::Fence)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(looped[1], Instr::Fence));
    }

    #[test]
    fn speculation_blocking_prefixes_syscall_bodies() {
        let sys = fig_system();
        let out = Transformation::SpeculationBlocking.apply_system(&sys);
        for body in out.syscalls.values() {
            assert!(matches!(body[0], Instr::Fence));
        }
    }

    #[test]
    fn erasure_recovers_the_original_system() {
        let sys = fig_system();
        for pass in Transformation::ALL {
            let out = pass.apply_system(&sys);
            assert!(is_fence_scall_only_delta(&sys, &out), "{}", pass.name());
            for (name, body) in &sys.syscalls {
                let transformed = out.syscalls.get(name).unwrap();
                assert!(cmd_eq_ignoring_labels(&erase_protection(transformed), body));
            }
        }
    }

    #[test]
    fn non_delta_changes_are_detected() {
        let sys = fig_system();
        let mut broken = sys.clone();
        let body = broken.syscalls.get_mut("recv").unwrap();
        body.clear();
        assert!(!is_fence_scall_only_delta(&sys, &broken));
    }

    #[test]
    fn user_content_and_caps_pass_through() {
        let sys = fig_system();
        for pass in Transformation::ALL {
            let out = pass.apply_system(&sys);
            assert_eq!(out.caps, sys.caps);
            assert_eq!(out.store.get("ubuf"), sys.store.get("ubuf"));
            assert_eq!(out.store.get("buf"), sys.store.get("buf"));
        }
    }

    #[test]
    fn optimized_pass_never_inserts_more_fences_than_simple() {
        let sys = fig_system();
        for (name, body) in &sys.syscalls {
            let simple = fence_count(&simple_fencing_cmd(body));
            let opt = fence_count(&optimized_fencing_cmd(body, FlagPair::entry()).0);
            assert!(opt <= simple, "syscall {name}: {opt} > {simple}");
        }
        // Straight-line loads after a leading fence: strictly fewer fences.
        let loads = parse_cmd_text("(load x1 0) (load x2 1)", 0).unwrap();
        assert!(
            fence_count(&optimized_fencing_cmd(&loads, FlagPair::entry()).0)
                < fence_count(&simple_fencing_cmd(&loads))
        );
    }

    #[test]
    fn transformations_are_stable_on_their_own_output_modulo_fences() {
        // Re-running a pass only adds fences; erasing both results recovers
        // the same original.
        let sys = fig_system();
        for pass in Transformation::ALL {
            let once = pass.apply_system(&sys);
            let twice = pass.apply_system(&once);
            assert!(is_fence_scall_only_delta(&sys, &twice), "{}", pass.name());
        }
    }
}
