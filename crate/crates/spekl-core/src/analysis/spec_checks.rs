//! Bounded exploration of the speculative semantics: speculative kernel
//! safety, side-channel layout non-interference, and the reduction of
//! speculative violations to classic ones for transformed systems.

use super::{
    argument_menu, argument_vectors, layout_to_map, syscall_arity, syscall_spec_start,
    ExplorationBudget, Trace, TraceEntry, Verdict,
};
use crate::buffer::{BufferedMemory, WriteBuffer};
use crate::classic::{self, ClassicConfig, Frame, Mode, Outcome, RegisterMap};
use crate::lang::{Addr, IdKind, Observation, Space, System, Value};
use crate::layout::{compose, enumerate_layouts, Layout, LayoutDistribution};
use crate::specsem::{enabled_directives, spec_step, Directive, SpecStack};
use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

/// Result of exploring one entry point.
struct Exploration {
    witness: Option<(Vec<Directive>, Vec<Observation>)>,
    pruned: bool,
}

struct Explorer<'a> {
    sys: &'a System,
    layout: &'a Layout,
    budget: &'a ExplorationBudget,
    probes: Vec<Addr>,
    visited: HashSet<u64>,
    pruned: bool,
    aborted: bool,
}

impl<'a> Explorer<'a> {
    fn new(sys: &'a System, layout: &'a Layout, budget: &'a ExplorationBudget) -> Explorer<'a> {
        Explorer {
            sys,
            layout,
            budget,
            probes: budget.probes_for(sys),
            visited: HashSet::new(),
            pruned: false,
            aborted: false,
        }
    }

    fn digest(stack: &SpecStack) -> u64 {
        let mut h = DefaultHasher::new();
        stack.hash(&mut h);
        h.finish()
    }

    /// Depth-first search for a reachable violation, collecting the directive
    /// path. Bounded by path length, non-step directive count, stack height
    /// and the global state cap.
    fn search(
        &mut self,
        stack: &SpecStack,
        path: &mut Vec<(Directive, Observation)>,
        non_steps: usize,
    ) -> bool {
        if stack.top_is_unsafe() {
            return true;
        }
        if stack.is_terminal() {
            return false;
        }
        if path.len() >= self.budget.max_steps {
            self.pruned = true;
            return false;
        }
        if self.visited.len() >= self.budget.max_states {
            self.aborted = true;
            return false;
        }
        if !self.visited.insert(Self::digest(stack)) {
            return false;
        }
        let mut directives = enabled_directives(self.sys, self.layout, stack, &self.probes);
        if !self.budget.enable_bt {
            directives.retain(|d| !matches!(d, Directive::Bt));
        }
        for directive in directives {
            let is_step = matches!(directive, Directive::Step);
            if !is_step && non_steps >= self.budget.max_directives {
                self.pruned = true;
                continue;
            }
            let Ok((next, obs)) = spec_step(self.sys, self.layout, stack, &directive) else {
                continue;
            };
            if next.height() > self.budget.max_spec_depth {
                self.pruned = true;
                continue;
            }
            path.push((directive, obs));
            if self.search(&next, path, non_steps + usize::from(!is_step)) {
                return true;
            }
            path.pop();
        }
        false
    }

    fn explore(&mut self, start: &SpecStack) -> Exploration {
        let mut path = Vec::new();
        let found = self.search(start, &mut path, 0);
        Exploration {
            witness: found.then(|| {
                let (ds, os): (Vec<_>, Vec<_>) = path.into_iter().unzip();
                (ds, os)
            }),
            pruned: self.pruned,
        }
    }
}

fn layouts_under(sys: &System, budget: &ExplorationBudget) -> Result<Vec<Layout>, Verdict> {
    enumerate_layouts(sys, &LayoutDistribution::SlotUniform { theta: budget.theta }, budget.layout_cap)
        .map(|support| support.into_iter().map(|(l, _)| l).collect())
        .map_err(|_| Verdict::BudgetExceeded)
}

/// Speculative kernel safety, checked over the systematic single-syscall
/// entry family: every layout, every syscall, every argument vector from the
/// address-plus-degenerate-values menu, starting from an empty write buffer
/// and a sound pipeline.
pub fn check_spec_kernel_safety(sys: &System, budget: &ExplorationBudget) -> Verdict {
    check_spec_kernel_safety_from(sys, budget, &[(Vec::new(), false)])
}

/// Same sweep with explicit initial buffers and mis-speculation flags.
pub fn check_spec_kernel_safety_from(
    sys: &System,
    budget: &ExplorationBudget,
    starts: &[(Vec<(Addr, Value)>, bool)],
) -> Verdict {
    let layouts = match layouts_under(sys, budget) {
        Ok(l) => l,
        Err(v) => return v,
    };
    let menu = argument_menu(sys);
    let mut pruned = false;
    for layout in &layouts {
        for name in sys.syscalls.keys() {
            let arity = syscall_arity(sys, name);
            for args in argument_vectors(&menu, arity) {
                for (buffer, misspec) in starts {
                    let start = syscall_spec_start(sys, layout, name, &args, buffer, *misspec);
                    let mut explorer = Explorer::new(sys, layout, budget);
                    let found = explorer.explore(&start);
                    if explorer.aborted {
                        return Verdict::BudgetExceeded;
                    }
                    pruned |= found.pruned;
                    if let Some((directives, observations)) = found.witness {
                        return Verdict::Unsafe {
                            witness: Box::new(Trace {
                                layout: layout_to_map(layout),
                                layout_b: None,
                                entry: TraceEntry::Syscall {
                                    name: name.clone(),
                                    args,
                                    buffer: buffer.clone(),
                                    misspec: *misspec,
                                },
                                directives,
                                observations,
                                final_tag: "unsafe".to_string(),
                            }),
                        };
                    }
                }
            }
        }
    }
    Verdict::Safe { exhausted: !pruned }
}

/// Side-channel layout non-interference of one syscall over explicit layout
/// pairs: every directive sequence feasible under one layout must be feasible
/// under the other with identical observations.
pub fn check_sc_layout_ni(
    sys: &System,
    syscall: &str,
    layout_pairs: &[(Layout, Layout)],
    budget: &ExplorationBudget,
) -> Verdict {
    let menu = argument_menu(sys);
    let arity = syscall_arity(sys, syscall);
    let mut pruned = false;
    for (a, b) in layout_pairs {
        for (first, second) in [(a, b), (b, a)] {
            for args in argument_vectors(&menu, arity) {
                for misspec in [false, true] {
                    let start = syscall_spec_start(sys, first, syscall, &args, &[], misspec);
                    let mut collector = SequenceCollector {
                        sys,
                        budget,
                        probes: budget.probes_for(sys),
                        first,
                        second,
                        visited: HashSet::new(),
                        pruned: false,
                        mismatch: None,
                    };
                    let other_start =
                        syscall_spec_start(sys, second, syscall, &args, &[], misspec);
                    collector.walk(&start, &other_start, &mut Vec::new(), 0);
                    pruned |= collector.pruned;
                    if let Some((directives, obs_first, obs_second)) = collector.mismatch {
                        let tag = format!(
                            "observations diverge: {:?} vs {:?}",
                            obs_first.last(),
                            obs_second.and_then(|o| o.last().cloned())
                        );
                        return Verdict::Unsafe {
                            witness: Box::new(Trace {
                                layout: layout_to_map(first),
                                layout_b: Some(layout_to_map(second)),
                                entry: TraceEntry::Syscall {
                                    name: syscall.to_string(),
                                    args,
                                    buffer: Vec::new(),
                                    misspec,
                                },
                                directives,
                                observations: obs_first,
                                final_tag: tag,
                            }),
                        };
                    }
                }
            }
        }
    }
    Verdict::Safe { exhausted: !pruned }
}

struct SequenceCollector<'a> {
    sys: &'a System,
    budget: &'a ExplorationBudget,
    probes: Vec<Addr>,
    first: &'a Layout,
    second: &'a Layout,
    visited: HashSet<u64>,
    pruned: bool,
    mismatch: Option<(Vec<Directive>, Vec<Observation>, Option<Vec<Observation>>)>,
}

impl<'a> SequenceCollector<'a> {
    /// Walks the first layout's reachable directive tree while replaying each
    /// prefix under the second layout in lockstep.
    fn walk(
        &mut self,
        here: &SpecStack,
        there: &SpecStack,
        path: &mut Vec<(Directive, Observation, Observation)>,
        non_steps: usize,
    ) {
        if self.mismatch.is_some() || here.is_terminal() {
            return;
        }
        if path.len() >= self.budget.max_steps {
            self.pruned = true;
            return;
        }
        let mut h = DefaultHasher::new();
        here.hash(&mut h);
        if !self.visited.insert(h.finish()) {
            return;
        }
        if self.visited.len() >= self.budget.max_states {
            self.pruned = true;
            return;
        }
        let mut directives = enabled_directives(self.sys, self.first, here, &self.probes);
        if !self.budget.enable_bt {
            directives.retain(|d| !matches!(d, Directive::Bt));
        }
        for directive in directives {
            let is_step = matches!(directive, Directive::Step);
            if !is_step && non_steps >= self.budget.max_directives {
                self.pruned = true;
                continue;
            }
            let Ok((next_here, obs_here)) = spec_step(self.sys, self.first, here, &directive)
            else {
                continue;
            };
            if next_here.height() > self.budget.max_spec_depth {
                self.pruned = true;
                continue;
            }
            match spec_step(self.sys, self.second, there, &directive) {
                Ok((next_there, obs_there)) => {
                    if obs_here != obs_there {
                        let mut ds: Vec<Directive> =
                            path.iter().map(|(d, _, _)| d.clone()).collect();
                        ds.push(directive.clone());
                        let mut o1: Vec<Observation> =
                            path.iter().map(|(_, o, _)| o.clone()).collect();
                        o1.push(obs_here);
                        let mut o2: Vec<Observation> =
                            path.iter().map(|(_, _, o)| o.clone()).collect();
                        o2.push(obs_there);
                        self.mismatch = Some((ds, o1, Some(o2)));
                        return;
                    }
                    path.push((directive, obs_here, obs_there));
                    self.walk(&next_here, &next_there, path, non_steps + usize::from(!is_step));
                    path.pop();
                    if self.mismatch.is_some() {
                        return;
                    }
                }
                Err(_) => {
                    // Feasible under the first layout, infeasible under the
                    // second: an interference witness by itself.
                    let mut ds: Vec<Directive> = path.iter().map(|(d, _, _)| d.clone()).collect();
                    ds.push(directive);
                    let mut o1: Vec<Observation> =
                        path.iter().map(|(_, o, _)| o.clone()).collect();
                    o1.push(obs_here);
                    self.mismatch = Some((ds, o1, None));
                    return;
                }
            }
        }
    }
}

/// Initial-buffer menu for the violation-reduction check: the empty buffer
/// plus one delayed write per array cell, over a small value menu that
/// includes the kernel procedure addresses of the layout.
pub fn buffer_menu(sys: &System, layout: &Layout) -> Vec<Vec<(Addr, Value)>> {
    let mut values = vec![
        Value::Int(0),
        Value::Int(1),
        Value::Int(sys.kappa_user as i64),
        Value::Int(sys.kappa_user as i64 + 1),
    ];
    for id in &sys.idents {
        if id.space == Space::Kernel && id.kind == IdKind::Procedure {
            if let Some(base) = layout.base(&id.name) {
                values.push(Value::Int(base as i64));
            }
        }
    }
    values.dedup();
    let mut out = vec![Vec::new()];
    for id in &sys.idents {
        if id.kind != IdKind::Array {
            continue;
        }
        let Some(fp) = layout.footprint(id) else { continue };
        for addr in fp {
            for v in &values {
                out.push(vec![(addr, v.clone())]);
            }
        }
    }
    out
}

/// Violation reduction for transformed systems: every speculative path to a
/// violation must have a classic counterpart from the committed buffer. Any
/// speculative-only violation is returned as a witness.
pub fn check_safety_imposition(sys: &System, budget: &ExplorationBudget) -> Verdict {
    let layouts = match layouts_under(sys, budget) {
        Ok(l) => l,
        Err(v) => return v,
    };
    let menu = argument_menu(sys);
    let mut pruned = false;
    for layout in &layouts {
        let buffers = buffer_menu(sys, layout);
        for name in sys.syscalls.keys() {
            let arity = syscall_arity(sys, name);
            for args in argument_vectors(&menu, arity) {
                for buffer in &buffers {
                    for misspec in [false, true] {
                        let start =
                            syscall_spec_start(sys, layout, name, &args, buffer, misspec);
                        let mut explorer = Explorer::new(sys, layout, budget);
                        let found = explorer.explore(&start);
                        if explorer.aborted {
                            return Verdict::BudgetExceeded;
                        }
                        pruned |= found.pruned;
                        let Some((directives, observations)) = found.witness else {
                            continue;
                        };
                        // Classic counterpart: the same entry over the
                        // committed buffer must also reach the violation.
                        if classic_counterpart_unsafe(sys, layout, name, &args, buffer, budget.fuel)
                        {
                            continue;
                        }
                        return Verdict::Unsafe {
                            witness: Box::new(Trace {
                                layout: layout_to_map(layout),
                                layout_b: None,
                                entry: TraceEntry::Syscall {
                                    name: name.clone(),
                                    args,
                                    buffer: buffer.clone(),
                                    misspec,
                                },
                                directives,
                                observations,
                                final_tag: "speculative-only unsafe".to_string(),
                            }),
                        };
                    }
                }
            }
        }
    }
    Verdict::Safe { exhausted: !pruned }
}

fn classic_counterpart_unsafe(
    sys: &System,
    layout: &Layout,
    name: &str,
    args: &[Value],
    buffer: &[(Addr, Value)],
    fuel: u64,
) -> bool {
    let committed = BufferedMemory::with_buffer(
        WriteBuffer::from_entries(buffer.to_vec()),
        compose(sys, layout, &sys.store),
    )
    .commit();
    let body = sys.syscalls.get(name).cloned().unwrap_or_default();
    let frame = Frame::new(body, RegisterMap::with_args(args), Mode::Kernel(name.to_string()));
    let config = ClassicConfig::Running { stack: vec![frame], memory: committed };
    matches!(classic::run_from_traced(sys, layout, config, fuel, None), Outcome::Unsafe)
}

/// Fully explores the reachable state space of one entry (used by the
/// backtracking cross-checks). Returns reachable state digests.
pub fn reachable_states(
    sys: &System,
    layout: &Layout,
    start: &SpecStack,
    budget: &ExplorationBudget,
) -> Vec<SpecStack> {
    let probes = budget.probes_for(sys);
    let mut seen: HashSet<u64> = HashSet::new();
    let mut out = Vec::new();
    let mut work = vec![(start.clone(), 0usize, 0usize)];
    while let Some((stack, depth, non_steps)) = work.pop() {
        let mut h = DefaultHasher::new();
        stack.hash(&mut h);
        if !seen.insert(h.finish()) || seen.len() > budget.max_states {
            continue;
        }
        out.push(stack.clone());
        if stack.is_terminal() || depth >= budget.max_steps {
            continue;
        }
        let mut directives = enabled_directives(sys, layout, &stack, &probes);
        if !budget.enable_bt {
            directives.retain(|d| !matches!(d, Directive::Bt));
        }
        for directive in directives {
            let is_step = matches!(directive, Directive::Step);
            if !is_step && non_steps >= budget.max_directives {
                continue;
            }
            if let Ok((next, _)) = spec_step(sys, layout, &stack, &directive) {
                if next.height() <= budget.max_spec_depth {
                    work.push((next, depth + 1, non_steps + usize::from(!is_step)));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::replay_trace;
    use crate::casestudy;
    use crate::lang::parse::parse_system;
    use crate::specsem::SpecConfig;
    use crate::transform::Transformation;

    fn small_budget() -> ExplorationBudget {
        ExplorationBudget { max_steps: 30, ..ExplorationBudget::default() }
    }

    #[test]
    fn three_syscall_system_is_speculatively_unsafe_with_replayable_witness() {
        let sigma = casestudy::three_syscall_system();
        let verdict = check_spec_kernel_safety(&sigma, &small_budget());
        match verdict {
            Verdict::Unsafe { witness } => {
                assert!(replay_trace(&sigma, &witness));
            }
            other => panic!("expected a violation, got {other:?}"),
        }
    }

    #[test]
    fn protecting_a_kernel_safe_system_restores_speculative_safety() {
        // The bound-checked message-passing system is classically safe but
        // speculatively breakable (a mispredicted bound check reaches the
        // out-of-capability cell transiently). Each pass closes that gap.
        let sys = casestudy::message_passing_safe_system();
        let baseline = check_spec_kernel_safety(&sys, &small_budget());
        assert!(baseline.is_unsafe(), "{baseline:?}");
        for pass in Transformation::ALL {
            let protected = pass.apply_system(&sys);
            let verdict = check_spec_kernel_safety(&protected, &small_budget());
            assert!(!verdict.is_unsafe(), "{}: {verdict:?}", pass.name());
        }
    }

    #[test]
    fn transformed_probe_system_keeps_only_its_classic_hole() {
        // The probe playground is classically unsafe by design, and the
        // passes preserve semantics, so its protected variants stay unsafe;
        // the reduction check confirms no speculative-only path remains.
        let sigma = casestudy::three_syscall_system();
        for pass in Transformation::ALL {
            let protected = pass.apply_system(&sigma);
            let verdict = check_spec_kernel_safety(&protected, &small_budget());
            assert!(verdict.is_unsafe(), "{}: {verdict:?}", pass.name());
        }
    }

    #[test]
    fn no_syscall_system_is_exhaustively_safe() {
        let sys = parse_system("(addr-space 8 8) (space kernel) (proc f ((skip)))").unwrap();
        let verdict = check_spec_kernel_safety(&sys, &small_budget());
        assert!(verdict.is_exhausted_safe(), "{verdict:?}");
    }

    #[test]
    fn single_store_system_is_spec_safe_but_sc_interfering() {
        let sys = casestudy::single_store_system();
        let verdict = check_spec_kernel_safety(&sys, &small_budget());
        assert!(verdict.is_exhausted_safe(), "{verdict:?}");

        let layouts = layouts_under(&sys, &small_budget()).unwrap();
        let pairs = vec![(layouts[0].clone(), layouts[1].clone())];
        let ni = check_sc_layout_ni(&sys, "put", &pairs, &small_budget());
        assert!(ni.is_unsafe(), "{ni:?}");
    }

    #[test]
    fn untransformed_probe_gadget_violates_the_reduction() {
        let sigma = casestudy::three_syscall_system();
        let verdict = check_safety_imposition(&sigma, &small_budget());
        assert!(verdict.is_unsafe(), "{verdict:?}");
    }

    #[test]
    fn transformed_systems_satisfy_the_reduction() {
        let sigma = casestudy::three_syscall_system();
        for pass in Transformation::ALL {
            let protected = pass.apply_system(&sigma);
            let verdict = check_safety_imposition(&protected, &small_budget());
            assert!(!verdict.is_unsafe(), "{}: {verdict:?}", pass.name());
        }
    }

    #[test]
    fn backtracking_does_not_unlock_new_violations_on_the_probe_system() {
        let sigma = casestudy::three_syscall_system();
        let without = check_spec_kernel_safety(&sigma, &small_budget());
        let with = check_spec_kernel_safety(
            &sigma,
            &ExplorationBudget { enable_bt: true, ..small_budget() },
        );
        assert_eq!(without.is_unsafe(), with.is_unsafe());
    }

    #[test]
    fn sound_states_reached_with_mixed_directives_have_step_only_paths() {
        // Every reachable sound (non-mis-speculating) live top is also the
        // top of some step-only run prefix.
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (array a 1 init 3)\n\
             (syscall s (caps a) ((store a 1) (load x1 a) (if x1 ((store a 2)) ((skip)))))",
        )
        .unwrap();
        let budget = ExplorationBudget { enable_bt: true, ..small_budget() };
        let layouts = layouts_under(&sys, &budget).unwrap();
        let layout = &layouts[0];
        let start = syscall_spec_start(&sys, layout, "s", &[], &[], false);

        let mut step_only_tops = Vec::new();
        let mut cursor = start.clone();
        step_only_tops.push(cursor.top().unwrap().clone());
        while let Ok((next, _)) = spec_step(&sys, layout, &cursor, &Directive::Step) {
            step_only_tops.push(next.top().unwrap().clone());
            cursor = next;
            if cursor.is_terminal() {
                break;
            }
        }

        for state in reachable_states(&sys, layout, &start, &budget) {
            if let Some(top @ SpecConfig::Live { misspec: false, .. }) = state.top() {
                assert!(
                    step_only_tops.contains(top),
                    "sound top not step-only reachable: {top:?}"
                );
            }
        }
    }
}
