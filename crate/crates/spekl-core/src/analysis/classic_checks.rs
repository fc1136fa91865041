//! Classic-semantics checkers: kernel safety over enumerated layouts, layout
//! non-interference, randomized semantic equivalence, and the Monte-Carlo
//! probe-failure estimator with its exact counterpart.

use super::{
    argument_menu, argument_vectors, layout_to_map, syscall_arity, ExplorationBudget, Trace,
    TraceEntry, Verdict,
};
use crate::classic::{self, ClassicConfig, Frame, Mode, Outcome, RegisterMap};
use crate::lang::print::cmd_to_ksl;
use crate::lang::{Cmd, IdKind, Instr, Space, Store, StoreEntry, System, Value};
use crate::layout::{
    compose, enumerate_layouts, sample_layout, Layout, LayoutDistribution, Rational,
};
use num::{One, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn layouts_under(sys: &System, budget: &ExplorationBudget) -> Result<Vec<Layout>, Verdict> {
    enumerate_layouts(sys, &LayoutDistribution::SlotUniform { theta: budget.theta }, budget.layout_cap)
        .map(|support| support.into_iter().map(|(l, _)| l).collect())
        .map_err(|_| Verdict::BudgetExceeded)
}

/// Kernel safety over every enumerated layout and the systematic
/// single-syscall entry family.
pub fn check_kernel_safety(sys: &System, budget: &ExplorationBudget) -> Verdict {
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
                let entry: Cmd = vec![Instr::Syscall(
                    name.clone(),
                    args.iter().map(|v| crate::lang::Expr::Const(v.clone())).collect(),
                )];
                let outcome = classic::run(
                    sys,
                    layout,
                    entry.clone(),
                    RegisterMap::initial(),
                    Mode::User,
                    budget.fuel,
                );
                match outcome {
                    Outcome::Unsafe => {
                        return Verdict::Unsafe {
                            witness: Box::new(Trace {
                                layout: layout_to_map(layout),
                                layout_b: None,
                                entry: TraceEntry::Syscall {
                                    name: name.clone(),
                                    args,
                                    buffer: Vec::new(),
                                    misspec: false,
                                },
                                directives: Vec::new(),
                                observations: Vec::new(),
                                final_tag: "unsafe".to_string(),
                            }),
                        }
                    }
                    Outcome::FuelExhausted => pruned = true,
                    _ => {}
                }
            }
        }
    }
    Verdict::Safe { exhausted: !pruned }
}

/// Outcome equivalence for the layout non-interference check: errors and
/// violations are identified, terminations must agree exactly.
fn eval_equiv_merged(a: &Outcome, b: &Outcome) -> bool {
    match (a, b) {
        (Outcome::Terminated { ret: r1, store: s1 }, Outcome::Terminated { ret: r2, store: s2 }) => {
            r1 == r2 && s1 == s2
        }
        (Outcome::Err | Outcome::Unsafe, Outcome::Err | Outcome::Unsafe) => true,
        (Outcome::FuelExhausted, Outcome::FuelExhausted) => true,
        _ => false,
    }
}

/// Store menu for the non-interference sweeps: the initial store plus one
/// variant per array with its first cell set to a boundary address value.
fn store_menu(sys: &System) -> Vec<Store> {
    let mut out = vec![sys.store.clone()];
    for id in &sys.idents {
        if id.kind != IdKind::Array {
            continue;
        }
        let mut store = sys.store.clone();
        if let Some(StoreEntry::Array(vs)) = store.get_mut(&id.name) {
            vs[0] = Value::Int(sys.kappa_user as i64);
        }
        out.push(store);
    }
    out
}

/// Layout non-interference of one syscall: evaluation results must agree (up
/// to identifying errors with violations) across every layout pair, for every
/// argument vector and store from the menus.
pub fn check_layout_ni(
    sys: &System,
    syscall: &str,
    layout_pairs: &[(Layout, Layout)],
    budget: &ExplorationBudget,
) -> Verdict {
    let menu = argument_menu(sys);
    let arity = syscall_arity(sys, syscall);
    let body = sys.syscalls.get(syscall).cloned().unwrap_or_default();
    let mut fuel_limited = false;
    for (a, b) in layout_pairs {
        for store in store_menu(sys) {
            for args in argument_vectors(&menu, arity) {
                let run = |layout: &Layout| {
                    let frame = Frame::new(
                        body.clone(),
                        RegisterMap::with_args(&args),
                        Mode::Kernel(syscall.to_string()),
                    );
                    let config = ClassicConfig::Running {
                        stack: vec![frame],
                        memory: compose(sys, layout, &store),
                    };
                    classic::run_from_traced(sys, layout, config, budget.fuel, None)
                };
                let out_a = run(a);
                let out_b = run(b);
                if matches!(out_a, Outcome::FuelExhausted) || matches!(out_b, Outcome::FuelExhausted)
                {
                    fuel_limited = true;
                    continue;
                }
                if !eval_equiv_merged(&out_a, &out_b) {
                    return Verdict::Unsafe {
                        witness: Box::new(Trace {
                            layout: layout_to_map(a),
                            layout_b: Some(layout_to_map(b)),
                            entry: TraceEntry::Syscall {
                                name: syscall.to_string(),
                                args,
                                buffer: Vec::new(),
                                misspec: false,
                            },
                            directives: Vec::new(),
                            observations: Vec::new(),
                            final_tag: format!(
                                "evaluations diverge: {} vs {}",
                                out_a.tag(),
                                out_b.tag()
                            ),
                        }),
                    };
                }
            }
        }
    }
    Verdict::Safe { exhausted: !fuel_limited }
}

/// Checks every syscall of the system for layout non-interference over all
/// enumerated layout pairs.
pub fn check_layout_ni_system(sys: &System, budget: &ExplorationBudget) -> Verdict {
    let layouts = match layouts_under(sys, budget) {
        Ok(l) => l,
        Err(v) => return v,
    };
    let pairs: Vec<(Layout, Layout)> = layouts
        .iter()
        .enumerate()
        .flat_map(|(i, a)| layouts[i + 1..].iter().map(move |b| (a.clone(), b.clone())))
        .collect();
    let mut exhausted = true;
    for name in sys.syscalls.keys() {
        match check_layout_ni(sys, name, &pairs, budget) {
            v @ Verdict::Unsafe { .. } => return v,
            Verdict::Safe { exhausted: e } => exhausted &= e,
            Verdict::BudgetExceeded => return Verdict::BudgetExceeded,
        }
    }
    Verdict::Safe { exhausted }
}

/// Result of the randomized equivalence check.
#[derive(Clone, Debug)]
pub enum EquivalenceVerdict {
    Equivalent { trials: u64, fuel_limited_pairs: u64 },
    Counterexample { attacker: String, layout_seed: u64, left: &'static str, right: &'static str },
}

impl EquivalenceVerdict {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, EquivalenceVerdict::Equivalent { .. })
    }
}

/// Outcome equivalence for semantic preservation: terminations agree on the
/// return value and on user identifiers plus kernel arrays (kernel procedure
/// bodies may differ between the two systems).
fn outcome_equiv_on_shared(sys: &System, a: &Outcome, b: &Outcome) -> bool {
    match (a, b) {
        (Outcome::Terminated { ret: r1, store: s1 }, Outcome::Terminated { ret: r2, store: s2 }) => {
            if r1 != r2 {
                return false;
            }
            sys.idents
                .iter()
                .filter(|id| id.space == Space::User || id.kind == IdKind::Array)
                .all(|id| s1.get(&id.name) == s2.get(&id.name))
        }
        (Outcome::Err, Outcome::Err) => true,
        (Outcome::Unsafe, Outcome::Unsafe) => true,
        _ => false,
    }
}

/// Randomized differential check of two systems against grammar-directed
/// unprivileged programs, one sampled layout per trial. Fuel-exhausted pairs
/// are tolerated when symmetric and reported in the verdict.
pub fn check_semantic_equivalence(
    left: &System,
    right: &System,
    trials: u64,
    seed: u64,
    fuel: u64,
) -> EquivalenceVerdict {
    let names_match = left.syscalls.keys().collect::<BTreeSet<_>>()
        == right.syscalls.keys().collect::<BTreeSet<_>>();
    assert!(names_match, "systems must expose the same syscalls");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = LayoutDistribution::SlotUniform { theta: 2 };
    let mut fuel_limited = 0u64;
    for trial in 0..trials {
        let attacker = super::gen::gen_attacker(&mut rng, left);
        let layout = sample_layout(left, &dist, &mut rng).expect("valid scheme");
        let out_l =
            classic::run(left, &layout, attacker.clone(), RegisterMap::initial(), Mode::User, fuel);
        let out_r =
            classic::run(right, &layout, attacker.clone(), RegisterMap::initial(), Mode::User, fuel);
        match (&out_l, &out_r) {
            (Outcome::FuelExhausted, Outcome::FuelExhausted) => fuel_limited += 1,
            (Outcome::FuelExhausted, _) | (_, Outcome::FuelExhausted) => {
                // Fences only add steps; near the fuel horizon the two runs
                // may cross it on different sides. Asymmetric pairs are
                // re-run with more fuel before declaring a mismatch.
                let out_l2 = classic::run(
                    left,
                    &layout,
                    attacker.clone(),
                    RegisterMap::initial(),
                    Mode::User,
                    fuel * 4,
                );
                let out_r2 = classic::run(
                    right,
                    &layout,
                    attacker.clone(),
                    RegisterMap::initial(),
                    Mode::User,
                    fuel * 4,
                );
                match (&out_l2, &out_r2) {
                    (Outcome::FuelExhausted, Outcome::FuelExhausted) => fuel_limited += 1,
                    _ if outcome_equiv_on_shared(left, &out_l2, &out_r2) => {}
                    _ => {
                        return EquivalenceVerdict::Counterexample {
                            attacker: cmd_to_ksl(&attacker),
                            layout_seed: trial,
                            left: out_l2.tag(),
                            right: out_r2.tag(),
                        }
                    }
                }
            }
            _ if outcome_equiv_on_shared(left, &out_l, &out_r) => {}
            _ => {
                return EquivalenceVerdict::Counterexample {
                    attacker: cmd_to_ksl(&attacker),
                    layout_seed: trial,
                    left: out_l.tag(),
                    right: out_r.tag(),
                }
            }
        }
    }
    EquivalenceVerdict::Equivalent { trials, fuel_limited_pairs: fuel_limited }
}

/// Monte-Carlo estimate of the probability that an unprivileged program
/// drives the system into a violation, with the 95% Wilson interval radius.
pub fn estimate_unsafe_probability(
    sys: &System,
    attacker: &Cmd,
    dist: &LayoutDistribution,
    trials: u64,
    seed: u64,
    fuel: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..trials {
        let layout = sample_layout(sys, dist, &mut rng).expect("valid scheme");
        let outcome =
            classic::run(sys, &layout, attacker.clone(), RegisterMap::initial(), Mode::User, fuel);
        if matches!(outcome, Outcome::Unsafe) {
            hits += 1;
        }
    }
    let n = trials as f64;
    let p = hits as f64 / n;
    let z = 1.96f64;
    let denom = 1.0 + z * z / n;
    let radius = (z / denom) * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    (p, radius)
}

/// Exact violation probability over the enumerated support.
pub fn exact_unsafe_probability(
    sys: &System,
    attacker: &Cmd,
    dist: &LayoutDistribution,
    cap: u64,
    fuel: u64,
) -> Rational {
    let support = enumerate_layouts(sys, dist, cap).expect("enumerable support");
    let mut total = Rational::zero();
    for (layout, p) in support {
        let outcome =
            classic::run(sys, &layout, attacker.clone(), RegisterMap::initial(), Mode::User, fuel);
        if matches!(outcome, Outcome::Unsafe) {
            total += p;
        }
    }
    total
}

/// Convenience: the closed-form bound `1 - delta` as a float.
pub fn unsafe_probability_bound(sys: &System, theta: u64) -> f64 {
    let delta = crate::layout::delta_lower_bound(sys, theta).expect("valid scheme");
    (Rational::one() - delta).to_f64().unwrap_or(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casestudy;
    use crate::lang::parse::{parse_cmd_text, parse_system};
    use crate::transform::Transformation;

    fn budget() -> ExplorationBudget {
        ExplorationBudget::default()
    }

    #[test]
    fn three_syscall_system_is_classically_unsafe() {
        // The branch gadget runs its probe architecturally once the guard is
        // an attacker-supplied truth.
        let sigma = casestudy::three_syscall_system();
        let verdict = check_kernel_safety(&sigma, &budget());
        assert!(verdict.is_unsafe(), "{verdict:?}");
    }

    #[test]
    fn no_syscall_system_is_exhaustively_safe() {
        let sys = parse_system("(addr-space 8 8) (space kernel) (array a 2 init 0 0)").unwrap();
        assert!(check_kernel_safety(&sys, &budget()).is_exhausted_safe());
    }

    #[test]
    fn bound_checked_message_passing_is_kernel_safe() {
        let sys = casestudy::message_passing_safe_system();
        let verdict = check_kernel_safety(&sys, &budget());
        assert!(verdict.is_exhausted_safe(), "{verdict:?}");
    }

    #[test]
    fn scope_extrusion_interferes_and_trivial_syscalls_do_not() {
        let sys = casestudy::scope_extrusion_system();
        let verdict = check_layout_ni_system(&sys, &budget());
        assert!(verdict.is_unsafe(), "{verdict:?}");

        let sys = parse_system("(addr-space 8 8) (space kernel) (proc f ((skip))) (syscall s (caps) ((:= ret 1)))").unwrap();
        assert!(check_layout_ni_system(&sys, &budget()).is_exhausted_safe());
    }

    #[test]
    fn timing_leak_gadget_is_classically_non_interfering() {
        let sys = casestudy::timing_leak_system();
        let verdict = check_layout_ni_system(&sys, &budget());
        assert!(verdict.is_exhausted_safe(), "{verdict:?}");
    }

    #[test]
    fn identity_equivalence_and_mutation_counterexample() {
        let sys = casestudy::message_passing_safe_system();
        assert!(check_semantic_equivalence(&sys, &sys, 100, 7, 500).is_equivalent());

        // Changing a syscall constant is caught quickly.
        let mut mutated = sys.clone();
        if let Some(body) = mutated.syscalls.get_mut("recv") {
            // `ret := 0` fallback becomes `ret := 1`.
            fn patch(cmd: &mut Vec<crate::lang::Instr>) {
                for i in cmd.iter_mut() {
                    match i {
                        crate::lang::Instr::Assign(_, e) => {
                            if *e == crate::lang::Expr::int(0) {
                                *e = crate::lang::Expr::int(1);
                            }
                        }
                        crate::lang::Instr::If(_, _, c1, c2) => {
                            patch(c1);
                            patch(c2);
                        }
                        crate::lang::Instr::While(_, _, c) => patch(c),
                        _ => {}
                    }
                }
            }
            patch(body);
        }
        let verdict = check_semantic_equivalence(&sys, &mutated, 400, 7, 500);
        assert!(!verdict.is_equivalent(), "mutation survived {verdict:?}");
    }

    #[test]
    fn transformed_fig_system_is_equivalent_to_the_original() {
        let sys = casestudy::message_passing_safe_system();
        for pass in Transformation::ALL {
            let out = pass.apply_system(&sys);
            let verdict = check_semantic_equivalence(&sys, &out, 300, 11, 500);
            assert!(verdict.is_equivalent(), "{}: {verdict:?}", pass.name());
        }
    }

    #[test]
    fn probe_estimate_matches_exact_quarter() {
        let sys = casestudy::probe_system();
        let attacker = casestudy::probe_attacker(&sys);
        let dist = LayoutDistribution::SlotUniform { theta: 2 };
        let exact = exact_unsafe_probability(&sys, &attacker, &dist, 100, 100);
        assert_eq!(exact, Rational::new(1, 4));
        let (estimate, radius) = estimate_unsafe_probability(&sys, &attacker, &dist, 4000, 3, 100);
        assert!((estimate - 0.25).abs() < 0.03, "estimate {estimate}");
        assert!(estimate <= unsafe_probability_bound(&sys, 2) + radius);
    }

    #[test]
    fn no_syscall_probe_never_hits() {
        let sys = parse_system("(addr-space 8 8) (space kernel) (proc f ((skip)))").unwrap();
        let attacker = parse_cmd_text("(:= x1 8)", 500).unwrap();
        let dist = LayoutDistribution::SlotUniform { theta: 2 };
        let (estimate, _) = estimate_unsafe_probability(&sys, &attacker, &dist, 500, 1, 100);
        assert_eq!(estimate, 0.0);
    }
}
