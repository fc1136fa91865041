//! Bundled case studies and the attack programs that go with them.
//!
//! The probe playground exposes three prediction units through its syscalls;
//! the bundled attacks steer one unit each:
//!
//! * `attack-a` mis-trains the branch in `s` and sweeps every kernel address
//!   through the transiently executed indirect call.
//! * `attack-b` poisons store-to-load forwarding in `t`: the stale forwarded
//!   guard opens a transient window in which the attacker-supplied call
//!   target is probed. One probe address per run.
//! * `attack-c` injects the call target of `u` directly. One probe per run.
//! * `spec-probe` forces the transient execution of a branch-guarded syscall
//!   invocation, whatever the guard evaluates to.
//!
//! A probe run that hits the unlisted kernel procedure ends in the violation
//! state; misses either continue the sweep (`attack-a`) or surface as a
//! recoverable-then-architectural error (`attack-b`/`attack-c`), which the
//! driver treats as a miss and retries with the next address.

use crate::attacker::{run_attacker, ACmd, AInstr, AttackerRun};
use crate::classic::Outcome;
use crate::lang::parse::parse_system;
use crate::lang::{Addr, Cmd, Expr, Instr, LabelKind, Observation, Op, Reg, System, Value};
use crate::layout::{enumerate_layouts, Layout, LayoutDistribution};
use crate::specsem::Directive;
use crate::transform::Transformation;
use serde::Serialize;

pub const SIGMA6: &str = include_str!("../../../studies/sigma6.ksl");
pub const MSGPASSING: &str = include_str!("../../../studies/msgpassing.ksl");
pub const MSGPASSING_SAFE: &str = include_str!("../../../studies/msgpassing_safe.ksl");
pub const SC_LEAK: &str = include_str!("../../../studies/sc_leak.ksl");
pub const SINGLE_STORE: &str = include_str!("../../../studies/single_store.ksl");
pub const PROBE4: &str = include_str!("../../../studies/probe4.ksl");
pub const SCOPE_EXTRUSION: &str = include_str!("../../../studies/scope_extrusion.ksl");
pub const EMPTY: &str = include_str!("../../../studies/empty.ksl");

/// Kernel procedure the probe attacks hunt for.
pub const PROBE_PROC: &str = "probe_me";

/// Bundled study sources by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "sigma6" => Some(SIGMA6),
        "msgpassing" => Some(MSGPASSING),
        "msgpassing-safe" | "msgpassing_safe" => Some(MSGPASSING_SAFE),
        "sc-leak" | "sc_leak" => Some(SC_LEAK),
        "single-store" | "single_store" => Some(SINGLE_STORE),
        "probe4" => Some(PROBE4),
        "scope-extrusion" | "scope_extrusion" => Some(SCOPE_EXTRUSION),
        "empty" => Some(EMPTY),
        _ => None,
    }
}

pub fn bundled_names() -> &'static [&'static str] {
    &[
        "sigma6",
        "msgpassing",
        "msgpassing-safe",
        "sc-leak",
        "single-store",
        "probe4",
        "scope-extrusion",
        "empty",
    ]
}

pub fn three_syscall_system() -> System {
    parse_system(SIGMA6).expect("bundled study parses")
}

pub fn message_passing_system() -> System {
    parse_system(MSGPASSING).expect("bundled study parses")
}

pub fn message_passing_safe_system() -> System {
    parse_system(MSGPASSING_SAFE).expect("bundled study parses")
}

pub fn timing_leak_system() -> System {
    parse_system(SC_LEAK).expect("bundled study parses")
}

pub fn single_store_system() -> System {
    parse_system(SINGLE_STORE).expect("bundled study parses")
}

pub fn probe_system() -> System {
    parse_system(PROBE4).expect("bundled study parses")
}

pub fn scope_extrusion_system() -> System {
    parse_system(SCOPE_EXTRUSION).expect("bundled study parses")
}

/// Classic probe: invoke the jump syscall on a fixed kernel slot address.
pub fn probe_attacker(sys: &System) -> Cmd {
    vec![Instr::Syscall("jump".into(), vec![Expr::int(sys.kappa_user as i64)])]
}

/// Bundled attacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AttackKind {
    BranchSweep,
    StaleForward,
    TargetInject,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] =
        [AttackKind::BranchSweep, AttackKind::StaleForward, AttackKind::TargetInject];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::BranchSweep => "attack-a",
            AttackKind::StaleForward => "attack-b",
            AttackKind::TargetInject => "attack-c",
        }
    }

    pub fn from_name(name: &str) -> Option<AttackKind> {
        match name {
            "attack-a" | "a" => Some(AttackKind::BranchSweep),
            "attack-b" | "b" => Some(AttackKind::StaleForward),
            "attack-c" | "c" => Some(AttackKind::TargetInject),
            _ => None,
        }
    }
}

const ATTACK_LABEL_BASE: u32 = 1000;

/// Labels of the probed instructions, resolved against the identity system.
/// Transformations preserve the labels of surviving instructions, so attacks
/// built from these labels replay against protected variants; a label whose
/// instruction was lowered away is simply never consumed.
#[derive(Clone, Copy, Debug)]
pub struct ProbeLabels {
    pub branch_in_s: u32,
    pub load_in_t: u32,
    pub call_in_u: u32,
}

pub fn probe_labels(sys: &System) -> Option<ProbeLabels> {
    Some(ProbeLabels {
        branch_in_s: *sys.labels_in_syscall("s", LabelKind::Branch).first()?,
        load_in_t: *sys.labels_in_syscall("t", LabelKind::Load).first()?,
        call_in_u: *sys.labels_in_syscall("u", LabelKind::Call).first()?,
    })
}

/// Drain loop: pop observations until the stack is empty.
fn drain_observations(into: Reg, label: u32) -> Vec<AInstr> {
    vec![
        AInstr::Observe(into),
        AInstr::While(
            label,
            Expr::op(Op::Ne, vec![Expr::Reg(into), Expr::Const(Value::Nil)]),
            vec![AInstr::Observe(into)],
        ),
    ]
}

/// Branch-steering sweep: for every kernel address, force the guarded call
/// inside `s` to run transiently with the probed address as target.
pub fn attack_branch_sweep(sys: &System, labels: &ProbeLabels) -> ACmd {
    let branch_label = labels.branch_in_s;
    let n = sys.addr_count() as i64;
    let mut body: Vec<AInstr> = vec![
        AInstr::Poison(Directive::Branch(branch_label, true)),
        AInstr::Spec(vec![Instr::Syscall(
            "s".into(),
            vec![Expr::bool(false), Expr::Reg(Reg::X(1))],
        )]),
    ];
    body.extend(drain_observations(Reg::X(2), ATTACK_LABEL_BASE + 1));
    body.push(AInstr::Assign(
        Reg::X(1),
        Expr::op(Op::Add, vec![Expr::Reg(Reg::X(1)), Expr::int(1)]),
    ));
    vec![
        AInstr::Assign(Reg::X(1), Expr::int(sys.kappa_user as i64)),
        AInstr::While(
            ATTACK_LABEL_BASE,
            Expr::op(Op::Lt, vec![Expr::Reg(Reg::X(1)), Expr::int(n)]),
            body,
        ),
    ]
}

/// Stale-forwarding probe of one address: the poisoned load index makes the
/// guard read the pre-store array content, opening a transient window around
/// the call.
pub fn attack_stale_forward(labels: &ProbeLabels, probe: Addr) -> ACmd {
    let load_label = labels.load_in_t;
    let mut cmd = vec![
        AInstr::Poison(Directive::LoadIdx(load_label, 1)),
        AInstr::Spec(vec![Instr::Syscall("t".into(), vec![Expr::int(probe as i64)])]),
    ];
    cmd.extend(drain_observations(Reg::X(2), ATTACK_LABEL_BASE + 2));
    cmd
}

/// Direct target injection into the indirect call of `u`.
pub fn attack_target_inject(labels: &ProbeLabels, probe: Addr) -> ACmd {
    let call_label = labels.call_in_u;
    let mut cmd = vec![
        AInstr::Poison(Directive::Jump(call_label, probe)),
        AInstr::Spec(vec![Instr::Syscall("u".into(), vec![Expr::int(0)])]),
    ];
    cmd.extend(drain_observations(Reg::X(2), ATTACK_LABEL_BASE + 3));
    cmd
}

/// The forced-transient-execution snippet: poison a branch of the attacker's
/// own guard and run the guarded syscall speculatively.
pub fn spec_probe(guard: Expr, syscall: &str, args: Vec<Expr>, label: u32) -> ACmd {
    let mut cmd = vec![
        AInstr::Poison(Directive::Branch(label, true)),
        AInstr::Spec(vec![Instr::If(
            label,
            guard,
            vec![Instr::Syscall(syscall.to_string(), args)],
            vec![],
        )]),
    ];
    cmd.extend(drain_observations(Reg::X(3), ATTACK_LABEL_BASE + 4));
    cmd
}

/// Result of driving one attack against one system.
#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub attack: &'static str,
    pub succeeded: bool,
    /// Probed address that triggered the violation.
    pub discovered: Option<Addr>,
    /// Observations of the successful run.
    pub log: Vec<String>,
    pub runs: u64,
}

/// Runs an attack against a system across every enumerated layout (and, for
/// the one-shot attacks, across the kernel probe range). Succeeds when some
/// run reaches the violation state.
pub fn run_attack(
    sys: &System,
    labels: &ProbeLabels,
    kind: AttackKind,
    theta: u64,
    fuel: u64,
) -> AttackReport {
    let layouts: Vec<Layout> =
        enumerate_layouts(sys, &LayoutDistribution::SlotUniform { theta }, 4096)
            .expect("enumerable scheme")
            .into_iter()
            .map(|(l, _)| l)
            .collect();
    let probes: Vec<Addr> = (sys.kappa_user..sys.addr_count()).collect();
    let mut runs = 0u64;
    let report = |succeeded: bool, discovered, run: &AttackerRun, runs: u64| AttackReport {
        attack: kind.name(),
        succeeded,
        discovered,
        log: run.log.iter().map(|o| o.to_string()).collect(),
        runs,
    };
    match kind {
        AttackKind::BranchSweep => {
            let attacker = attack_branch_sweep(sys, labels);
            for layout in &layouts {
                runs += 1;
                let run = run_attacker(sys, layout, &attacker, fuel);
                if run.outcome == Outcome::Unsafe {
                    let discovered = run.log.iter().rev().find_map(|o| match o {
                        Observation::Jump(a) => Some(*a),
                        _ => None,
                    });
                    return report(true, discovered, &run, runs);
                }
            }
        }
        AttackKind::StaleForward | AttackKind::TargetInject => {
            for layout in &layouts {
                for probe in &probes {
                    let attacker = match kind {
                        AttackKind::StaleForward => attack_stale_forward(labels, *probe),
                        _ => attack_target_inject(labels, *probe),
                    };
                    runs += 1;
                    let run = run_attacker(sys, layout, &attacker, fuel);
                    if run.outcome == Outcome::Unsafe {
                        return report(true, Some(*probe), &run, runs);
                    }
                }
            }
        }
    }
    let empty = AttackerRun { outcome: Outcome::Err, log: Vec::new(), steps: 0 };
    report(false, None, &empty, runs)
}

/// Attack матrix over the identity system and its three protected variants.
#[derive(Clone, Debug, Serialize)]
pub struct AttackMatrix {
    /// Row per system: (system name, per-attack success).
    pub rows: Vec<(String, Vec<AttackReport>)>,
}

/// Runs all three attacks against the identity system and each transformed
/// variant.
pub fn attack_matrix(sys: &System, theta: u64, fuel: u64) -> AttackMatrix {
    let labels = probe_labels(sys).expect("system exposes the three probe syscalls");
    let mut rows = Vec::new();
    let reports = AttackKind::ALL
        .iter()
        .map(|kind| run_attack(sys, &labels, *kind, theta, fuel))
        .collect();
    rows.push(("identity".to_string(), reports));
    for pass in Transformation::ALL {
        let protected = pass.apply_system(sys);
        let reports = AttackKind::ALL
            .iter()
            .map(|kind| run_attack(&protected, &labels, *kind, theta, fuel))
            .collect();
        rows.push((pass.name().to_string(), reports));
    }
    AttackMatrix { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_bundled_studies_parse_and_validate() {
        for name in bundled_names() {
            let src = bundled(name).unwrap();
            let sys = parse_system(src).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(sys.validate().is_empty(), "{name}");
        }
    }

    #[test]
    fn every_attack_breaks_the_identity_probe_system() {
        let sigma = three_syscall_system();
        let labels = probe_labels(&sigma).unwrap();
        for kind in AttackKind::ALL {
            let report = run_attack(&sigma, &labels, kind, 2, 5000);
            assert!(report.succeeded, "{} failed", kind.name());
            // The discovered address is the probe target's placement in some
            // layout of the enumeration.
            let discovered = report.discovered.expect("discovered address");
            assert!(discovered >= sigma.kappa_user);
        }
    }

    #[test]
    fn branch_sweep_discovers_the_procedure_address() {
        let sigma = three_syscall_system();
        let layouts = enumerate_layouts(&sigma, &LayoutDistribution::SlotUniform { theta: 2 }, 100)
            .unwrap();
        let (layout, _) = &layouts[0];
        let labels = probe_labels(&sigma).unwrap();
        let run = run_attacker(&sigma, layout, &attack_branch_sweep(&sigma, &labels), 5000);
        assert_eq!(run.outcome, Outcome::Unsafe);
        let hit = run.log.iter().rev().find_map(|o| match o {
            Observation::Jump(a) => Some(*a),
            _ => None,
        });
        assert_eq!(hit, layout.base(PROBE_PROC));
    }

    #[test]
    fn transformed_variants_block_every_attack() {
        let sigma = three_syscall_system();
        let labels = probe_labels(&sigma).unwrap();
        for pass in Transformation::ALL {
            let protected = pass.apply_system(&sigma);
            for kind in AttackKind::ALL {
                let report = run_attack(&protected, &labels, kind, 2, 5000);
                assert!(!report.succeeded, "{} not blocked by {}", kind.name(), pass.name());
            }
        }
    }

    #[test]
    fn spec_probe_forces_the_guarded_syscall() {
        let sigma = three_syscall_system();
        let layouts = enumerate_layouts(&sigma, &LayoutDistribution::SlotUniform { theta: 2 }, 100)
            .unwrap();
        let (layout, _) = &layouts[0];
        let target = layout.base(PROBE_PROC).unwrap() as i64;
        let attacker = spec_probe(
            Expr::bool(false),
            "s",
            vec![Expr::bool(true), Expr::int(target)],
            2000,
        );
        let run = run_attacker(&sigma, layout, &attacker, 2000);
        assert_eq!(run.outcome, Outcome::Unsafe);
    }
}
