//! Bounded checkers and statistical estimators.
//!
//! Every checker explores a finite, explicitly budgeted space and returns a
//! three-valued verdict: definitely unsafe (with a replayable witness), safe
//! within the explored space (flagged exhaustive when nothing was pruned), or
//! aborted on a hard budget limit. Witnesses replay deterministically.

pub mod classic_checks;
pub mod gen;
pub mod spec_checks;

use crate::buffer::{BufferedMemory, WriteBuffer};
use crate::classic::{Frame, Mode, RegisterMap};
use crate::lang::{Addr, IdName, Observation, SysName, System, Value};
use crate::layout::{compose, Layout};
use crate::specsem::{spec_step, Directive, SpecConfig, SpecStack};
use serde::Serialize;
use std::collections::BTreeMap;

/// Caps for bounded exploration. All dimensions are explicit so reruns with a
/// larger budget are comparable.
#[derive(Clone, Debug, Serialize)]
pub struct ExplorationBudget {
    /// Slot size of the layout scheme under test.
    pub theta: u64,
    /// Cap on enumerated layouts.
    pub layout_cap: u64,
    /// Per-path cap on speculative transitions.
    pub max_steps: usize,
    /// Cap on the speculation-stack height.
    pub max_spec_depth: usize,
    /// Per-path cap on non-step directives.
    pub max_directives: usize,
    /// Hard cap on distinct explored states per entry point.
    pub max_states: usize,
    /// Jump-directive targets; `None` probes the full kernel range.
    pub jump_probes: Option<Vec<Addr>>,
    /// Offer backtrack directives during exploration. Off by default:
    /// backtracking never unlocks additional violations, which the
    /// cross-check suite verifies.
    pub enable_bt: bool,
    /// Step budget for classic runs.
    pub fuel: u64,
}

impl Default for ExplorationBudget {
    fn default() -> Self {
        ExplorationBudget {
            theta: 2,
            layout_cap: 4096,
            max_steps: 40,
            max_spec_depth: 3,
            max_directives: 24,
            max_states: 200_000,
            jump_probes: None,
            enable_bt: false,
            fuel: 1000,
        }
    }
}

impl ExplorationBudget {
    pub fn probes_for(&self, sys: &System) -> Vec<Addr> {
        match &self.jump_probes {
            Some(list) => list.clone(),
            None => (sys.kappa_user..sys.addr_count()).collect(),
        }
    }
}

/// Entry point of a witness trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum TraceEntry {
    Syscall {
        name: SysName,
        args: Vec<Value>,
        /// Initial write buffer, newest first.
        buffer: Vec<(Addr, Value)>,
        misspec: bool,
    },
    Program {
        text: String,
    },
}

/// Replayable witness: the layout, the entry point, the directive sequence
/// and the observations it produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Trace {
    pub layout: BTreeMap<IdName, Addr>,
    /// Second layout for interference witnesses.
    pub layout_b: Option<BTreeMap<IdName, Addr>>,
    pub entry: TraceEntry,
    pub directives: Vec<Directive>,
    pub observations: Vec<Observation>,
    pub final_tag: String,
}

/// Checker result.
#[derive(Clone, Debug, Serialize)]
pub enum Verdict {
    Safe { exhausted: bool },
    Unsafe { witness: Box<Trace> },
    BudgetExceeded,
}

impl Verdict {
    pub fn is_unsafe(&self) -> bool {
        matches!(self, Verdict::Unsafe { .. })
    }

    pub fn is_exhausted_safe(&self) -> bool {
        matches!(self, Verdict::Safe { exhausted: true })
    }

    /// Property-specific label: the safety checkers talk about safety, the
    /// non-interference checkers about interference.
    pub fn label(&self, interference: bool) -> &'static str {
        match (self, interference) {
            (Verdict::Safe { .. }, false) => "safe",
            (Verdict::Unsafe { .. }, false) => "unsafe",
            (Verdict::Safe { .. }, true) => "non-interfering",
            (Verdict::Unsafe { .. }, true) => "interfering",
            (Verdict::BudgetExceeded, _) => "budget-exceeded",
        }
    }
}

/// Builds the initial speculative stack for a syscall entry.
pub fn syscall_spec_start(
    sys: &System,
    layout: &Layout,
    name: &str,
    args: &[Value],
    buffer: &[(Addr, Value)],
    misspec: bool,
) -> SpecStack {
    let body = sys.syscalls.get(name).cloned().unwrap_or_default();
    let frame = Frame::new(body, RegisterMap::with_args(args), Mode::Kernel(name.to_string()));
    let mem = BufferedMemory::with_buffer(
        WriteBuffer::from_entries(buffer.to_vec()),
        compose(sys, layout, &sys.store),
    );
    SpecStack::single(SpecConfig::start(frame, mem, misspec))
}

pub fn layout_to_map(layout: &Layout) -> BTreeMap<IdName, Addr> {
    layout.entries().map(|(n, a)| (n.clone(), a)).collect()
}

pub fn layout_from_map(map: &BTreeMap<IdName, Addr>) -> Layout {
    Layout::new(map.clone())
}

/// Re-executes a speculative witness and checks that it reproduces both the
/// recorded observations and the final state tag.
pub fn replay_trace(sys: &System, trace: &Trace) -> bool {
    let layout = layout_from_map(&trace.layout);
    let TraceEntry::Syscall { name, args, buffer, misspec } = &trace.entry else {
        return false;
    };
    let mut stack = syscall_spec_start(sys, &layout, name, args, buffer, *misspec);
    let mut observations = Vec::new();
    for directive in &trace.directives {
        match spec_step(sys, &layout, &stack, directive) {
            Ok((next, obs)) => {
                observations.push(obs);
                stack = next;
            }
            Err(_) => return false,
        }
    }
    if observations != trace.observations {
        return false;
    }
    match trace.final_tag.as_str() {
        "unsafe" => stack.top_is_unsafe(),
        _ => !stack.top_is_unsafe(),
    }
}

/// Argument menu for systematic syscall sweeps: every address plus the
/// undefined value and both truth values.
pub fn argument_menu(sys: &System) -> Vec<Value> {
    let mut menu: Vec<Value> = (0..sys.addr_count()).map(|a| Value::Int(a as i64)).collect();
    menu.push(Value::Nil);
    menu.push(Value::Bool(true));
    menu.push(Value::Bool(false));
    menu
}

/// Number of argument registers a syscall body mentions.
pub fn syscall_arity(sys: &System, name: &str) -> usize {
    use crate::lang::{Expr, Instr, Reg};
    fn expr_max(e: &Expr, max: &mut u8) {
        match e {
            Expr::Reg(Reg::X(i)) => *max = (*max).max(*i),
            Expr::Op(_, args) => args.iter().for_each(|a| expr_max(a, max)),
            _ => {}
        }
    }
    fn cmd_max(cmd: &[Instr], max: &mut u8) {
        for i in cmd {
            match i {
                Instr::Assign(_, e) | Instr::Load(_, _, e) => expr_max(e, max),
                Instr::Store(a, v) => {
                    expr_max(a, max);
                    expr_max(v, max);
                }
                Instr::Call(_, t, args) | Instr::SCall(t, args) => {
                    expr_max(t, max);
                    args.iter().for_each(|a| expr_max(a, max));
                }
                Instr::Syscall(_, args) => args.iter().for_each(|a| expr_max(a, max)),
                Instr::If(_, e, c1, c2) => {
                    expr_max(e, max);
                    cmd_max(c1, max);
                    cmd_max(c2, max);
                }
                Instr::While(_, e, c) => {
                    expr_max(e, max);
                    cmd_max(c, max);
                }
                Instr::Skip | Instr::Fence => {}
            }
        }
    }
    let mut max = 0u8;
    if let Some(body) = sys.syscalls.get(name) {
        cmd_max(body, &mut max);
    }
    max as usize
}

/// Cartesian argument vectors of the given arity over the menu. Zero arity
/// yields the single empty vector.
pub fn argument_vectors(menu: &[Value], arity: usize) -> Vec<Vec<Value>> {
    let mut out: Vec<Vec<Value>> = vec![Vec::new()];
    for _ in 0..arity {
        let mut next = Vec::with_capacity(out.len() * menu.len());
        for prefix in &out {
            for v in menu {
                let mut vec = prefix.clone();
                vec.push(v.clone());
                next.push(vec);
            }
        }
        out = next;
    }
    out
}
