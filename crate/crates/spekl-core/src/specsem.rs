//! Directive-driven speculative semantics.
//!
//! The machine state is a stack of backtrackable configurations; the topmost
//! one is current. Speculating transitions (a predicted branch, a stale
//! forwarded load, an injected jump target) push the successor on top of the
//! pre-speculation state and record whether the prediction was wrong in the
//! mis-speculation flag. `bt` either discards a mis-speculated top or, when
//! the top is sound, drops all book-kept states below it. `fence` refuses to
//! execute under mis-speculation and otherwise commits the write buffer.
//! Non-speculative calls (`scall`) accept no jump directives: their target is
//! always the evaluated one.

use crate::buffer::BufferedMemory;
use crate::classic::{
    classify_call_access, classify_data_access, code_at, eval_expr, syscall_entry_mode, to_addr,
    to_bool, Access, Frame, Outcome, RegisterMap,
};
use crate::lang::{Addr, Cmd, Instr, Label, Observation, Reg, Store, System, Value};
use crate::layout::{recover_store, Cell, Layout};
use serde::Serialize;

/// Predictor directive.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Directive {
    /// Resolve the branch labeled `label` as `taken`.
    Branch(Label, bool),
    /// Steer the call labeled `label` to `addr`.
    Jump(Label, Addr),
    /// Forward the `n`-th most recent buffered value to the load at `label`.
    LoadIdx(Label, u32),
    /// Backtrack or commit the current speculation state.
    Bt,
    /// Take the non-speculating step.
    Step,
}

impl std::fmt::Display for Directive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Directive::Branch(l, b) => write!(f, "branch@{l} {b}"),
            Directive::Jump(l, a) => write!(f, "jump@{l} {a}"),
            Directive::LoadIdx(l, i) => write!(f, "load@{l} {i}"),
            Directive::Bt => write!(f, "bt"),
            Directive::Step => write!(f, "step"),
        }
    }
}

/// One backtrackable configuration.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SpecConfig {
    Live { frames: Vec<Frame>, mem: BufferedMemory, misspec: bool },
    Err { misspec: bool },
    Unsafe,
}

impl SpecConfig {
    pub fn start(frame: Frame, mem: BufferedMemory, misspec: bool) -> SpecConfig {
        SpecConfig::Live { frames: vec![frame], mem, misspec }
    }

    pub fn misspec(&self) -> Option<bool> {
        match self {
            SpecConfig::Live { misspec, .. } | SpecConfig::Err { misspec } => Some(*misspec),
            SpecConfig::Unsafe => None,
        }
    }
}

/// Stack of backtrackable configurations, top last.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct SpecStack {
    configs: Vec<SpecConfig>,
}

impl SpecStack {
    pub fn single(config: SpecConfig) -> SpecStack {
        SpecStack { configs: vec![config] }
    }

    pub fn top(&self) -> Option<&SpecConfig> {
        self.configs.last()
    }

    pub fn height(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Terminal states: a safety violation, an unrecoverable error, a fully
    /// evaluated single frame, or a fully discarded stack.
    pub fn is_terminal(&self) -> bool {
        match self.top() {
            None => true,
            Some(SpecConfig::Unsafe) => true,
            Some(SpecConfig::Err { misspec }) => !*misspec && self.configs.len() == 1,
            Some(SpecConfig::Live { frames, .. }) => {
                self.configs.len() == 1
                    && frames.len() == 1
                    && frames[0].code.is_empty()
            }
        }
    }

    pub fn top_is_unsafe(&self) -> bool {
        matches!(self.top(), Some(SpecConfig::Unsafe))
    }

    fn replace_top(&self, config: SpecConfig) -> SpecStack {
        let mut next = self.clone();
        *next.configs.last_mut().expect("non-empty") = config;
        next
    }

    fn push_over_top(&self, config: SpecConfig) -> SpecStack {
        let mut next = self.clone();
        next.configs.push(config);
        next
    }

    fn pop_top(&self) -> SpecStack {
        let mut next = self.clone();
        next.configs.pop();
        next
    }

    fn keep_top_only(&self) -> SpecStack {
        SpecStack { configs: vec![self.top().expect("non-empty").clone()] }
    }

    pub fn buffer_len(&self) -> usize {
        match self.top() {
            Some(SpecConfig::Live { mem, .. }) => mem.buffer.len(),
            _ => 0,
        }
    }
}

/// The directive does not apply to the current state.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
#[error("directive does not apply to the current state")]
pub struct NotApplicable;

/// Collapses a whole stack into the terminal violation state.
fn collapse_unsafe() -> SpecStack {
    SpecStack::single(SpecConfig::Unsafe)
}

/// One transition of the speculative semantics under a directive, producing
/// the successor stack and the emitted observation.
pub fn spec_step(
    sys: &System,
    layout: &Layout,
    stack: &SpecStack,
    directive: &Directive,
) -> Result<(SpecStack, Observation), NotApplicable> {
    let top = stack.top().ok_or(NotApplicable)?;
    // Backtracking applies to live and error tops alike.
    if let Directive::Bt = directive {
        return match top.misspec() {
            Some(true) => Ok((stack.pop_top(), Observation::Bt(true))),
            Some(false) if stack.height() > 1 => {
                Ok((stack.keep_top_only(), Observation::Bt(false)))
            }
            _ => Err(NotApplicable),
        };
    }
    let (frames, mem, misspec) = match top {
        SpecConfig::Live { frames, mem, misspec } => (frames, mem, *misspec),
        _ => return Err(NotApplicable),
    };
    let n = sys.addr_count();
    let top_frame = frames.last().expect("live stacks are non-empty");

    // Frame pop: only a plain step, and only with a caller below.
    if top_frame.code.is_empty() {
        if !matches!(directive, Directive::Step) || frames.len() < 2 {
            return Err(NotApplicable);
        }
        let mut frames = frames.clone();
        let finished = frames.pop().expect("non-empty");
        let below = frames.last_mut().expect("two frames");
        below.regs.set(Reg::Ret, finished.regs.get(Reg::Ret).clone());
        let next = SpecConfig::Live { frames, mem: mem.clone(), misspec };
        return Ok((stack.replace_top(next), Observation::None));
    }

    let instr = top_frame.code[0].clone();
    let rest: Cmd = top_frame.code[1..].to_vec();
    let live = |frames: Vec<Frame>, mem: BufferedMemory, misspec: bool| SpecConfig::Live {
        frames,
        mem,
        misspec,
    };
    let with_top_code = |code: Cmd, regs: RegisterMap| {
        let mut frames = frames.clone();
        let top = frames.last_mut().expect("non-empty");
        top.code = code;
        top.regs = regs;
        frames
    };

    match (directive, instr) {
        (Directive::Step, Instr::Skip) | (Directive::Step, Instr::Assign(..)) => {
            let frames = match &top_frame.code[0] {
                Instr::Assign(r, e) => {
                    let v = eval_expr(e, &top_frame.regs, layout);
                    with_top_code(rest, top_frame.regs.updated(*r, v))
                }
                _ => with_top_code(rest, top_frame.regs.clone()),
            };
            Ok((stack.replace_top(live(frames, mem.clone(), misspec)), Observation::None))
        }
        (Directive::Step, Instr::Fence) => {
            if misspec {
                return Err(NotApplicable);
            }
            let committed = BufferedMemory::new(mem.commit());
            let frames = with_top_code(rest, top_frame.regs.clone());
            Ok((stack.replace_top(live(frames, committed, false)), Observation::None))
        }
        (Directive::Step, Instr::Load(_, r, e)) => {
            let addr = to_addr(&eval_expr(&e, &top_frame.regs, layout), n);
            match classify_data_access(sys, layout, &top_frame.mode, addr) {
                Access::Ok => {
                    let (cell, stale) = mem.read(addr, 0);
                    debug_assert!(!stale);
                    let v = cell_value(cell);
                    let frames = with_top_code(rest, top_frame.regs.updated(r, v));
                    Ok((
                        stack.replace_top(live(frames, mem.clone(), misspec)),
                        Observation::Mem(addr),
                    ))
                }
                Access::Error => Ok((
                    stack.replace_top(SpecConfig::Err { misspec }),
                    Observation::None,
                )),
                Access::Unsafe => Ok((collapse_unsafe(), Observation::Mem(addr))),
            }
        }
        (Directive::LoadIdx(l, i), Instr::Load(label, r, e)) if *l == label => {
            let addr = to_addr(&eval_expr(&e, &top_frame.regs, layout), n);
            match classify_data_access(sys, layout, &top_frame.mode, addr) {
                Access::Ok => {
                    let (cell, stale) = mem.read(addr, *i);
                    let v = cell_value(cell);
                    let frames = with_top_code(rest, top_frame.regs.updated(r, v));
                    let next = live(frames, mem.clone(), misspec || stale);
                    Ok((stack.push_over_top(next), Observation::Mem(addr)))
                }
                Access::Error => Ok((
                    stack.replace_top(SpecConfig::Err { misspec }),
                    Observation::None,
                )),
                Access::Unsafe => Ok((collapse_unsafe(), Observation::Mem(addr))),
            }
        }
        (Directive::Step, Instr::Store(ea, ev)) => {
            let addr = to_addr(&eval_expr(&ea, &top_frame.regs, layout), n);
            match classify_data_access(sys, layout, &top_frame.mode, addr) {
                Access::Ok => {
                    let v = eval_expr(&ev, &top_frame.regs, layout);
                    let frames = with_top_code(rest, top_frame.regs.clone());
                    Ok((
                        stack.replace_top(live(frames, mem.buffered_write(addr, v), misspec)),
                        Observation::Mem(addr),
                    ))
                }
                Access::Error => Ok((
                    stack.replace_top(SpecConfig::Err { misspec }),
                    Observation::None,
                )),
                Access::Unsafe => Ok((collapse_unsafe(), Observation::None)),
            }
        }
        (Directive::Step, Instr::Call(_, target, args))
        | (Directive::Step, Instr::SCall(target, args)) => {
            let addr = to_addr(&eval_expr(&target, &top_frame.regs, layout), n);
            match classify_call_access(sys, layout, &top_frame.mode, addr) {
                Access::Ok => {
                    let vals: Vec<Value> =
                        args.iter().map(|a| eval_expr(a, &top_frame.regs, layout)).collect();
                    let callee = Frame::new(
                        code_at(&mem.memory, addr),
                        RegisterMap::with_args(&vals),
                        top_frame.mode.clone(),
                    );
                    let mut frames = with_top_code(rest, top_frame.regs.clone());
                    frames.push(callee);
                    Ok((
                        stack.replace_top(live(frames, mem.clone(), misspec)),
                        Observation::Jump(addr),
                    ))
                }
                Access::Error => Ok((
                    stack.replace_top(SpecConfig::Err { misspec }),
                    Observation::None,
                )),
                Access::Unsafe => Ok((collapse_unsafe(), Observation::Jump(addr))),
            }
        }
        (Directive::Jump(l, addr), Instr::Call(label, target, args)) if *l == label => {
            let addr = *addr;
            let predicted_wrong =
                addr != to_addr(&eval_expr(&target, &top_frame.regs, layout), n);
            match classify_call_access(sys, layout, &top_frame.mode, addr) {
                Access::Ok => {
                    let vals: Vec<Value> =
                        args.iter().map(|a| eval_expr(a, &top_frame.regs, layout)).collect();
                    let callee = Frame::new(
                        code_at(&mem.memory, addr),
                        RegisterMap::with_args(&vals),
                        top_frame.mode.clone(),
                    );
                    let mut frames = with_top_code(rest, top_frame.regs.clone());
                    frames.push(callee);
                    let next = live(frames, mem.clone(), misspec || predicted_wrong);
                    Ok((stack.push_over_top(next), Observation::Jump(addr)))
                }
                Access::Error => {
                    let next = SpecConfig::Err { misspec: misspec || predicted_wrong };
                    Ok((stack.push_over_top(next), Observation::None))
                }
                Access::Unsafe => Ok((collapse_unsafe(), Observation::Jump(addr))),
            }
        }
        (Directive::Step, Instr::Syscall(name, args)) => {
            let vals: Vec<Value> =
                args.iter().map(|a| eval_expr(a, &top_frame.regs, layout)).collect();
            let body = sys.syscalls.get(&name).cloned().unwrap_or_default();
            let mode = syscall_entry_mode(&top_frame.mode, &name);
            let callee = Frame::new(body, RegisterMap::with_args(&vals), mode);
            let mut frames = with_top_code(rest, top_frame.regs.clone());
            frames.push(callee);
            Ok((stack.replace_top(live(frames, mem.clone(), misspec)), Observation::None))
        }
        (Directive::Step, Instr::If(_, guard, then_cmd, else_cmd)) => {
            let taken = to_bool(&eval_expr(&guard, &top_frame.regs, layout));
            let branch = if taken { then_cmd } else { else_cmd };
            let code: Cmd = branch.into_iter().chain(rest).collect();
            let frames = with_top_code(code, top_frame.regs.clone());
            Ok((
                stack.replace_top(live(frames, mem.clone(), misspec)),
                Observation::Branch(taken),
            ))
        }
        (Directive::Branch(l, taken), Instr::If(label, guard, then_cmd, else_cmd))
            if *l == label =>
        {
            let taken = *taken;
            let actual = to_bool(&eval_expr(&guard, &top_frame.regs, layout));
            let branch = if taken { then_cmd } else { else_cmd };
            let code: Cmd = branch.into_iter().chain(rest).collect();
            let frames = with_top_code(code, top_frame.regs.clone());
            let next = live(frames, mem.clone(), misspec || taken != actual);
            Ok((stack.push_over_top(next), Observation::Branch(taken)))
        }
        (Directive::Step, Instr::While(label, guard, body)) => {
            let taken = to_bool(&eval_expr(&guard, &top_frame.regs, layout));
            let code: Cmd = loop_continuation(taken, label, &guard, &body, &rest);
            let frames = with_top_code(code, top_frame.regs.clone());
            Ok((
                stack.replace_top(live(frames, mem.clone(), misspec)),
                Observation::Branch(taken),
            ))
        }
        (Directive::Branch(l, taken), Instr::While(label, guard, body)) if *l == label => {
            let taken = *taken;
            let actual = to_bool(&eval_expr(&guard, &top_frame.regs, layout));
            let code: Cmd = loop_continuation(taken, label, &guard, &body, &rest);
            let frames = with_top_code(code, top_frame.regs.clone());
            let next = live(frames, mem.clone(), misspec || taken != actual);
            Ok((stack.push_over_top(next), Observation::Branch(taken)))
        }
        _ => Err(NotApplicable),
    }
}

fn loop_continuation(
    taken: bool,
    label: Label,
    guard: &crate::lang::Expr,
    body: &Cmd,
    rest: &Cmd,
) -> Cmd {
    if taken {
        body.iter()
            .cloned()
            .chain(std::iter::once(Instr::While(label, guard.clone(), body.clone())))
            .chain(rest.iter().cloned())
            .collect()
    } else {
        rest.clone()
    }
}

fn cell_value(cell: Cell) -> Value {
    match cell {
        Cell::Val(v) => v,
        // Loads are guarded to array footprints, which hold values.
        _ => Value::Nil,
    }
}

/// Directives that fire in the current state. Jump directives are drawn from
/// the probe set; load indices range over the buffered generations of the
/// resolved address plus the memory fall-through.
pub fn enabled_directives(
    sys: &System,
    layout: &Layout,
    stack: &SpecStack,
    jump_probes: &[Addr],
) -> Vec<Directive> {
    let mut out = Vec::new();
    let Some(top) = stack.top() else { return out };

    if spec_step(sys, layout, stack, &Directive::Step).is_ok() {
        out.push(Directive::Step);
    }
    if let SpecConfig::Live { frames, mem, .. } = top {
        if let Some(instr) = frames.last().and_then(|f| f.code.first()) {
            match instr {
                Instr::If(l, _, _, _) | Instr::While(l, _, _) => {
                    out.push(Directive::Branch(*l, true));
                    out.push(Directive::Branch(*l, false));
                }
                Instr::Load(l, _, e) => {
                    let regs = &frames.last().expect("non-empty").regs;
                    let addr = to_addr(&eval_expr(e, regs, layout), sys.addr_count());
                    let generations = mem.buffer.count_for(addr) as u32;
                    for i in 0..=generations {
                        out.push(Directive::LoadIdx(*l, i));
                    }
                }
                Instr::Call(l, _, _) => {
                    for addr in jump_probes {
                        out.push(Directive::Jump(*l, *addr));
                    }
                }
                _ => {}
            }
        }
    }
    if spec_step(sys, layout, stack, &Directive::Bt).is_ok() {
        out.push(Directive::Bt);
    }
    out
}

/// Trace record serialized by the speculative runners.
#[derive(Clone, Debug, Serialize)]
pub struct SpecTraceRecord {
    pub directive: String,
    pub observation: String,
    pub top_misspec: Option<bool>,
    pub stack_height: usize,
    pub buffer_length: usize,
}

pub fn spec_trace_record(
    directive: &Directive,
    observation: &Observation,
    stack: &SpecStack,
) -> SpecTraceRecord {
    SpecTraceRecord {
        directive: directive.to_string(),
        observation: observation.to_string(),
        top_misspec: stack.top().and_then(|c| c.misspec()),
        stack_height: stack.height(),
        buffer_length: stack.buffer_len(),
    }
}

/// Outcome of a step-only speculative run, comparable with the classic one.
pub fn spec_run_steps_only(
    sys: &System,
    layout: &Layout,
    entry: Frame,
    mem: BufferedMemory,
    fuel: u64,
) -> (Outcome, Vec<Observation>) {
    let mut stack = SpecStack::single(SpecConfig::start(entry, mem, false));
    let mut observations = Vec::new();
    for _ in 0..fuel {
        match stack.top() {
            Some(SpecConfig::Unsafe) => return (Outcome::Unsafe, observations),
            Some(SpecConfig::Err { .. }) => return (Outcome::Err, observations),
            None => return (Outcome::Err, observations),
            Some(SpecConfig::Live { frames, mem, .. }) => {
                if frames.len() == 1 && frames[0].code.is_empty() {
                    let ret = frames[0].regs.get(Reg::Ret).clone();
                    let store = recover_store(sys, layout, &mem.commit());
                    return (Outcome::Terminated { ret, store }, observations);
                }
            }
        }
        match spec_step(sys, layout, &stack, &Directive::Step) {
            Ok((next, obs)) => {
                observations.push(obs);
                stack = next;
            }
            Err(NotApplicable) => return (Outcome::Err, observations),
        }
    }
    (Outcome::FuelExhausted, observations)
}

/// Final store of a step-only run, when it terminated.
pub fn committed_store(sys: &System, layout: &Layout, outcome: &Outcome) -> Option<Store> {
    match outcome {
        Outcome::Terminated { store, .. } => Some(store.clone()),
        _ => {
            let _ = (sys, layout);
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classic::Mode;
    use crate::lang::parse::{parse_cmd_text, parse_system};
    use crate::layout::{compose, enumerate_layouts, LayoutDistribution};
    use crate::classic;

    fn sys_with_array() -> (System, Layout) {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (array a 2 init 4 0)\n\
             (proc f ((:= ret 0)))\n\
             (syscall s (caps a) ((store a 5) (load x1 a)))",
        )
        .unwrap();
        let layout =
            enumerate_layouts(&sys, &LayoutDistribution::SlotUniform { theta: 2 }, 100).unwrap()[0]
                .0
                .clone();
        (sys, layout)
    }

    fn kernel_entry(sys: &System, name: &str, args: &[Value]) -> Frame {
        Frame::new(
            sys.syscalls.get(name).unwrap().clone(),
            RegisterMap::with_args(args),
            Mode::Kernel(name.to_string()),
        )
    }

    fn start_stack(sys: &System, layout: &Layout, name: &str, args: &[Value]) -> SpecStack {
        let mem = BufferedMemory::new(compose(sys, layout, &sys.store));
        SpecStack::single(SpecConfig::start(kernel_entry(sys, name, args), mem, false))
    }

    #[test]
    fn store_buffers_the_write_and_leaks_the_address() {
        let (sys, layout) = sys_with_array();
        let stack = start_stack(&sys, &layout, "s", &[]);
        let (next, obs) = spec_step(&sys, &layout, &stack, &Directive::Step).unwrap();
        let base = layout.base("a").unwrap();
        assert_eq!(obs, Observation::Mem(base));
        match next.top().unwrap() {
            SpecConfig::Live { mem, .. } => {
                assert_eq!(mem.buffer.len(), 1);
                assert_eq!(mem.read(base, 0).0, Cell::Val(Value::Int(5)));
                assert_eq!(mem.read(base, 1).0, Cell::Val(Value::Int(4)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stale_load_engages_misspeculation_and_books_the_state() {
        let (sys, layout) = sys_with_array();
        let stack = start_stack(&sys, &layout, "s", &[]);
        let (after_store, _) = spec_step(&sys, &layout, &stack, &Directive::Step).unwrap();
        let load_label = sys.labels_in_syscall("s", crate::lang::LabelKind::Load)[0];
        let (after_load, obs) =
            spec_step(&sys, &layout, &after_store, &Directive::LoadIdx(load_label, 1)).unwrap();
        assert_eq!(obs, Observation::Mem(layout.base("a").unwrap()));
        assert_eq!(after_load.height(), 2);
        match after_load.top().unwrap() {
            SpecConfig::Live { frames, misspec, .. } => {
                assert!(*misspec, "stale read sets the flag");
                assert_eq!(frames.last().unwrap().regs.get(Reg::X(1)), &Value::Int(4));
            }
            other => panic!("unexpected {other:?}"),
        }
        // Fresh index 0 books the state but stays sound.
        let (after_fresh, _) =
            spec_step(&sys, &layout, &after_store, &Directive::LoadIdx(load_label, 0)).unwrap();
        assert_eq!(after_fresh.top().unwrap().misspec(), Some(false));
    }

    #[test]
    fn jump_to_uncapped_kernel_procedure_is_unsafe() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (proc f ((:= ret 0)))\n\
             (syscall u (caps) ((call x1)))",
        )
        .unwrap();
        let layout =
            enumerate_layouts(&sys, &LayoutDistribution::SlotUniform { theta: 2 }, 100).unwrap()[0]
                .0
                .clone();
        let stack = start_stack(&sys, &layout, "u", &[Value::Int(0)]);
        let label = sys.labels_in_syscall("u", crate::lang::LabelKind::Call)[0];
        let target = layout.base("f").unwrap();
        let (next, obs) =
            spec_step(&sys, &layout, &stack, &Directive::Jump(label, target)).unwrap();
        assert_eq!(obs, Observation::Jump(target));
        assert!(next.top_is_unsafe());

        // A jump into the void is a recoverable error pushed over the saved
        // state, flagged as a wrong prediction.
        let miss = (target + 1) % sys.addr_count();
        let (next, obs) = spec_step(&sys, &layout, &stack, &Directive::Jump(label, miss)).unwrap();
        assert_eq!(obs, Observation::None);
        assert_eq!(next.height(), 2);
        assert_eq!(next.top().unwrap().misspec(), Some(true));
    }

    #[test]
    fn backtrack_pops_misspeculation_and_commits_sound_tops() {
        let (sys, layout) = sys_with_array();
        let stack = start_stack(&sys, &layout, "s", &[]);
        let (after_store, _) = spec_step(&sys, &layout, &stack, &Directive::Step).unwrap();
        let load_label = sys.labels_in_syscall("s", crate::lang::LabelKind::Load)[0];
        let (speculating, _) =
            spec_step(&sys, &layout, &after_store, &Directive::LoadIdx(load_label, 1)).unwrap();

        let (rolled_back, obs) = spec_step(&sys, &layout, &speculating, &Directive::Bt).unwrap();
        assert_eq!(obs, Observation::Bt(true));
        assert_eq!(rolled_back, after_store);

        // A sound top with book-kept states below discards the tail.
        let (sound, _) =
            spec_step(&sys, &layout, &after_store, &Directive::LoadIdx(load_label, 0)).unwrap();
        let (committed, obs) = spec_step(&sys, &layout, &sound, &Directive::Bt).unwrap();
        assert_eq!(obs, Observation::Bt(false));
        assert_eq!(committed.height(), 1);
        assert_eq!(committed.top(), sound.top());
    }

    #[test]
    fn fence_requires_soundness_and_commits_the_buffer() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (array a 1 init 9)\n\
             (syscall s (caps a) ((store a 3) (fence) (load x1 a)))",
        )
        .unwrap();
        let layout =
            enumerate_layouts(&sys, &LayoutDistribution::SlotUniform { theta: 2 }, 100).unwrap()[0]
                .0
                .clone();
        let stack = start_stack(&sys, &layout, "s", &[]);
        let (after_store, _) = spec_step(&sys, &layout, &stack, &Directive::Step).unwrap();
        let (after_fence, obs) = spec_step(&sys, &layout, &after_store, &Directive::Step).unwrap();
        assert_eq!(obs, Observation::None);
        match after_fence.top().unwrap() {
            SpecConfig::Live { mem, .. } => {
                assert!(mem.buffer.is_empty());
                assert_eq!(mem.memory.get(layout.base("a").unwrap()), &Cell::Val(Value::Int(3)));
            }
            other => panic!("unexpected {other:?}"),
        }

        // Under mis-speculation only backtracking applies at a fence.
        let misspec_stack = SpecStack::single(SpecConfig::Live {
            frames: vec![Frame::new(
                parse_cmd_text("(fence)", 900).unwrap(),
                RegisterMap::initial(),
                Mode::Kernel("s".into()),
            )],
            mem: BufferedMemory::new(compose(&sys, &layout, &sys.store)),
            misspec: true,
        });
        assert_eq!(
            spec_step(&sys, &layout, &misspec_stack, &Directive::Step),
            Err(NotApplicable)
        );
        let enabled = enabled_directives(&sys, &layout, &misspec_stack, &[]);
        assert_eq!(enabled, vec![Directive::Bt]);
    }

    #[test]
    fn branch_directives_are_offered_in_both_directions() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (syscall s (caps) ((if x1 ((skip)) ((skip)))))",
        )
        .unwrap();
        let layout =
            enumerate_layouts(&sys, &LayoutDistribution::SlotUniform { theta: 2 }, 100).unwrap()[0]
                .0
                .clone();
        let stack = start_stack(&sys, &layout, "s", &[Value::Bool(false)]);
        let label = sys.labels_in_syscall("s", crate::lang::LabelKind::Branch)[0];
        let enabled = enabled_directives(&sys, &layout, &stack, &[]);
        assert!(enabled.contains(&Directive::Step));
        assert!(enabled.contains(&Directive::Branch(label, true)));
        assert!(enabled.contains(&Directive::Branch(label, false)));
        assert!(!enabled.contains(&Directive::Bt));

        let (next, obs) =
            spec_step(&sys, &layout, &stack, &Directive::Branch(label, true)).unwrap();
        assert_eq!(obs, Observation::Branch(true));
        assert_eq!(next.height(), 2);
        assert_eq!(next.top().unwrap().misspec(), Some(true));
    }

    #[test]
    fn scall_accepts_no_jump_directives() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (proc f ((:= ret 0)))\n\
             (syscall s (caps f) ((scall f)))",
        )
        .unwrap();
        let layout =
            enumerate_layouts(&sys, &LayoutDistribution::SlotUniform { theta: 2 }, 100).unwrap()[0]
                .0
                .clone();
        let stack = start_stack(&sys, &layout, "s", &[]);
        let probes: Vec<Addr> = (8..16).collect();
        let enabled = enabled_directives(&sys, &layout, &stack, &probes);
        assert_eq!(enabled, vec![Directive::Step]);
    }

    #[test]
    fn step_only_runs_agree_with_the_classic_semantics() {
        let (sys, layout) = sys_with_array();
        let entry = kernel_entry(&sys, "s", &[]);
        let mem = BufferedMemory::new(compose(&sys, &layout, &sys.store));
        let (spec_out, _) = spec_run_steps_only(&sys, &layout, entry, mem.clone(), 100);
        let classic_out = classic::run_from_traced(
            &sys,
            &layout,
            crate::classic::ClassicConfig::Running {
                stack: vec![kernel_entry(&sys, "s", &[])],
                memory: mem.commit(),
            },
            100,
            None,
        );
        assert_eq!(spec_out, classic_out);
    }

    #[test]
    fn store_then_load_forwards_the_new_value() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (array a 1 init 1)\n\
             (syscall s (caps a) ((store a 42) (load ret a)))",
        )
        .unwrap();
        let layout =
            enumerate_layouts(&sys, &LayoutDistribution::SlotUniform { theta: 2 }, 100).unwrap()[0]
                .0
                .clone();
        let entry = kernel_entry(&sys, "s", &[]);
        let mem = BufferedMemory::new(compose(&sys, &layout, &sys.store));
        let (out, _) = spec_run_steps_only(&sys, &layout, entry, mem, 100);
        match out {
            Outcome::Terminated { ret, .. } => assert_eq!(ret, Value::Int(42)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fence_only_body_commits_and_terminates() {
        let sys = parse_system("(addr-space 8 8) (space kernel) (array a 1 init 0) (syscall s (caps a) ((store a 8) (fence)))").unwrap();
        let layout =
            enumerate_layouts(&sys, &LayoutDistribution::SlotUniform { theta: 2 }, 100).unwrap()[0]
                .0
                .clone();
        let entry = kernel_entry(&sys, "s", &[]);
        let mem = BufferedMemory::new(compose(&sys, &layout, &sys.store));
        let (out, _) = spec_run_steps_only(&sys, &layout, entry, mem, 100);
        match out {
            Outcome::Terminated { store, .. } => match store.get("a") {
                Some(crate::lang::StoreEntry::Array(vs)) => assert_eq!(vs[0], Value::Int(8)),
                other => panic!("unexpected {other:?}"),
            },
            other => panic!("unexpected {other:?}"),
        }
    }
}
