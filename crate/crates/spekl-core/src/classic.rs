//! Non-speculative small-step semantics, instrumented for capability
//! violations.
//!
//! Loads, stores and calls check that the target address is visible in the
//! current execution mode (user arrays and procedures in user mode, kernel
//! ones in kernel mode). On top of that, kernel-mode accesses must stay
//! within the running syscall's capabilities: an access to a kernel object
//! outside the capability set is a safety violation, while an access outside
//! the visible footprints is an ordinary error. `fence` is an architectural
//! no-op and `scall` behaves exactly like `call`.

use crate::lang::{
    Addr, Cmd, Expr, IdKind, Instr, Reg, Space, Store, SysName, System, Value, MAX_ARG_REGS,
};
use crate::layout::{compose, recover_store, Cell, Layout, Memory};
use serde::Serialize;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

/// Total register file: `ret` plus `x1..x8`, all `Nil` initially.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegisterMap {
    values: [Value; 1 + MAX_ARG_REGS as usize],
}

impl Default for RegisterMap {
    fn default() -> Self {
        RegisterMap { values: std::array::from_fn(|_| Value::Nil) }
    }
}

impl RegisterMap {
    /// The initial register map sends every register to `Nil`.
    pub fn initial() -> RegisterMap {
        RegisterMap::default()
    }

    /// Initial map with arguments loaded into `x1..xn`.
    pub fn with_args(args: &[Value]) -> RegisterMap {
        let mut regs = RegisterMap::initial();
        for (i, v) in args.iter().enumerate() {
            regs.set(Reg::X(i as u8 + 1), v.clone());
        }
        regs
    }

    pub fn get(&self, r: Reg) -> &Value {
        &self.values[reg_index(r)]
    }

    pub fn set(&mut self, r: Reg, v: Value) {
        self.values[reg_index(r)] = v;
    }

    pub fn updated(&self, r: Reg, v: Value) -> RegisterMap {
        let mut next = self.clone();
        next.set(r, v);
        next
    }
}

fn reg_index(r: Reg) -> usize {
    match r {
        Reg::Ret => 0,
        Reg::X(i) => i as usize,
    }
}

/// Execution mode: unprivileged, or kernel mode tagged with the syscall that
/// entered it (nested syscalls keep the outer tag, so the outer capability
/// set stays in force).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    User,
    Kernel(SysName),
}

impl Mode {
    pub fn space(&self) -> Space {
        match self {
            Mode::User => Space::User,
            Mode::Kernel(_) => Space::Kernel,
        }
    }
}

/// One activation record: remaining command, registers, mode.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub code: Cmd,
    pub regs: RegisterMap,
    pub mode: Mode,
}

impl Frame {
    pub fn new(code: Cmd, regs: RegisterMap, mode: Mode) -> Frame {
        Frame { code, regs, mode }
    }
}

/// Machine state of the classic semantics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassicConfig {
    Running { stack: Vec<Frame>, memory: Memory },
    Err,
    Unsafe,
}

impl ClassicConfig {
    pub fn start(entry: Cmd, regs: RegisterMap, mode: Mode, memory: Memory) -> ClassicConfig {
        ClassicConfig::Running { stack: vec![Frame::new(entry, regs, mode)], memory }
    }

    /// Terminal running state: a single frame with no code left.
    pub fn is_terminated(&self) -> bool {
        matches!(self, ClassicConfig::Running { stack, .. }
            if stack.len() == 1 && stack[0].code.is_empty())
    }
}

/// Result of a bounded run. Divergence is approximated by fuel exhaustion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Terminated { ret: Value, store: Store },
    Err,
    Unsafe,
    FuelExhausted,
}

impl Outcome {
    pub fn tag(&self) -> &'static str {
        match self {
            Outcome::Terminated { .. } => "terminated",
            Outcome::Err => "err",
            Outcome::Unsafe => "unsafe",
            Outcome::FuelExhausted => "fuel-exhausted",
        }
    }
}

/// Why a step could not be taken.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum StepError {
    #[error("configuration is terminal")]
    Terminal,
}

/// Evaluates an expression: registers from the frame, identifiers resolved to
/// their base address under the layout. Total.
pub fn eval_expr(expr: &Expr, regs: &RegisterMap, layout: &Layout) -> Value {
    match expr {
        Expr::Const(v) => v.clone(),
        Expr::Reg(r) => regs.get(*r).clone(),
        Expr::Ident(name) => match layout.base(name) {
            Some(addr) => Value::Int(addr as i64),
            None => Value::Nil,
        },
        Expr::Op(op, args) => {
            let vals: Vec<Value> = args.iter().map(|a| eval_expr(a, regs, layout)).collect();
            op.apply(&vals)
        }
    }
}

/// Total cast to an address: in-range integers map to themselves, other
/// integers wrap modulo the address-space size, non-integers go to 0.
pub fn to_addr(v: &Value, addr_count: u64) -> Addr {
    match v {
        Value::Int(n) => (*n).rem_euclid(addr_count as i64) as Addr,
        _ => 0,
    }
}

/// Total cast to a truth value: `Bool` is itself, non-zero integers are true,
/// everything else is false.
pub fn to_bool(v: &Value) -> bool {
    match v {
        Value::Bool(b) => *b,
        Value::Int(n) => *n != 0,
        Value::Nil | Value::Obs(_) => false,
    }
}

/// Name of the rule that fired, for traces.
pub type RuleTag = &'static str;

/// Memory access classification shared by the classic and speculative rules.
pub enum Access {
    Ok,
    Error,
    Unsafe,
}

/// Classifies a data access (load/store target) in the given mode.
pub fn classify_data_access(sys: &System, layout: &Layout, mode: &Mode, addr: Addr) -> Access {
    classify_access(sys, layout, mode, addr, IdKind::Array)
}

/// Classifies a control transfer (call target) in the given mode.
pub fn classify_call_access(sys: &System, layout: &Layout, mode: &Mode, addr: Addr) -> Access {
    classify_access(sys, layout, mode, addr, IdKind::Procedure)
}

fn classify_access(sys: &System, layout: &Layout, mode: &Mode, addr: Addr, kind: IdKind) -> Access {
    if !layout.addr_in(sys, addr, mode.space(), kind) {
        return Access::Error;
    }
    if let Mode::Kernel(name) = mode {
        let caps = sys.caps.get(name).cloned().unwrap_or_default();
        if !layout.addr_in_caps(sys, addr, &caps) {
            return Access::Unsafe;
        }
    }
    Access::Ok
}

/// Fetches procedure code stored at an address. The caller has already
/// checked that the address is a procedure base.
pub fn code_at(memory: &Memory, addr: Addr) -> Cmd {
    match memory.get(addr) {
        Cell::Code(body) => body.clone(),
        _ => unreachable!("checked procedure address holds no code"),
    }
}

/// Entry mode for a syscall invoked in mode `mode`: from user mode the callee
/// runs tagged with its own name, from kernel mode the outer tag persists.
pub fn syscall_entry_mode(mode: &Mode, name: &SysName) -> Mode {
    match mode {
        Mode::User => Mode::Kernel(name.clone()),
        Mode::Kernel(outer) => Mode::Kernel(outer.clone()),
    }
}

/// One deterministic step of the classic semantics.
pub fn classic_step(
    sys: &System,
    layout: &Layout,
    config: &ClassicConfig,
) -> Result<(ClassicConfig, RuleTag), StepError> {
    let (stack, memory) = match config {
        ClassicConfig::Running { stack, memory } => (stack, memory),
        _ => return Err(StepError::Terminal),
    };
    if config.is_terminated() {
        return Err(StepError::Terminal);
    }
    let top = stack.last().expect("running stacks are non-empty");
    let n = sys.addr_count();

    // Pop: top frame exhausted, return value propagates through `ret`.
    if top.code.is_empty() {
        let mut stack = stack.clone();
        let finished = stack.pop().expect("non-empty");
        let below = stack.last_mut().expect("pop requires two frames");
        below.regs.set(Reg::Ret, finished.regs.get(Reg::Ret).clone());
        return Ok((ClassicConfig::Running { stack, memory: memory.clone() }, "pop"));
    }

    let instr = top.code[0].clone();
    let rest: Cmd = top.code[1..].to_vec();
    let replace_top = |code: Cmd, regs: RegisterMap, memory: Memory| {
        let mut stack = stack.clone();
        let top = stack.last_mut().expect("non-empty");
        top.code = code;
        top.regs = regs;
        ClassicConfig::Running { stack, memory }
    };

    let step = match instr {
        Instr::Skip => (replace_top(rest, top.regs.clone(), memory.clone()), "skip"),
        Instr::Fence => (replace_top(rest, top.regs.clone(), memory.clone()), "fence"),
        Instr::Assign(r, e) => {
            let v = eval_expr(&e, &top.regs, layout);
            (replace_top(rest, top.regs.updated(r, v), memory.clone()), "assign")
        }
        Instr::Load(_, r, e) => {
            let addr = to_addr(&eval_expr(&e, &top.regs, layout), n);
            match classify_data_access(sys, layout, &top.mode, addr) {
                Access::Ok => {
                    let v = match memory.get(addr) {
                        Cell::Val(v) => v.clone(),
                        _ => unreachable!("array footprint holds a value"),
                    };
                    (replace_top(rest, top.regs.updated(r, v), memory.clone()), "load")
                }
                Access::Error => (ClassicConfig::Err, "load-error"),
                Access::Unsafe => (ClassicConfig::Unsafe, "load-unsafe"),
            }
        }
        Instr::Store(ea, ev) => {
            let addr = to_addr(&eval_expr(&ea, &top.regs, layout), n);
            let v = eval_expr(&ev, &top.regs, layout);
            match classify_data_access(sys, layout, &top.mode, addr) {
                Access::Ok => {
                    (replace_top(rest, top.regs.clone(), memory.update(addr, v)), "store")
                }
                Access::Error => (ClassicConfig::Err, "store-error"),
                Access::Unsafe => (ClassicConfig::Unsafe, "store-unsafe"),
            }
        }
        Instr::Call(_, target, args) | Instr::SCall(target, args) => {
            let tag = if matches!(top.code[0], Instr::Call(..)) { "call" } else { "scall" };
            let addr = to_addr(&eval_expr(&target, &top.regs, layout), n);
            match classify_call_access(sys, layout, &top.mode, addr) {
                Access::Ok => {
                    let vals: Vec<Value> =
                        args.iter().map(|a| eval_expr(a, &top.regs, layout)).collect();
                    let callee =
                        Frame::new(code_at(memory, addr), RegisterMap::with_args(&vals), top.mode.clone());
                    let mut stack = stack.clone();
                    stack.last_mut().expect("non-empty").code = rest;
                    stack.push(callee);
                    (ClassicConfig::Running { stack, memory: memory.clone() }, tag)
                }
                Access::Error => (ClassicConfig::Err, "call-error"),
                Access::Unsafe => (ClassicConfig::Unsafe, "call-unsafe"),
            }
        }
        Instr::Syscall(name, args) => {
            let vals: Vec<Value> = args.iter().map(|a| eval_expr(a, &top.regs, layout)).collect();
            let body = sys.syscalls.get(&name).cloned().unwrap_or_default();
            let mode = syscall_entry_mode(&top.mode, &name);
            let callee = Frame::new(body, RegisterMap::with_args(&vals), mode);
            let mut stack = stack.clone();
            stack.last_mut().expect("non-empty").code = rest;
            stack.push(callee);
            (ClassicConfig::Running { stack, memory: memory.clone() }, "syscall")
        }
        Instr::If(_, guard, then_cmd, else_cmd) => {
            let taken = to_bool(&eval_expr(&guard, &top.regs, layout));
            let branch = if taken { then_cmd } else { else_cmd };
            let code: Cmd = branch.into_iter().chain(rest).collect();
            (replace_top(code, top.regs.clone(), memory.clone()), "if")
        }
        Instr::While(label, guard, body) => {
            let taken = to_bool(&eval_expr(&guard, &top.regs, layout));
            let code: Cmd = if taken {
                let mut code = body.clone();
                code.push(Instr::While(label, guard, body));
                code.extend(rest);
                code
            } else {
                rest
            };
            (replace_top(code, top.regs.clone(), memory.clone()), "while")
        }
    };
    Ok(step)
}

/// One line of the JSON step trace.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRecord {
    pub pc_digest: String,
    pub rule: RuleTag,
    pub mode: String,
    pub stack_depth: usize,
}

fn digest_frame(frame: &Frame) -> String {
    let mut h = DefaultHasher::new();
    frame.code.hash(&mut h);
    format!("{:016x}", h.finish())
}

fn mode_name(mode: &Mode) -> String {
    match mode {
        Mode::User => "user".to_string(),
        Mode::Kernel(s) => format!("kernel[{s}]"),
    }
}

/// Runs the classic semantics for at most `fuel` steps, optionally recording
/// a per-step trace.
pub fn run_traced(
    sys: &System,
    layout: &Layout,
    entry: Cmd,
    regs: RegisterMap,
    mode: Mode,
    fuel: u64,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> Outcome {
    let memory = compose(sys, layout, &sys.store);
    run_from_traced(sys, layout, ClassicConfig::start(entry, regs, mode, memory), fuel, trace.as_deref_mut())
}

/// Runs the classic semantics starting from an explicit configuration.
pub fn run_from_traced(
    sys: &System,
    layout: &Layout,
    mut config: ClassicConfig,
    fuel: u64,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> Outcome {
    for _ in 0..fuel {
        match &config {
            ClassicConfig::Err => return Outcome::Err,
            ClassicConfig::Unsafe => return Outcome::Unsafe,
            ClassicConfig::Running { stack, memory } => {
                if config.is_terminated() {
                    let ret = stack[0].regs.get(Reg::Ret).clone();
                    let store = recover_store(sys, layout, memory);
                    return Outcome::Terminated { ret, store };
                }
                let (next, rule) = classic_step(sys, layout, &config).expect("not terminal");
                if let Some(t) = trace.as_deref_mut() {
                    let (mode, depth, digest) = match &next {
                        ClassicConfig::Running { stack, .. } => {
                            let top = stack.last().expect("non-empty");
                            (mode_name(&top.mode), stack.len(), digest_frame(top))
                        }
                        ClassicConfig::Err => ("err".to_string(), 0, String::new()),
                        ClassicConfig::Unsafe => ("unsafe".to_string(), 0, String::new()),
                    };
                    t.push(TraceRecord { pc_digest: digest, rule, mode, stack_depth: depth });
                }
                config = next;
            }
        }
    }
    match config {
        ClassicConfig::Err => Outcome::Err,
        ClassicConfig::Unsafe => Outcome::Unsafe,
        ClassicConfig::Running { stack, memory } => {
            if stack.len() == 1 && stack[0].code.is_empty() {
                let ret = stack[0].regs.get(Reg::Ret).clone();
                let store = recover_store(sys, layout, &memory);
                Outcome::Terminated { ret, store }
            } else {
                Outcome::FuelExhausted
            }
        }
    }
}

/// Runs the classic semantics for at most `fuel` steps.
pub fn run(
    sys: &System,
    layout: &Layout,
    entry: Cmd,
    regs: RegisterMap,
    mode: Mode,
    fuel: u64,
) -> Outcome {
    run_traced(sys, layout, entry, regs, mode, fuel, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse::{parse_cmd_text, parse_system};
    use crate::layout::{enumerate_layouts, LayoutDistribution};
    use crate::lang::StoreEntry;

    fn layout_of(sys: &System, seed: u64) -> Layout {
        let support =
            enumerate_layouts(sys, &LayoutDistribution::SlotUniform { theta: 2 }, 10_000).unwrap();
        support[(seed as usize) % support.len()].0.clone()
    }

    fn msg_system() -> System {
        parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (array buf 2 init 0 0)\n\
             (array hook 1 init 0)\n\
             (syscall send (caps buf) ((store (+ buf x1) x2)))",
        )
        .unwrap()
    }

    #[test]
    fn expression_evaluation_resolves_identifiers() {
        let sys = msg_system();
        let layout = layout_of(&sys, 0);
        let base = layout.base("buf").unwrap() as i64;
        let regs = RegisterMap::initial();
        assert_eq!(eval_expr(&Expr::int(5), &regs, &layout), Value::Int(5));
        assert_eq!(eval_expr(&Expr::ident("buf"), &regs, &layout), Value::Int(base));
        let sum = Expr::op(crate::lang::Op::Add, vec![Expr::ident("buf"), Expr::int(1)]);
        assert_eq!(eval_expr(&sum, &regs, &layout), Value::Int(base + 1));
    }

    #[test]
    fn casts_are_total() {
        assert_eq!(to_addr(&Value::Int(7), 16), 7);
        assert_eq!(to_addr(&Value::Int(23), 16), 7);
        assert_eq!(to_addr(&Value::Int(-1), 16), 15);
        assert_eq!(to_addr(&Value::Nil, 16), 0);
        assert!(to_bool(&Value::Bool(true)));
        assert!(!to_bool(&Value::Int(0)));
        assert!(to_bool(&Value::Int(3)));
        assert!(!to_bool(&Value::Nil));
    }

    #[test]
    fn kernel_load_inside_caps_updates_register() {
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (array a 2 init 41 43)\n\
             (syscall s (caps a) ((load ret (+ a 1))))",
        )
        .unwrap();
        let layout = layout_of(&sys, 1);
        let out = run(
            &sys,
            &layout,
            parse_cmd_text("(sys s)", 100).unwrap(),
            RegisterMap::initial(),
            Mode::User,
            100,
        );
        match out {
            Outcome::Terminated { ret, .. } => assert_eq!(ret, Value::Int(43)),
            other => panic!("expected termination, got {other:?}"),
        }
    }

    #[test]
    fn kernel_load_outside_caps_is_unsafe() {
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (array a 1 init 0) (array b 1 init 0)\n\
             (syscall s (caps a) ((load ret x1)))",
        )
        .unwrap();
        let layout = layout_of(&sys, 0);
        let b = layout.base("b").unwrap() as i64;
        let entry = vec![Instr::Syscall("s".into(), vec![Expr::int(b)])];
        assert_eq!(run(&sys, &layout, entry, RegisterMap::initial(), Mode::User, 100), Outcome::Unsafe);
    }

    #[test]
    fn user_load_at_unallocated_address_errors() {
        let sys = msg_system();
        let layout = layout_of(&sys, 0);
        let entry = parse_cmd_text("(load x1 3)", 100).unwrap();
        assert_eq!(run(&sys, &layout, entry, RegisterMap::initial(), Mode::User, 100), Outcome::Err);
    }

    #[test]
    fn run_reports_return_value_and_store() {
        let sys = msg_system();
        let layout = layout_of(&sys, 0);
        let entry = parse_cmd_text("(:= x1 1) (:= ret x1)", 100).unwrap();
        match run(&sys, &layout, entry, RegisterMap::initial(), Mode::User, 100) {
            Outcome::Terminated { ret, store } => {
                assert_eq!(ret, Value::Int(1));
                assert_eq!(store, sys.store);
            }
            other => panic!("expected termination, got {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_send_reaches_unsafe() {
        // An unchecked index that lands on another kernel object is a
        // capability violation.
        let sys = msg_system();
        let layout = layout_of(&sys, 0);
        let idx = layout.base("hook").unwrap() as i64 - layout.base("buf").unwrap() as i64;
        let entry = vec![Instr::Syscall("send".into(), vec![Expr::int(idx), Expr::int(99)])];
        assert_eq!(run(&sys, &layout, entry, RegisterMap::initial(), Mode::User, 100), Outcome::Unsafe);
    }

    #[test]
    fn divergence_exhausts_fuel() {
        let sys = msg_system();
        let layout = layout_of(&sys, 0);
        let entry = parse_cmd_text("(while true ((skip)))", 100).unwrap();
        assert_eq!(
            run(&sys, &layout, entry, RegisterMap::initial(), Mode::User, 100),
            Outcome::FuelExhausted
        );
    }

    #[test]
    fn fence_is_architectural_noop_and_scall_behaves_as_call() {
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (proc f ((:= ret 7)))\n\
             (syscall s (caps f) ((fence) (scall f)))",
        )
        .unwrap();
        let layout = layout_of(&sys, 0);
        let entry = parse_cmd_text("(sys s)", 100).unwrap();
        match run(&sys, &layout, entry, RegisterMap::initial(), Mode::User, 100) {
            Outcome::Terminated { ret, .. } => assert_eq!(ret, Value::Int(7)),
            other => panic!("expected termination, got {other:?}"),
        }
    }

    #[test]
    fn call_propagates_return_through_pop() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space user) (proc dbl ((:= ret (* x1 2))))",
        )
        .unwrap();
        let layout = layout_of(&sys, 0);
        let entry = parse_cmd_text("(call dbl 21)", 100).unwrap();
        match run(&sys, &layout, entry, RegisterMap::initial(), Mode::User, 100) {
            Outcome::Terminated { ret, .. } => assert_eq!(ret, Value::Int(42)),
            other => panic!("expected termination, got {other:?}"),
        }
    }

    #[test]
    fn reachable_memories_recompose_from_recovered_stores() {
        // Shape preservation: along a run, every memory equals the composed
        // image of a store agreeing with the initial one on procedures.
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (array a 2 init 1 2) (proc f ((store a 9)))\n\
             (syscall s (caps a f) ((call f) (store (+ a 1) 5)))",
        )
        .unwrap();
        let layout = layout_of(&sys, 2);
        let mut config = ClassicConfig::start(
            parse_cmd_text("(sys s)", 100).unwrap(),
            RegisterMap::initial(),
            Mode::User,
            compose(&sys, &layout, &sys.store),
        );
        loop {
            if let ClassicConfig::Running { memory, .. } = &config {
                let store = recover_store(&sys, &layout, memory);
                assert_eq!(compose(&sys, &layout, &store), *memory);
                for (name, entry) in &store {
                    if let StoreEntry::Proc(body) = entry {
                        assert_eq!(Some(&StoreEntry::Proc(body.clone())), sys.store.get(name));
                    }
                }
            }
            if config.is_terminated() || !matches!(config, ClassicConfig::Running { .. }) {
                break;
            }
            config = classic_step(&sys, &layout, &config).unwrap().0;
        }
    }

    #[test]
    fn kernel_frames_sit_above_user_frames() {
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (array a 1 init 0)\n\
             (syscall s (caps a) ((store a 1) (sys t)))\n\
             (syscall t (caps a) ((load ret a)))",
        )
        .unwrap();
        let layout = layout_of(&sys, 1);
        let mut config = ClassicConfig::start(
            parse_cmd_text("(:= x1 0) (sys s) (:= x2 0)", 100).unwrap(),
            RegisterMap::initial(),
            Mode::User,
            compose(&sys, &layout, &sys.store),
        );
        while let ClassicConfig::Running { stack, .. } = &config {
            // Once a stack entry is user-mode, everything below it is too.
            let mut seen_user = false;
            for frame in stack.iter().rev() {
                match frame.mode {
                    Mode::User => seen_user = true,
                    Mode::Kernel(_) => assert!(!seen_user, "kernel frame below a user frame"),
                }
            }
            if config.is_terminated() {
                break;
            }
            config = classic_step(&sys, &layout, &config).unwrap().0;
        }
    }

    #[test]
    fn user_programs_over_user_ids_ignore_kernel_placement() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space user) (array u 2 init 3 4)\n\
             (space kernel) (array a 2 init 0 0) (proc f ((skip)))",
        )
        .unwrap();
        let entry = parse_cmd_text("(load x1 u) (store (+ u 1) (+ x1 1)) (:= ret x1)", 100).unwrap();
        let support =
            enumerate_layouts(&sys, &LayoutDistribution::SlotUniform { theta: 2 }, 10_000).unwrap();
        let outcomes: Vec<Outcome> = support
            .iter()
            .map(|(l, _)| run(&sys, l, entry.clone(), RegisterMap::initial(), Mode::User, 100))
            .collect();
        for pair in outcomes.windows(2) {
            match (&pair[0], &pair[1]) {
                (
                    Outcome::Terminated { ret: r1, store: s1 },
                    Outcome::Terminated { ret: r2, store: s2 },
                ) => {
                    assert_eq!(r1, r2);
                    assert_eq!(s1.get("u"), s2.get("u"));
                }
                other => panic!("expected terminations, got {other:?}"),
            }
        }
    }
}
