//! Attacker language and hybrid semantics.
//!
//! Attackers are user-space programs extended with three constructs:
//! `spec c` runs a plain command under the speculative semantics, `poison d`
//! pushes a predictor directive, and `x := observe` pops a recorded
//! side-channel observation (the undefined value when none is left). Outside
//! `spec` sections the attacker executes under the classic rules over a plain
//! memory, threading the directive and observation stacks along.
//!
//! During a `spec` section the directive stack drives the victim: the top
//! directive is consumed whenever it applies; otherwise the machine takes a
//! plain step if it can, and backtracks as a last resort. A section whose
//! speculation stack collapses to a sound, fully evaluated frame commits its
//! write buffer and resumes the attacker.

use crate::buffer::BufferedMemory;
use crate::classic::{
    classify_call_access, classify_data_access, code_at, eval_expr, syscall_entry_mode, to_addr,
    to_bool, Access, Frame, Mode, Outcome, RegisterMap,
};
use crate::lang::{
    Cmd, Expr, Instr, Label, Observation, Reg, SysName, System, Value,
};
use crate::layout::{recover_store, Cell, Layout, Memory};
use crate::specsem::{spec_step, Directive, SpecConfig, SpecStack};

/// Attacker instructions: the plain language with attacker-level branches and
/// loops, plus speculation control.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AInstr {
    Skip,
    Assign(Reg, Expr),
    Load(Label, Reg, Expr),
    Store(Expr, Expr),
    Call(Label, Expr, Vec<Expr>),
    SCall(Expr, Vec<Expr>),
    Syscall(SysName, Vec<Expr>),
    If(Label, Expr, ACmd, ACmd),
    While(Label, Expr, ACmd),
    Fence,
    /// Run a plain command under the speculative semantics.
    Spec(Cmd),
    /// Push a directive for the next speculative section.
    Poison(Directive),
    /// Pop the most recent observation into a register.
    Observe(Reg),
}

pub type ACmd = Vec<AInstr>;

/// Lifts a plain command into the attacker language.
pub fn lift_cmd(cmd: &[Instr]) -> ACmd {
    cmd.iter().map(lift_instr).collect()
}

fn lift_instr(instr: &Instr) -> AInstr {
    match instr {
        Instr::Skip => AInstr::Skip,
        Instr::Assign(r, e) => AInstr::Assign(*r, e.clone()),
        Instr::Load(l, r, e) => AInstr::Load(*l, *r, e.clone()),
        Instr::Store(a, v) => AInstr::Store(a.clone(), v.clone()),
        Instr::Call(l, t, args) => AInstr::Call(*l, t.clone(), args.clone()),
        Instr::SCall(t, args) => AInstr::SCall(t.clone(), args.clone()),
        Instr::Syscall(n, args) => AInstr::Syscall(n.clone(), args.clone()),
        Instr::If(l, e, c1, c2) => AInstr::If(*l, e.clone(), lift_cmd(c1), lift_cmd(c2)),
        Instr::While(l, e, c) => AInstr::While(*l, e.clone(), lift_cmd(c)),
        Instr::Fence => AInstr::Fence,
    }
}

/// Attacker activation record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AFrame {
    pub code: ACmd,
    pub regs: RegisterMap,
    pub mode: Mode,
}

impl AFrame {
    pub fn new(code: ACmd, regs: RegisterMap, mode: Mode) -> AFrame {
        AFrame { code, regs, mode }
    }
}

/// Attacker machine state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttackerConfig {
    Plain {
        stack: Vec<AFrame>,
        memory: Memory,
        directives: Vec<Directive>,
        observations: Vec<Observation>,
    },
    Hybrid {
        spec: SpecStack,
        saved: Vec<AFrame>,
        directives: Vec<Directive>,
        observations: Vec<Observation>,
    },
    Err,
    Unsafe,
}

impl AttackerConfig {
    pub fn start(attacker: ACmd, memory: Memory) -> AttackerConfig {
        AttackerConfig::Plain {
            stack: vec![AFrame::new(attacker, RegisterMap::initial(), Mode::User)],
            memory,
            directives: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn is_terminated(&self) -> bool {
        matches!(self, AttackerConfig::Plain { stack, .. }
            if stack.len() == 1 && stack[0].code.is_empty())
    }
}

/// A step could not be taken.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum AttackerStepError {
    #[error("configuration is terminal")]
    Terminal,
    #[error("speculative section is stuck")]
    StuckSpecSection,
}

/// One deterministic attacker step. Returns the successor and any observation
/// recorded during the step (for the chronological log).
pub fn attacker_step(
    sys: &System,
    layout: &Layout,
    config: &AttackerConfig,
) -> Result<(AttackerConfig, Option<Observation>), AttackerStepError> {
    match config {
        AttackerConfig::Err | AttackerConfig::Unsafe => Err(AttackerStepError::Terminal),
        AttackerConfig::Plain { stack, memory, directives, observations } => {
            if config.is_terminated() {
                return Err(AttackerStepError::Terminal);
            }
            plain_step(sys, layout, stack, memory, directives, observations)
        }
        AttackerConfig::Hybrid { spec, saved, directives, observations } => {
            hybrid_step(sys, layout, spec, saved, directives, observations)
        }
    }
}

fn plain_step(
    sys: &System,
    layout: &Layout,
    stack: &[AFrame],
    memory: &Memory,
    directives: &[Directive],
    observations: &[Observation],
) -> Result<(AttackerConfig, Option<Observation>), AttackerStepError> {
    let top = stack.last().expect("running stacks are non-empty");
    let n = sys.addr_count();
    let plain = |stack: Vec<AFrame>, memory: Memory, directives: Vec<Directive>, observations: Vec<Observation>| {
        AttackerConfig::Plain { stack, memory, directives, observations }
    };

    // Frame pop with `ret` propagation.
    if top.code.is_empty() {
        let mut stack = stack.to_vec();
        let finished = stack.pop().expect("non-empty");
        let below = stack.last_mut().expect("pop requires two frames");
        below.regs.set(Reg::Ret, finished.regs.get(Reg::Ret).clone());
        return Ok((plain(stack, memory.clone(), directives.to_vec(), observations.to_vec()), None));
    }

    let instr = top.code[0].clone();
    let rest: ACmd = top.code[1..].to_vec();
    let replace_top = |code: ACmd, regs: RegisterMap, memory: Memory| {
        let mut stack = stack.to_vec();
        let top = stack.last_mut().expect("non-empty");
        top.code = code;
        top.regs = regs;
        plain(stack, memory, directives.to_vec(), observations.to_vec())
    };

    let next = match instr {
        AInstr::Skip | AInstr::Fence => replace_top(rest, top.regs.clone(), memory.clone()),
        AInstr::Assign(r, e) => {
            let v = eval_expr(&e, &top.regs, layout);
            replace_top(rest, top.regs.updated(r, v), memory.clone())
        }
        AInstr::Load(_, r, e) => {
            let addr = to_addr(&eval_expr(&e, &top.regs, layout), n);
            match classify_data_access(sys, layout, &top.mode, addr) {
                Access::Ok => {
                    let v = match memory.get(addr) {
                        Cell::Val(v) => v.clone(),
                        _ => Value::Nil,
                    };
                    replace_top(rest, top.regs.updated(r, v), memory.clone())
                }
                Access::Error => AttackerConfig::Err,
                Access::Unsafe => AttackerConfig::Unsafe,
            }
        }
        AInstr::Store(ea, ev) => {
            let addr = to_addr(&eval_expr(&ea, &top.regs, layout), n);
            match classify_data_access(sys, layout, &top.mode, addr) {
                Access::Ok => {
                    let v = eval_expr(&ev, &top.regs, layout);
                    replace_top(rest, top.regs.clone(), memory.update(addr, v))
                }
                Access::Error => AttackerConfig::Err,
                Access::Unsafe => AttackerConfig::Unsafe,
            }
        }
        AInstr::Call(_, target, args) | AInstr::SCall(target, args) => {
            let addr = to_addr(&eval_expr(&target, &top.regs, layout), n);
            match classify_call_access(sys, layout, &top.mode, addr) {
                Access::Ok => {
                    let vals: Vec<Value> =
                        args.iter().map(|a| eval_expr(a, &top.regs, layout)).collect();
                    let callee = AFrame::new(
                        lift_cmd(&code_at(memory, addr)),
                        RegisterMap::with_args(&vals),
                        top.mode.clone(),
                    );
                    let mut stack = stack.to_vec();
                    stack.last_mut().expect("non-empty").code = rest;
                    stack.push(callee);
                    plain(stack, memory.clone(), directives.to_vec(), observations.to_vec())
                }
                Access::Error => AttackerConfig::Err,
                Access::Unsafe => AttackerConfig::Unsafe,
            }
        }
        AInstr::Syscall(name, args) => {
            let vals: Vec<Value> = args.iter().map(|a| eval_expr(a, &top.regs, layout)).collect();
            let body = sys.syscalls.get(&name).cloned().unwrap_or_default();
            let mode = syscall_entry_mode(&top.mode, &name);
            let callee = AFrame::new(lift_cmd(&body), RegisterMap::with_args(&vals), mode);
            let mut stack = stack.to_vec();
            stack.last_mut().expect("non-empty").code = rest;
            stack.push(callee);
            plain(stack, memory.clone(), directives.to_vec(), observations.to_vec())
        }
        AInstr::If(_, guard, then_cmd, else_cmd) => {
            let taken = to_bool(&eval_expr(&guard, &top.regs, layout));
            let branch = if taken { then_cmd } else { else_cmd };
            let code: ACmd = branch.into_iter().chain(rest).collect();
            replace_top(code, top.regs.clone(), memory.clone())
        }
        AInstr::While(label, guard, body) => {
            let taken = to_bool(&eval_expr(&guard, &top.regs, layout));
            let code: ACmd = if taken {
                let mut code = body.clone();
                code.push(AInstr::While(label, guard, body));
                code.extend(rest);
                code
            } else {
                rest
            };
            replace_top(code, top.regs.clone(), memory.clone())
        }
        AInstr::Poison(d) => {
            let mut directives = directives.to_vec();
            directives.insert(0, d);
            let mut stack = stack.to_vec();
            stack.last_mut().expect("non-empty").code = rest;
            plain(stack, memory.clone(), directives, observations.to_vec())
        }
        AInstr::Observe(r) => {
            let mut observations = observations.to_vec();
            let v = if observations.is_empty() {
                Value::Nil
            } else {
                Value::Obs(observations.remove(0))
            };
            let mut stack = stack.to_vec();
            let topf = stack.last_mut().expect("non-empty");
            topf.code = rest;
            topf.regs.set(r, v);
            plain(stack, memory.clone(), directives.to_vec(), observations)
        }
        AInstr::Spec(cmd) => {
            // The section starts from the attacker's registers and mode over
            // an empty write buffer; the continuation is saved below.
            let victim = Frame::new(cmd, top.regs.clone(), top.mode.clone());
            let spec = SpecStack::single(SpecConfig::start(
                victim,
                BufferedMemory::new(memory.clone()),
                false,
            ));
            let mut saved = stack.to_vec();
            saved.last_mut().expect("non-empty").code = rest;
            AttackerConfig::Hybrid {
                spec,
                saved,
                directives: directives.to_vec(),
                observations: observations.to_vec(),
            }
        }
    };
    Ok((next, None))
}

fn hybrid_step(
    sys: &System,
    layout: &Layout,
    spec: &SpecStack,
    saved: &[AFrame],
    directives: &[Directive],
    observations: &[Observation],
) -> Result<(AttackerConfig, Option<Observation>), AttackerStepError> {
    // Abnormal section endings surface at the attacker level.
    if spec.top_is_unsafe() {
        return Ok((AttackerConfig::Unsafe, None));
    }
    if let Some(SpecConfig::Err { misspec: false }) = spec.top() {
        if spec.height() == 1 {
            return Ok((AttackerConfig::Err, None));
        }
    }

    let hybrid = |spec: SpecStack, directives: Vec<Directive>, observations: Vec<Observation>, obs: Observation| {
        let mut observations = observations;
        observations.insert(0, obs.clone());
        (AttackerConfig::Hybrid { spec, saved: saved.to_vec(), directives, observations }, Some(obs))
    };

    // Top directive first, when it applies.
    if let Some(d) = directives.first() {
        if let Ok((next, obs)) = spec_step(sys, layout, spec, d) {
            return Ok(hybrid(next, directives[1..].to_vec(), observations.to_vec(), obs));
        }
    }
    // Then the plain step.
    if let Ok((next, obs)) = spec_step(sys, layout, spec, &Directive::Step) {
        return Ok(hybrid(next, directives.to_vec(), observations.to_vec(), obs));
    }
    // Then backtracking.
    if let Ok((next, obs)) = spec_step(sys, layout, spec, &Directive::Bt) {
        return Ok(hybrid(next, directives.to_vec(), observations.to_vec(), obs));
    }
    // Normal termination: a sound, fully evaluated single frame commits the
    // buffer and resumes the attacker with the section's registers.
    if let Some(SpecConfig::Live { frames, mem, misspec: false }) = spec.top() {
        if spec.height() == 1 && frames.len() == 1 && frames[0].code.is_empty() {
            let mut stack = saved.to_vec();
            let top = stack.last_mut().expect("saved attacker frame");
            top.regs = frames[0].regs.clone();
            top.mode = frames[0].mode.clone();
            return Ok((
                AttackerConfig::Plain {
                    stack,
                    memory: mem.commit(),
                    directives: directives.to_vec(),
                    observations: observations.to_vec(),
                },
                None,
            ));
        }
    }
    Err(AttackerStepError::StuckSpecSection)
}

/// Result of a bounded attacker run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackerRun {
    pub outcome: Outcome,
    /// Every observation emitted during speculative sections, in order.
    pub log: Vec<Observation>,
    pub steps: u64,
}

/// Runs an attacker program from the composed initial memory.
pub fn run_attacker(
    sys: &System,
    layout: &Layout,
    attacker: &ACmd,
    fuel: u64,
) -> AttackerRun {
    let memory = crate::layout::compose(sys, layout, &sys.store);
    let mut config = AttackerConfig::start(attacker.clone(), memory);
    let mut log = Vec::new();
    for steps in 0..fuel {
        match &config {
            AttackerConfig::Err => return AttackerRun { outcome: Outcome::Err, log, steps },
            AttackerConfig::Unsafe => {
                return AttackerRun { outcome: Outcome::Unsafe, log, steps }
            }
            _ if config.is_terminated() => {
                let (ret, store) = match &config {
                    AttackerConfig::Plain { stack, memory, .. } => (
                        stack[0].regs.get(Reg::Ret).clone(),
                        recover_store(sys, layout, memory),
                    ),
                    _ => unreachable!(),
                };
                return AttackerRun { outcome: Outcome::Terminated { ret, store }, log, steps };
            }
            _ => {}
        }
        match attacker_step(sys, layout, &config) {
            Ok((next, obs)) => {
                if let Some(obs) = obs {
                    log.push(obs);
                }
                config = next;
            }
            Err(AttackerStepError::StuckSpecSection) => {
                // Unreachable from sound starts; surface as an error outcome
                // rather than hiding it.
                return AttackerRun { outcome: Outcome::Err, log, steps };
            }
            Err(AttackerStepError::Terminal) => break,
        }
    }
    AttackerRun { outcome: Outcome::FuelExhausted, log, steps: fuel }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casestudy;
    use crate::lang::parse::parse_system;
    use crate::layout::{enumerate_layouts, LayoutDistribution};

    fn layouts(sys: &System) -> Vec<Layout> {
        enumerate_layouts(sys, &LayoutDistribution::SlotUniform { theta: 2 }, 10_000)
            .unwrap()
            .into_iter()
            .map(|(l, _)| l)
            .collect()
    }

    #[test]
    fn empty_attacker_terminates() {
        let sys = parse_system("(addr-space 8 8)").unwrap();
        let layout = layouts(&sys)[0].clone();
        let run = run_attacker(&sys, &layout, &vec![AInstr::Skip], 10);
        assert!(matches!(run.outcome, Outcome::Terminated { .. }));
    }

    #[test]
    fn poison_pushes_and_observe_pops() {
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (array a 1 init 0)\n\
             (syscall s (caps a) ((store a 1)))",
        )
        .unwrap();
        let layout = layouts(&sys)[0].clone();
        // spec { sys s } records a store observation; observe pops it.
        let attacker = vec![
            AInstr::Poison(Directive::Branch(999, true)),
            AInstr::Spec(vec![Instr::Syscall("s".into(), vec![])]),
            AInstr::Observe(Reg::X(1)),
            AInstr::Assign(Reg::Ret, Expr::Reg(Reg::X(1))),
        ];
        let run = run_attacker(&sys, &layout, &attacker, 100);
        match run.outcome {
            Outcome::Terminated { ret, .. } => {
                // The most recent observation is popped first; the run ends
                // with pops from the syscall return, so `ret` holds some
                // observation value.
                assert!(matches!(ret, Value::Obs(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(run.log.contains(&Observation::Mem(layout.base("a").unwrap())));
    }

    #[test]
    fn observe_on_empty_stack_yields_nil() {
        let sys = parse_system("(addr-space 8 8)").unwrap();
        let layout = layouts(&sys)[0].clone();
        let attacker = vec![
            AInstr::Observe(Reg::X(1)),
            AInstr::Assign(Reg::Ret, Expr::Reg(Reg::X(1))),
        ];
        match run_attacker(&sys, &layout, &attacker, 10).outcome {
            Outcome::Terminated { ret, .. } => assert_eq!(ret, Value::Nil),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_section_commits_buffer_on_normal_termination() {
        let sys = parse_system(
            "(addr-space 8 8)\n(space user) (array u 1 init 0)\n\
             (space kernel) (array a 1 init 0)",
        )
        .unwrap();
        let layout = layouts(&sys)[0].clone();
        let attacker = vec![
            AInstr::Spec(vec![Instr::Store(Expr::ident("u"), Expr::int(7))]),
            AInstr::Load(900, Reg::Ret, Expr::ident("u")),
        ];
        match run_attacker(&sys, &layout, &attacker, 100).outcome {
            Outcome::Terminated { ret, store } => {
                assert_eq!(ret, Value::Int(7));
                match store.get("u") {
                    Some(crate::lang::StoreEntry::Array(vs)) => assert_eq!(vs[0], Value::Int(7)),
                    other => panic!("unexpected {other:?}"),
                }
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_section_with_empty_directives_matches_classic_outcome() {
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (array a 2 init 3 4)\n\
             (syscall s (caps a) ((load ret (+ a 1)) (store a ret)))",
        )
        .unwrap();
        for layout in layouts(&sys) {
            let spec_run = run_attacker(
                &sys,
                &layout,
                &vec![AInstr::Spec(vec![Instr::Syscall("s".into(), vec![])])],
                200,
            );
            let classic_run = crate::classic::run(
                &sys,
                &layout,
                vec![Instr::Syscall("s".into(), vec![])],
                RegisterMap::initial(),
                Mode::User,
                200,
            );
            assert_eq!(spec_run.outcome, classic_run);
        }
    }

    #[test]
    fn forced_transient_branch_executes_guarded_syscall_body() {
        // Poisoning the attacker's own branch forces the mis-speculative
        // execution of the guarded syscall regardless of the guard value.
        let sigma = casestudy::three_syscall_system();
        let layout = layouts(&sigma)[0].clone();
        let target = layout.base(casestudy::PROBE_PROC).unwrap();
        let label = 900;
        let body = vec![Instr::If(
            label,
            Expr::bool(false),
            vec![Instr::Syscall("s".into(), vec![Expr::bool(true), Expr::int(target as i64)])],
            vec![],
        )];
        let attacker = vec![
            AInstr::Poison(Directive::Branch(label, true)),
            AInstr::Spec(body),
            AInstr::Observe(Reg::X(3)),
        ];
        let run = run_attacker(&sigma, &layout, &attacker, 500);
        assert_eq!(run.outcome, Outcome::Unsafe);
    }

    #[test]
    fn victim_frames_contain_no_attacker_constructs() {
        // Kernel-mode frames reached through syscalls consist of lifted plain
        // instructions only; dedicated attacker constructs stay in user-mode
        // frames.
        let sys = parse_system(
            "(addr-space 8 8) (space kernel) (array a 1 init 0)\n\
             (syscall s (caps a) ((store a 1) (load ret a)))",
        )
        .unwrap();
        let layout = layouts(&sys)[0].clone();
        let attacker = vec![
            AInstr::Poison(Directive::Branch(900, true)),
            AInstr::Syscall("s".into(), vec![]),
            AInstr::Observe(Reg::X(1)),
        ];
        let mut config = AttackerConfig::start(
            attacker,
            crate::layout::compose(&sys, &layout, &sys.store),
        );
        loop {
            if let AttackerConfig::Plain { stack, .. } = &config {
                for frame in stack {
                    if matches!(frame.mode, Mode::Kernel(_)) {
                        assert!(frame.code.iter().all(|i| !matches!(
                            i,
                            AInstr::Spec(_) | AInstr::Poison(_) | AInstr::Observe(_)
                        )));
                    }
                }
            }
            if config.is_terminated() {
                break;
            }
            match attacker_step(&sys, &layout, &config) {
                Ok((next, _)) => config = next,
                Err(_) => break,
            }
        }
    }
}
