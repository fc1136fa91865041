//! Victim language: values, expressions, instructions, stores and systems.
//!
//! A system bundles an initial store (arrays and procedure bodies), a
//! system-call map and a capability map. Kernel and user identifiers live in
//! disjoint address spaces whose sizes are part of the system. Load, call,
//! branch and loop instructions carry labels so that predictor directives can
//! target them individually.

pub mod parse;
pub mod print;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Instruction label, unique within a system (and within an attacker program).
pub type Label = u32;

/// Memory address. Addresses are non-negative and bounded by the combined
/// user + kernel address-space size.
pub type Addr = u64;

/// Identifier name of an array or a procedure.
pub type IdName = String;

/// System-call name.
pub type SysName = String;

/// Highest argument register: calls pass arguments in `x1..x8`.
pub const MAX_ARG_REGS: u8 = 8;

/// Register names: the designated return register plus `x1..x8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reg {
    Ret,
    X(u8),
}

impl Reg {
    pub fn arg(i: u8) -> Reg {
        assert!(i >= 1 && i <= MAX_ARG_REGS, "argument register out of range");
        Reg::X(i)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::Ret => write!(f, "ret"),
            Reg::X(i) => write!(f, "x{i}"),
        }
    }
}

/// Side-channel observation emitted by speculative transitions.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Observation {
    None,
    Branch(bool),
    Mem(Addr),
    Jump(Addr),
    Bt(bool),
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observation::None => write!(f, "none"),
            Observation::Branch(b) => write!(f, "branch {b}"),
            Observation::Mem(a) => write!(f, "mem {a}"),
            Observation::Jump(a) => write!(f, "jump {a}"),
            Observation::Bt(b) => write!(f, "bt {b}"),
        }
    }
}

/// Runtime values. Observations are values so that attackers can store the
/// result of an `observe` in a register; they never appear in initial stores.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Value {
    Int(i64),
    Bool(bool),
    Nil,
    Obs(Observation),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Nil => write!(f, "nil"),
            Value::Obs(o) => write!(f, "obs({o})"),
        }
    }
}

/// Expression operators with total interpretations: ill-typed operand
/// combinations evaluate to `Nil` rather than faulting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Eq,
    Ne,
    Lt,
    And,
    Or,
    Not,
}

impl Op {
    pub fn arity(self) -> usize {
        match self {
            Op::Not => 1,
            _ => 2,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::And => "and",
            Op::Or => "or",
            Op::Not => "not",
        }
    }

    /// Total interpretation over values.
    pub fn apply(self, args: &[Value]) -> Value {
        use Value::*;
        match (self, args) {
            (Op::Add, [Int(a), Int(b)]) => Int(a.wrapping_add(*b)),
            (Op::Sub, [Int(a), Int(b)]) => Int(a.wrapping_sub(*b)),
            (Op::Mul, [Int(a), Int(b)]) => Int(a.wrapping_mul(*b)),
            (Op::Eq, [a, b]) => Bool(a == b),
            (Op::Ne, [a, b]) => Bool(a != b),
            (Op::Lt, [Int(a), Int(b)]) => Bool(a < b),
            (Op::And, [Bool(a), Bool(b)]) => Bool(*a && *b),
            (Op::Or, [Bool(a), Bool(b)]) => Bool(*a || *b),
            (Op::Not, [Bool(a)]) => Bool(!a),
            _ => Nil,
        }
    }
}

/// Expressions. Identifiers evaluate to their base address under the current
/// layout; expressions never touch memory.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Const(Value),
    Reg(Reg),
    Ident(IdName),
    Op(Op, Vec<Expr>),
}

impl Expr {
    pub fn int(n: i64) -> Expr {
        Expr::Const(Value::Int(n))
    }

    pub fn bool(b: bool) -> Expr {
        Expr::Const(Value::Bool(b))
    }

    pub fn ident(name: &str) -> Expr {
        Expr::Ident(name.to_string())
    }

    pub fn reg(r: Reg) -> Expr {
        Expr::Reg(r)
    }

    pub fn op(op: Op, args: Vec<Expr>) -> Expr {
        assert_eq!(op.arity(), args.len(), "operator arity mismatch");
        Expr::Op(op, args)
    }

    fn collect_ids(&self, out: &mut BTreeSet<IdName>) {
        match self {
            Expr::Ident(name) => {
                out.insert(name.clone());
            }
            Expr::Op(_, args) => args.iter().for_each(|e| e.collect_ids(out)),
            Expr::Const(_) | Expr::Reg(_) => {}
        }
    }
}

/// Instructions. Loads, calls, branches and loops carry labels; `fence` and
/// `scall` are the speculation-control extensions and are accepted anywhere.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    Skip,
    Assign(Reg, Expr),
    Load(Label, Reg, Expr),
    Store(Expr, Expr),
    Call(Label, Expr, Vec<Expr>),
    SCall(Expr, Vec<Expr>),
    Syscall(SysName, Vec<Expr>),
    If(Label, Expr, Cmd, Cmd),
    While(Label, Expr, Cmd),
    Fence,
}

/// A command is a finite instruction sequence.
pub type Cmd = Vec<Instr>;

/// Kind of a named memory object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IdKind {
    Array,
    Procedure,
}

/// Address space an identifier belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    User,
    Kernel,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Space::User => write!(f, "user"),
            Space::Kernel => write!(f, "kernel"),
        }
    }
}

/// Declared memory object: arrays have a fixed element count, procedures
/// occupy a single address.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identifier {
    pub name: IdName,
    pub kind: IdKind,
    pub space: Space,
    pub size: u64,
}

/// Store content for one identifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreEntry {
    Array(Vec<Value>),
    Proc(Cmd),
}

/// Store: identifier to array contents or procedure body.
pub type Store = BTreeMap<IdName, StoreEntry>;

/// A complete system: identifier table, initial store, system-call map,
/// capability map and the two address-space sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct System {
    pub idents: Vec<Identifier>,
    pub store: Store,
    pub syscalls: BTreeMap<SysName, Cmd>,
    pub caps: BTreeMap<SysName, BTreeSet<IdName>>,
    pub kappa_user: u64,
    pub kappa_kernel: u64,
}

/// Structural problem reported by [`System::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic(pub String);

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl System {
    /// Empty system with the given address-space sizes.
    pub fn empty(kappa_user: u64, kappa_kernel: u64) -> System {
        System {
            idents: Vec::new(),
            store: BTreeMap::new(),
            syscalls: BTreeMap::new(),
            caps: BTreeMap::new(),
            kappa_user,
            kappa_kernel,
        }
    }

    /// Combined address-space size.
    pub fn addr_count(&self) -> u64 {
        self.kappa_user + self.kappa_kernel
    }

    pub fn ident(&self, name: &str) -> Option<&Identifier> {
        self.idents.iter().find(|i| i.name == name)
    }

    pub fn idents_in(&self, space: Space) -> impl Iterator<Item = &Identifier> {
        self.idents.iter().filter(move |i| i.space == space)
    }

    pub fn kernel_ident_count(&self) -> usize {
        self.idents_in(Space::Kernel).count()
    }

    /// Largest kernel object size, or 0 when kernel space is empty.
    pub fn max_kernel_object_size(&self) -> u64 {
        self.idents_in(Space::Kernel).map(|i| i.size).max().unwrap_or(0)
    }

    /// Identifiers literally occurring in a command, including inside nested
    /// branches, loop bodies and argument expressions.
    pub fn ids_of(cmd: &[Instr]) -> BTreeSet<IdName> {
        let mut out = BTreeSet::new();
        collect_cmd_ids(cmd, &mut out);
        out
    }

    /// System-call names literally occurring in a command.
    pub fn syscalls_of(cmd: &[Instr]) -> BTreeSet<SysName> {
        let mut out = BTreeSet::new();
        collect_cmd_syscalls(cmd, &mut out);
        out
    }

    /// Least fixed point of the reference relation: identifiers and system
    /// calls a command refers to, directly or through the bodies of referenced
    /// procedures and system calls.
    pub fn refs(&self, cmd: &[Instr]) -> Result<Refs, UnknownRef> {
        let mut ids: BTreeSet<IdName> = BTreeSet::new();
        let mut sys: BTreeSet<SysName> = BTreeSet::new();
        let mut pending_ids: Vec<IdName> = Self::ids_of(cmd).into_iter().collect();
        let mut pending_sys: Vec<SysName> = Self::syscalls_of(cmd).into_iter().collect();
        while !(pending_ids.is_empty() && pending_sys.is_empty()) {
            if let Some(name) = pending_ids.pop() {
                if !ids.insert(name.clone()) {
                    continue;
                }
                let ident = self
                    .ident(&name)
                    .ok_or_else(|| UnknownRef::Identifier(name.clone()))?;
                if ident.kind == IdKind::Procedure {
                    let body = match self.store.get(&name) {
                        Some(StoreEntry::Proc(body)) => body,
                        _ => return Err(UnknownRef::Identifier(name.clone())),
                    };
                    pending_ids.extend(Self::ids_of(body));
                }
            } else if let Some(name) = pending_sys.pop() {
                if !sys.insert(name.clone()) {
                    continue;
                }
                let body = self
                    .syscalls
                    .get(&name)
                    .ok_or_else(|| UnknownRef::Syscall(name.clone()))?;
                pending_ids.extend(Self::ids_of(body));
            }
        }
        Ok(Refs { idents: ids, syscalls: sys })
    }

    /// Checks every structural invariant and returns all violations.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for id in &self.idents {
            if !seen.insert(id.name.clone()) {
                out.push(Diagnostic(format!("duplicate identifier '{}'", id.name)));
            }
            if id.size == 0 {
                out.push(Diagnostic(format!("identifier '{}' has size 0", id.name)));
            }
            if id.kind == IdKind::Procedure && id.size != 1 {
                out.push(Diagnostic(format!("procedure '{}' must have size 1", id.name)));
            }
            match (id.kind, self.store.get(&id.name)) {
                (IdKind::Array, Some(StoreEntry::Array(vs))) => {
                    if vs.len() as u64 != id.size {
                        out.push(Diagnostic(format!(
                            "array '{}' declares size {} but initializes {} elements",
                            id.name,
                            id.size,
                            vs.len()
                        )));
                    }
                    if vs.iter().any(|v| matches!(v, Value::Obs(_))) {
                        out.push(Diagnostic(format!(
                            "array '{}' initial content contains an observation value",
                            id.name
                        )));
                    }
                }
                (IdKind::Procedure, Some(StoreEntry::Proc(_))) => {}
                _ => out.push(Diagnostic(format!(
                    "identifier '{}' has no matching store entry",
                    id.name
                ))),
            }
        }
        for space in [Space::User, Space::Kernel] {
            let total: u64 = self.idents_in(space).map(|i| i.size).sum();
            let budget = match space {
                Space::User => self.kappa_user,
                Space::Kernel => self.kappa_kernel,
            };
            if total > budget {
                out.push(Diagnostic(format!(
                    "{space} objects need {total} addresses but the {space} space has {budget}"
                )));
            }
        }
        // User procedures must be unprivileged.
        for id in self.idents_in(Space::User) {
            if id.kind != IdKind::Procedure {
                continue;
            }
            if let Some(StoreEntry::Proc(body)) = self.store.get(&id.name) {
                for name in Self::ids_of(body) {
                    match self.ident(&name) {
                        Some(target) if target.space == Space::Kernel => {
                            out.push(Diagnostic(format!(
                                "user procedure '{}' mentions kernel identifier '{}'",
                                id.name, name
                            )));
                        }
                        Some(_) => {}
                        None => out.push(Diagnostic(format!(
                            "user procedure '{}' mentions unknown identifier '{}'",
                            id.name, name
                        ))),
                    }
                }
            }
        }
        // Capability closure: every syscall's references stay within its caps.
        for (name, body) in &self.syscalls {
            match self.refs(body) {
                Ok(refs) => {
                    let caps = self.caps.get(name).cloned().unwrap_or_default();
                    for r in &refs.idents {
                        if !caps.contains(r) {
                            out.push(Diagnostic(format!(
                                "capability closure violated for '{name}': references '{r}'"
                            )));
                        }
                    }
                    for cap in &caps {
                        if self.ident(cap).map_or(true, |i| i.space != Space::Kernel) {
                            out.push(Diagnostic(format!(
                                "capability '{cap}' of '{name}' is not a kernel identifier"
                            )));
                        }
                    }
                }
                Err(e) => out.push(Diagnostic(format!("syscall '{name}': {e}"))),
            }
        }
        for name in self.caps.keys() {
            if !self.syscalls.contains_key(name) {
                out.push(Diagnostic(format!("capabilities declared for unknown syscall '{name}'")));
            }
        }
        let mut labels = BTreeSet::new();
        for body in self.all_bodies() {
            collect_labels(body, &mut |l| {
                if !labels.insert(l) {
                    out.push(Diagnostic(format!("label {l} is not unique")));
                }
            });
        }
        out
    }

    /// All procedure bodies and syscall bodies, in a deterministic order.
    pub fn all_bodies(&self) -> impl Iterator<Item = &Cmd> {
        self.store
            .values()
            .filter_map(|e| match e {
                StoreEntry::Proc(body) => Some(body),
                StoreEntry::Array(_) => None,
            })
            .chain(self.syscalls.values())
    }

    /// Highest label used anywhere in the system, if any.
    pub fn max_label(&self) -> Option<Label> {
        let mut max = None;
        for body in self.all_bodies() {
            collect_labels(body, &mut |l| {
                if Some(l) > max {
                    max = Some(l);
                }
            });
        }
        max
    }

    /// Finds labels of a given instruction kind inside one syscall body, in
    /// source order. Useful when constructing attacks against a known system.
    pub fn labels_in_syscall(&self, name: &str, kind: LabelKind) -> Vec<Label> {
        let mut out = Vec::new();
        if let Some(body) = self.syscalls.get(name) {
            collect_kind_labels(body, kind, &mut out);
        }
        out
    }
}

/// Result of the reference closure.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Refs {
    pub idents: BTreeSet<IdName>,
    pub syscalls: BTreeSet<SysName>,
}

/// Reference to a name that does not exist in the system.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum UnknownRef {
    #[error("unknown identifier '{0}'")]
    Identifier(IdName),
    #[error("unknown syscall '{0}'")]
    Syscall(SysName),
}

/// Instruction kinds that carry labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Load,
    Call,
    Branch,
    Loop,
}

fn collect_cmd_ids(cmd: &[Instr], out: &mut BTreeSet<IdName>) {
    for instr in cmd {
        match instr {
            Instr::Skip | Instr::Fence => {}
            Instr::Assign(_, e) | Instr::Load(_, _, e) => e.collect_ids(out),
            Instr::Store(e1, e2) => {
                e1.collect_ids(out);
                e2.collect_ids(out);
            }
            Instr::Call(_, e, args) | Instr::SCall(e, args) => {
                e.collect_ids(out);
                args.iter().for_each(|a| a.collect_ids(out));
            }
            Instr::Syscall(_, args) => args.iter().for_each(|a| a.collect_ids(out)),
            Instr::If(_, e, c1, c2) => {
                e.collect_ids(out);
                collect_cmd_ids(c1, out);
                collect_cmd_ids(c2, out);
            }
            Instr::While(_, e, c) => {
                e.collect_ids(out);
                collect_cmd_ids(c, out);
            }
        }
    }
}

fn collect_cmd_syscalls(cmd: &[Instr], out: &mut BTreeSet<SysName>) {
    for instr in cmd {
        match instr {
            Instr::Syscall(name, _) => {
                out.insert(name.clone());
            }
            Instr::If(_, _, c1, c2) => {
                collect_cmd_syscalls(c1, out);
                collect_cmd_syscalls(c2, out);
            }
            Instr::While(_, _, c) => collect_cmd_syscalls(c, out),
            _ => {}
        }
    }
}

fn collect_labels(cmd: &[Instr], f: &mut impl FnMut(Label)) {
    for instr in cmd {
        match instr {
            Instr::Load(l, _, _) | Instr::Call(l, _, _) => f(*l),
            Instr::If(l, _, c1, c2) => {
                f(*l);
                collect_labels(c1, f);
                collect_labels(c2, f);
            }
            Instr::While(l, _, c) => {
                f(*l);
                collect_labels(c, f);
            }
            _ => {}
        }
    }
}

fn collect_kind_labels(cmd: &[Instr], kind: LabelKind, out: &mut Vec<Label>) {
    for instr in cmd {
        match instr {
            Instr::Load(l, _, _) if kind == LabelKind::Load => out.push(*l),
            Instr::Call(l, _, _) if kind == LabelKind::Call => out.push(*l),
            Instr::If(l, _, c1, c2) => {
                if kind == LabelKind::Branch {
                    out.push(*l);
                }
                collect_kind_labels(c1, kind, out);
                collect_kind_labels(c2, kind, out);
            }
            Instr::While(l, _, c) => {
                if kind == LabelKind::Loop {
                    out.push(*l);
                }
                collect_kind_labels(c, kind, out);
            }
            _ => {}
        }
    }
}

/// Re-labels every labeled instruction of a command in source order, starting
/// from `next`. Returns the next free label.
pub fn relabel_cmd(cmd: &mut Cmd, mut next: Label) -> Label {
    for instr in cmd.iter_mut() {
        match instr {
            Instr::Load(l, _, _) | Instr::Call(l, _, _) => {
                *l = next;
                next += 1;
            }
            Instr::If(l, _, c1, c2) => {
                *l = next;
                next += 1;
                next = relabel_cmd(c1, next);
                next = relabel_cmd(c2, next);
            }
            Instr::While(l, _, c) => {
                *l = next;
                next += 1;
                next = relabel_cmd(c, next);
            }
            _ => {}
        }
    }
    next
}

/// Structural equality of commands that ignores labels. Transformations drop
/// the label of rewritten call instructions, so round-trip comparisons are
/// label-insensitive.
pub fn cmd_eq_ignoring_labels(a: &[Instr], b: &[Instr]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| instr_eq_ignoring_labels(x, y))
}

fn instr_eq_ignoring_labels(a: &Instr, b: &Instr) -> bool {
    use Instr::*;
    match (a, b) {
        (Skip, Skip) | (Fence, Fence) => true,
        (Assign(r1, e1), Assign(r2, e2)) => r1 == r2 && e1 == e2,
        (Load(_, r1, e1), Load(_, r2, e2)) => r1 == r2 && e1 == e2,
        (Store(a1, v1), Store(a2, v2)) => a1 == a2 && v1 == v2,
        (Call(_, e1, a1), Call(_, e2, a2)) => e1 == e2 && a1 == a2,
        (SCall(e1, a1), SCall(e2, a2)) => e1 == e2 && a1 == a2,
        (Syscall(n1, a1), Syscall(n2, a2)) => n1 == n2 && a1 == a2,
        (If(_, e1, t1, f1), If(_, e2, t2, f2)) => {
            e1 == e2 && cmd_eq_ignoring_labels(t1, t2) && cmd_eq_ignoring_labels(f1, f2)
        }
        (While(_, e1, c1), While(_, e2, c2)) => e1 == e2 && cmd_eq_ignoring_labels(c1, c2),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse::parse_system;

    fn two_id_system() -> System {
        // Kernel procedure `f` whose body touches kernel array `a`; syscall
        // `s` calls through the literal identifier `f`.
        parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (array a 2 init 0 0)\n\
             (proc f ((store a 1)))\n\
             (syscall s (caps f a) ((call f)))",
        )
        .unwrap()
    }

    #[test]
    fn ids_of_skip_is_empty() {
        assert!(System::ids_of(&[Instr::Skip]).is_empty());
    }

    #[test]
    fn ids_of_walks_expressions_and_bodies() {
        // x := f; store a 1
        let cmd = vec![
            Instr::Assign(Reg::X(1), Expr::ident("f")),
            Instr::Store(Expr::ident("a"), Expr::int(1)),
        ];
        let ids = System::ids_of(&cmd);
        assert_eq!(ids.into_iter().collect::<Vec<_>>(), vec!["a".to_string(), "f".to_string()]);

        // call e() with e = a + 1 mentions only a
        let cmd = vec![Instr::Call(0, Expr::op(Op::Add, vec![Expr::ident("a"), Expr::int(1)]), vec![])];
        let ids = System::ids_of(&cmd);
        assert_eq!(ids.into_iter().collect::<Vec<_>>(), vec!["a".to_string()]);
    }

    #[test]
    fn refs_of_skip_is_empty() {
        let sys = two_id_system();
        let refs = sys.refs(&[Instr::Skip]).unwrap();
        assert!(refs.idents.is_empty() && refs.syscalls.is_empty());
    }

    #[test]
    fn refs_closes_over_procedure_bodies() {
        let sys = two_id_system();
        let refs = sys.refs(sys.syscalls.get("s").unwrap()).unwrap();
        assert!(refs.idents.contains("f") && refs.idents.contains("a"));
        assert!(refs.syscalls.is_empty());
    }

    #[test]
    fn refs_includes_ids_of_invoked_syscalls() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (array a 1 init 0)\n\
             (syscall t (caps a) ((store a 1)))\n\
             (syscall s (caps a) ((sys t)))",
        )
        .unwrap();
        let refs = sys.refs(sys.syscalls.get("s").unwrap()).unwrap();
        assert!(refs.idents.contains("a"));
        assert!(refs.syscalls.contains("t"));
    }

    #[test]
    fn refs_errors_on_unknown_names() {
        let sys = two_id_system();
        assert!(matches!(sys.refs(&[Instr::Store(Expr::ident("zz"), Expr::int(0))]), Err(UnknownRef::Identifier(_))));
        assert!(matches!(sys.refs(&[Instr::Syscall("zz".into(), vec![])]), Err(UnknownRef::Syscall(_))));
    }

    #[test]
    fn ids_always_within_refs() {
        let sys = two_id_system();
        for body in sys.all_bodies() {
            let refs = sys.refs(body).unwrap();
            assert!(System::ids_of(body).is_subset(&refs.idents));
        }
    }

    #[test]
    fn refs_monotone_in_subsequences() {
        let sys = two_id_system();
        let body = sys.syscalls.get("s").unwrap().clone();
        for cut in 0..=body.len() {
            let prefix = &body[..cut];
            let sub = sys.refs(prefix).unwrap();
            let whole = sys.refs(&body).unwrap();
            assert!(sub.idents.is_subset(&whole.idents));
            assert!(sub.syscalls.is_subset(&whole.syscalls));
        }
    }

    #[test]
    fn validate_reports_capability_gap() {
        let mut sys = two_id_system();
        sys.caps.get_mut("s").unwrap().remove("a");
        let diags = sys.validate();
        assert!(diags.iter().any(|d| d.0.contains("capability closure violated for 's'")));
    }

    #[test]
    fn validate_reports_privileged_user_procedure() {
        let err = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (array a 1 init 0)\n\
             (space user)\n\
             (proc g ((store a 1)))",
        )
        .unwrap_err();
        assert!(err.to_string().contains("mentions kernel identifier"));
    }

    #[test]
    fn validate_accepts_well_formed_system() {
        assert!(two_id_system().validate().is_empty());
    }

    #[test]
    fn operators_are_total() {
        assert_eq!(Op::Add.apply(&[Value::Int(2), Value::Int(3)]), Value::Int(5));
        assert_eq!(Op::Add.apply(&[Value::Bool(true), Value::Int(3)]), Value::Nil);
        assert_eq!(Op::Not.apply(&[Value::Nil]), Value::Nil);
        assert_eq!(Op::Eq.apply(&[Value::Nil, Value::Nil]), Value::Bool(true));
    }
}
