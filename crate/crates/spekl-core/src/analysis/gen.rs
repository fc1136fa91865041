//! Seeded random generation of small systems and unprivileged programs for
//! the differential suites.
//!
//! Generated systems always satisfy the structural invariants: capabilities
//! are the computed reference closure of each syscall body (occasionally
//! widened by an extra kernel identifier), loops are bounded by construction,
//! and labels are unique. Unsafety, when it arises, comes from runtime
//! address arithmetic, not from malformed declarations.

use crate::lang::{
    relabel_cmd, Cmd, Expr, IdKind, Identifier, Instr, Label, Op, Reg, Space, StoreEntry, System,
    Value,
};
use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};

/// Shape parameters for generated systems.
#[derive(Clone, Debug)]
pub struct SystemShape {
    pub kappa_user: u64,
    pub kappa_kernel: u64,
    pub max_kernel_arrays: usize,
    pub max_kernel_procs: usize,
    pub max_syscalls: usize,
    pub max_body_len: usize,
    pub user_array: bool,
}

impl Default for SystemShape {
    fn default() -> Self {
        SystemShape {
            kappa_user: 8,
            kappa_kernel: 8,
            max_kernel_arrays: 2,
            max_kernel_procs: 1,
            max_syscalls: 2,
            max_body_len: 6,
            user_array: true,
        }
    }
}

impl SystemShape {
    /// Tiny shape used by the exhaustive reduction suites: two slots, at most
    /// two kernel identifiers and unary syscalls.
    pub fn tiny() -> SystemShape {
        SystemShape {
            kappa_user: 4,
            kappa_kernel: 4,
            max_kernel_arrays: 1,
            max_kernel_procs: 1,
            max_syscalls: 2,
            max_body_len: 4,
            user_array: false,
        }
    }
}

struct Gen<'a> {
    rng: &'a mut dyn RngCore,
    kernel_arrays: Vec<(String, u64)>,
    kernel_procs: Vec<String>,
    user_arrays: Vec<(String, u64)>,
    syscalls: Vec<String>,
    max_reg: u8,
    next_label: Label,
}

impl<'a> Gen<'a> {
    fn chance(&mut self, percent: u32) -> bool {
        self.rng.gen_range(0..100) < percent
    }

    fn label(&mut self) -> Label {
        let l = self.next_label;
        self.next_label += 1;
        l
    }

    fn reg(&mut self) -> Reg {
        Reg::X(self.rng.gen_range(1..=self.max_reg))
    }

    fn small_int(&mut self) -> i64 {
        match self.rng.gen_range(0..4) {
            0 => self.rng.gen_range(-2..2),
            _ => self.rng.gen_range(0..16),
        }
    }

    fn value(&mut self) -> Value {
        match self.rng.gen_range(0..6) {
            0 => Value::Nil,
            1 => Value::Bool(self.rng.gen()),
            _ => Value::Int(self.small_int()),
        }
    }

    /// Expression over a set of visible identifiers.
    fn expr(&mut self, idents: &[String], depth: usize) -> Expr {
        if depth == 0 || self.chance(55) {
            return match self.rng.gen_range(0..4) {
                0 if !idents.is_empty() => {
                    let i = self.rng.gen_range(0..idents.len());
                    Expr::Ident(idents[i].clone())
                }
                1 => Expr::Reg(self.reg()),
                _ => Expr::Const(self.value()),
            };
        }
        let op = match self.rng.gen_range(0..7) {
            0 => Op::Add,
            1 => Op::Sub,
            2 => Op::Mul,
            3 => Op::Eq,
            4 => Op::Lt,
            5 => Op::And,
            _ => Op::Not,
        };
        let args = (0..op.arity()).map(|_| self.expr(idents, depth - 1)).collect();
        Expr::Op(op, args)
    }

    /// Address expression biased toward in-footprint accesses with
    /// occasional wild arithmetic.
    fn addr_expr(&mut self, arrays: &[(String, u64)]) -> Expr {
        if arrays.is_empty() || self.chance(25) {
            return if self.chance(50) {
                Expr::Reg(self.reg())
            } else {
                Expr::int(self.small_int())
            };
        }
        let (name, size) = arrays[self.rng.gen_range(0..arrays.len())].clone();
        if self.chance(60) {
            let k = self.rng.gen_range(0..size) as i64;
            Expr::op(Op::Add, vec![Expr::Ident(name), Expr::int(k)])
        } else {
            Expr::op(Op::Add, vec![Expr::Ident(name), Expr::Reg(self.reg())])
        }
    }

    /// One kernel-body instruction. `privileged` selects kernel footprints.
    fn instr(&mut self, privileged: bool, depth: usize) -> Instr {
        let arrays =
            if privileged { self.kernel_arrays.clone() } else { self.user_arrays.clone() };
        let idents: Vec<String> = if privileged {
            self.kernel_arrays
                .iter()
                .map(|(n, _)| n.clone())
                .chain(self.kernel_procs.iter().cloned())
                .collect()
        } else {
            self.user_arrays.iter().map(|(n, _)| n.clone()).collect()
        };
        match self.rng.gen_range(0..100) {
            0..=14 => Instr::Assign(self.reg(), self.expr(&idents, 2)),
            15..=34 => Instr::Load(self.label(), self.reg(), self.addr_expr(&arrays)),
            35..=54 => Instr::Store(self.addr_expr(&arrays), self.expr(&idents, 1)),
            55..=64 if privileged && !self.kernel_procs.is_empty() => {
                let target = if self.chance(60) {
                    let p = self.rng.gen_range(0..self.kernel_procs.len());
                    Expr::Ident(self.kernel_procs[p].clone())
                } else {
                    Expr::Reg(self.reg())
                };
                if self.chance(25) {
                    Instr::SCall(target, vec![self.expr(&idents, 1)])
                } else {
                    Instr::Call(self.label(), target, vec![self.expr(&idents, 1)])
                }
            }
            65..=72 if !self.syscalls.is_empty() => {
                let s = self.rng.gen_range(0..self.syscalls.len());
                Instr::Syscall(self.syscalls[s].clone(), vec![self.expr(&idents, 1)])
            }
            73..=84 if depth > 0 => {
                let guard = self.expr(&idents, 1);
                let t = self.cmd(privileged, depth - 1, 2);
                let f = self.cmd(privileged, depth - 1, 1);
                Instr::If(self.label(), guard, t, f)
            }
            85..=90 if depth > 0 => {
                // Bounded loop: a dedicated counter makes termination
                // independent of attacker-controlled registers.
                let counter = Reg::X(8);
                let bound = self.rng.gen_range(1..3);
                let mut body = self.cmd(privileged, depth - 1, 1);
                body.push(Instr::Assign(
                    counter,
                    Expr::op(Op::Add, vec![Expr::Reg(counter), Expr::int(1)]),
                ));
                let guard = Expr::op(Op::Lt, vec![Expr::Reg(counter), Expr::int(bound)]);
                return Instr::While(self.label(), guard, body);
            }
            91..=93 => Instr::Fence,
            _ => Instr::Skip,
        }
    }

    fn cmd(&mut self, privileged: bool, depth: usize, max_len: usize) -> Cmd {
        let len = self.rng.gen_range(1..=max_len.max(1));
        (0..len).map(|_| self.instr(privileged, depth)).collect()
    }
}

/// Generates a valid system. The same seed yields the same system.
pub fn gen_system(rng: &mut StdRng, shape: &SystemShape) -> System {
    let mut sys = System::empty(shape.kappa_user, shape.kappa_kernel);

    let mut kernel_budget = shape.kappa_kernel;
    let mut kernel_arrays = Vec::new();
    let n_arrays = rng.gen_range(1..=shape.max_kernel_arrays.max(1));
    for i in 0..n_arrays {
        let size = rng.gen_range(1..=2u64);
        if size + 1 > kernel_budget {
            break;
        }
        kernel_budget -= size;
        let name = format!("ka{i}");
        sys.idents.push(Identifier {
            name: name.clone(),
            kind: IdKind::Array,
            space: Space::Kernel,
            size,
        });
        let init: Vec<Value> = (0..size).map(|_| Value::Int(rng.gen_range(0..4))).collect();
        sys.store.insert(name.clone(), StoreEntry::Array(init));
        kernel_arrays.push((name, size));
    }
    let mut kernel_procs = Vec::new();
    for i in 0..rng.gen_range(0..=shape.max_kernel_procs) {
        if kernel_budget == 0 {
            break;
        }
        kernel_budget -= 1;
        let name = format!("kf{i}");
        sys.idents.push(Identifier {
            name: name.clone(),
            kind: IdKind::Procedure,
            space: Space::Kernel,
            size: 1,
        });
        kernel_procs.push(name);
    }
    let mut user_arrays = Vec::new();
    if shape.user_array && shape.kappa_user >= 2 {
        let name = "ua".to_string();
        sys.idents.push(Identifier {
            name: name.clone(),
            kind: IdKind::Array,
            space: Space::User,
            size: 2,
        });
        sys.store.insert(name.clone(), StoreEntry::Array(vec![Value::Int(0), Value::Int(0)]));
        user_arrays.push((name, 2));
    }

    let mut gen = Gen {
        rng,
        kernel_arrays,
        kernel_procs: kernel_procs.clone(),
        user_arrays,
        syscalls: Vec::new(),
        max_reg: 2,
        next_label: 0,
    };

    // Procedure bodies never invoke syscalls here, so the reference closure
    // of each syscall stays easy to widen into a valid capability set.
    for name in &kernel_procs {
        let body = gen.cmd(true, 1, 3);
        sys.store.insert(name.clone(), StoreEntry::Proc(body));
    }

    let n_sys = gen.rng.gen_range(1..=shape.max_syscalls.max(1));
    for i in 0..n_sys {
        let name = format!("sc{i}");
        let body = gen.cmd(true, 2, shape.max_body_len);
        let refs = sys
            .refs(&body)
            .expect("generated bodies reference existing names");
        let mut caps = refs.idents;
        // Close over the bodies of invoked syscalls too.
        for s in &refs.syscalls {
            if let Some(callee) = sys.syscalls.get(s) {
                caps.extend(sys.refs(callee).expect("existing").idents);
            }
        }
        // Occasionally widen the capability set with an unused identifier.
        if gen.chance(30) {
            if let Some(extra) = sys
                .idents
                .iter()
                .find(|id| id.space == Space::Kernel && !caps.contains(&id.name))
            {
                caps.insert(extra.name.clone());
            }
        }
        sys.syscalls.insert(name.clone(), body);
        sys.caps.insert(name.clone(), caps);
        gen.syscalls.push(name);
    }

    debug_assert!(sys.validate().is_empty(), "generated system must validate: {:?}", sys.validate());
    sys
}

/// Generates an unprivileged program: user-space loads and stores, register
/// arithmetic, syscalls with attacker-chosen arguments, branches and bounded
/// loops. Kernel identifiers never occur literally.
pub fn gen_attacker(rng: &mut impl RngCore, sys: &System) -> Cmd {
    let user_arrays: Vec<(String, u64)> = sys
        .idents_in(Space::User)
        .filter(|i| i.kind == IdKind::Array)
        .map(|i| (i.name.clone(), i.size))
        .collect();
    let user_procs: Vec<String> = sys
        .idents_in(Space::User)
        .filter(|i| i.kind == IdKind::Procedure)
        .map(|i| i.name.clone())
        .collect();
    let syscalls: Vec<String> = sys.syscalls.keys().cloned().collect();
    let n = sys.addr_count() as i64;

    let mut gen = Gen {
        rng,
        kernel_arrays: Vec::new(),
        kernel_procs: user_procs,
        user_arrays: user_arrays.clone(),
        syscalls,
        max_reg: 3,
        next_label: 0,
    };

    let len = gen.rng.gen_range(1..=8);
    let mut cmd: Cmd = Vec::new();
    for _ in 0..len {
        let instr = match gen.rng.gen_range(0..100) {
            0..=19 => {
                // Syscall with address-flavored arguments: the interesting
                // inputs are kernel addresses and boundary values.
                if gen.syscalls.is_empty() {
                    Instr::Skip
                } else {
                    let s = gen.rng.gen_range(0..gen.syscalls.len());
                    let arity = gen.rng.gen_range(0..=2);
                    let args = (0..arity)
                        .map(|_| match gen.rng.gen_range(0..4) {
                            0 => Expr::int(gen.rng.gen_range(0..n)),
                            1 => Expr::Const(Value::Bool(gen.rng.gen())),
                            2 => Expr::Reg(gen.reg()),
                            _ => Expr::int(gen.small_int()),
                        })
                        .collect();
                    Instr::Syscall(gen.syscalls[s].clone(), args)
                }
            }
            20..=39 => {
                let idents: Vec<String> =
                    user_arrays.iter().map(|(a, _)| a.clone()).collect();
                Instr::Assign(gen.reg(), gen.expr(&idents, 2))
            }
            40..=59 => Instr::Load(gen.label(), gen.reg(), gen.addr_expr(&user_arrays.clone())),
            60..=74 => {
                let addr = gen.addr_expr(&user_arrays.clone());
                let idents: Vec<String> =
                    user_arrays.iter().map(|(a, _)| a.clone()).collect();
                let val = gen.expr(&idents, 1);
                Instr::Store(addr, val)
            }
            75..=84 => gen.instr(false, 1),
            _ => {
                let idents: Vec<String> =
                    user_arrays.iter().map(|(a, _)| a.clone()).collect();
                let guard = gen.expr(&idents, 1);
                let t = gen.cmd(false, 0, 2);
                let f = gen.cmd(false, 0, 1);
                Instr::If(gen.label(), guard, t, f)
            }
        };
        cmd.push(instr);
    }
    // Fresh labels make each generated program self-consistent.
    relabel_cmd(&mut cmd, 10_000);
    cmd
}

/// Convenience wrapper: a fresh deterministic generator stream.
pub fn rng_from_seed(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_systems_validate_and_are_deterministic() {
        for seed in 0..40 {
            let a = gen_system(&mut rng_from_seed(seed), &SystemShape::default());
            let b = gen_system(&mut rng_from_seed(seed), &SystemShape::default());
            assert_eq!(a, b);
            assert!(a.validate().is_empty());
        }
    }

    #[test]
    fn generated_attackers_are_unprivileged() {
        let sys = gen_system(&mut rng_from_seed(1), &SystemShape::default());
        let mut rng = rng_from_seed(2);
        for _ in 0..50 {
            let attacker = gen_attacker(&mut rng, &sys);
            for name in System::ids_of(&attacker) {
                let id = sys.ident(&name).expect("known identifier");
                assert_eq!(id.space, Space::User, "attacker mentions kernel id {name}");
            }
        }
    }

    #[test]
    fn tiny_shape_respects_its_bounds() {
        for seed in 0..20 {
            let sys = gen_system(&mut rng_from_seed(seed), &SystemShape::tiny());
            assert!(sys.kernel_ident_count() <= 3);
            assert!(sys.syscalls.len() <= 2);
        }
    }
}
