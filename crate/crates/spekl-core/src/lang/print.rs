//! Canonical printer for systems and commands. Printing a system and parsing
//! it back yields a structurally equal system: declarations are emitted in a
//! fixed order and labels are re-derived from source order, which matches the
//! order the parser assigns them.

use super::*;
use std::fmt::Write as _;

/// Renders a whole system in `.ksl` form.
pub fn system_to_ksl(sys: &System) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "(addr-space {} {})", sys.kappa_user, sys.kappa_kernel);
    for space in [Space::User, Space::Kernel] {
        if sys.idents_in(space).next().is_none() {
            continue;
        }
        let _ = writeln!(out, "(space {space})");
        for id in sys.idents_in(space) {
            match sys.store.get(&id.name) {
                Some(StoreEntry::Array(values)) => {
                    let rendered: Vec<String> = values.iter().map(value_to_ksl).collect();
                    let _ = writeln!(
                        out,
                        "(array {} {} init {})",
                        id.name,
                        id.size,
                        rendered.join(" ")
                    );
                }
                Some(StoreEntry::Proc(body)) => {
                    let _ = writeln!(out, "(proc {} {})", id.name, cmd_to_ksl(body));
                }
                None => {}
            }
        }
    }
    for (name, body) in &sys.syscalls {
        let caps = sys.caps.get(name).cloned().unwrap_or_default();
        let caps: Vec<&str> = caps.iter().map(String::as_str).collect();
        let _ = writeln!(
            out,
            "(syscall {} (caps{}{}) {})",
            name,
            if caps.is_empty() { "" } else { " " },
            caps.join(" "),
            cmd_to_ksl(body)
        );
    }
    out
}

/// Renders a command sequence as `(...)`.
pub fn cmd_to_ksl(cmd: &[Instr]) -> String {
    let rendered: Vec<String> = cmd.iter().map(instr_to_ksl).collect();
    format!("({})", rendered.join(" "))
}

pub fn instr_to_ksl(instr: &Instr) -> String {
    match instr {
        Instr::Skip => "(skip)".to_string(),
        Instr::Fence => "(fence)".to_string(),
        Instr::Assign(r, e) => format!("(:= {r} {})", expr_to_ksl(e)),
        Instr::Load(_, r, e) => format!("(load {r} {})", expr_to_ksl(e)),
        Instr::Store(addr, val) => {
            format!("(store {} {})", expr_to_ksl(addr), expr_to_ksl(val))
        }
        Instr::Call(_, target, args) => render_call("call", target, args),
        Instr::SCall(target, args) => render_call("scall", target, args),
        Instr::Syscall(name, args) => {
            let mut s = format!("(sys {name}");
            for a in args {
                let _ = write!(s, " {}", expr_to_ksl(a));
            }
            s.push(')');
            s
        }
        Instr::If(_, guard, then_cmd, else_cmd) => format!(
            "(if {} {} {})",
            expr_to_ksl(guard),
            cmd_to_ksl(then_cmd),
            cmd_to_ksl(else_cmd)
        ),
        Instr::While(_, guard, body) => {
            format!("(while {} {})", expr_to_ksl(guard), cmd_to_ksl(body))
        }
    }
}

fn render_call(head: &str, target: &Expr, args: &[Expr]) -> String {
    let mut s = format!("({head} {}", expr_to_ksl(target));
    for a in args {
        let _ = write!(s, " {}", expr_to_ksl(a));
    }
    s.push(')');
    s
}

pub fn expr_to_ksl(expr: &Expr) -> String {
    match expr {
        Expr::Const(v) => value_to_ksl(v),
        Expr::Reg(r) => r.to_string(),
        Expr::Ident(name) => name.clone(),
        Expr::Op(op, args) => {
            let rendered: Vec<String> = args.iter().map(expr_to_ksl).collect();
            format!("({} {})", op.token(), rendered.join(" "))
        }
    }
}

fn value_to_ksl(v: &Value) -> String {
    match v {
        Value::Int(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Nil => "nil".to_string(),
        // Observation values never appear in initial stores; render a marker
        // that the parser deliberately rejects.
        Value::Obs(o) => format!("#obs[{o}]"),
    }
}
