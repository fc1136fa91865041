//! Parser for the `.ksl` system format.
//!
//! The format is a line-oriented s-expression flavor:
//!
//! ```text
//! (addr-space KU KK)
//! (space user|kernel)
//! (array NAME SIZE init v ...)
//! (proc NAME (cmd ...))
//! (syscall NAME (caps ID ...) (cmd ...))
//! ```
//!
//! Commands: `(skip) (:= x EXPR) (load x EXPR) (store EXPR EXPR)
//! (call EXPR EXPR...) (scall EXPR EXPR...) (sys NAME EXPR...)
//! (if EXPR (...) (...)) (while EXPR (...)) (fence)`.
//!
//! Labels are assigned automatically in source order.

use super::*;
use thiserror::Error;

/// Parse failure with source position.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("system is not well-formed:\n{}", .0.iter().map(|d| format!("  - {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
}

const DEFAULT_KAPPA: u64 = 8;

/// Parses a system from `.ksl` text and checks its invariants. When the text
/// does not set `(addr-space ...)`, both spaces default to 8 addresses.
pub fn parse_system(text: &str) -> Result<System, ParseError> {
    let sexprs = read_all(text)?;
    let mut sys = System::empty(DEFAULT_KAPPA, DEFAULT_KAPPA);
    let mut space = Space::User;
    let mut next_label: Label = 0;
    for form in &sexprs {
        let list = form.as_list("top-level form")?;
        let head = list
            .first()
            .ok_or_else(|| form.err("empty top-level form"))?
            .as_symbol("form head")?;
        match head {
            "addr-space" => {
                expect_len(form, list, 3)?;
                sys.kappa_user = list[1].as_u64()?;
                sys.kappa_kernel = list[2].as_u64()?;
            }
            "space" => {
                expect_len(form, list, 2)?;
                space = match list[1].as_symbol("space name")? {
                    "user" => Space::User,
                    "kernel" => Space::Kernel,
                    other => return Err(list[1].err(&format!("unknown space '{other}'"))),
                };
            }
            "array" => {
                if list.len() < 4 || list[3].as_symbol("init keyword")? != "init" {
                    return Err(form.err("expected (array NAME SIZE init v ...)"));
                }
                let name = list[1].as_symbol("array name")?.to_string();
                let size = list[2].as_u64()?;
                let values: Vec<Value> =
                    list[4..].iter().map(|s| s.as_value()).collect::<Result<_, _>>()?;
                if values.len() as u64 != size {
                    return Err(form.err(&format!(
                        "array '{name}' declares size {size} but initializes {} elements",
                        values.len()
                    )));
                }
                sys.idents.push(Identifier { name: name.clone(), kind: IdKind::Array, space, size });
                sys.store.insert(name, StoreEntry::Array(values));
            }
            "proc" => {
                expect_len(form, list, 3)?;
                let name = list[1].as_symbol("procedure name")?.to_string();
                let body = parse_cmd(&list[2], &mut next_label)?;
                sys.idents.push(Identifier {
                    name: name.clone(),
                    kind: IdKind::Procedure,
                    space,
                    size: 1,
                });
                sys.store.insert(name, StoreEntry::Proc(body));
            }
            "syscall" => {
                expect_len(form, list, 4)?;
                let name = list[1].as_symbol("syscall name")?.to_string();
                let caps_list = list[2].as_list("caps list")?;
                if caps_list.first().and_then(|s| s.as_symbol("caps").ok()) != Some("caps") {
                    return Err(list[2].err("expected (caps ID ...)"));
                }
                let caps: BTreeSet<IdName> = caps_list[1..]
                    .iter()
                    .map(|s| s.as_symbol("capability").map(str::to_string))
                    .collect::<Result<_, _>>()?;
                let body = parse_cmd(&list[3], &mut next_label)?;
                sys.syscalls.insert(name.clone(), body);
                sys.caps.insert(name, caps);
            }
            other => return Err(form.err(&format!("unknown form '{other}'"))),
        }
    }
    let diags = sys.validate();
    if diags.is_empty() {
        Ok(sys)
    } else {
        Err(ParseError::Invalid(diags))
    }
}

/// Parses a bare command list (used by tests and attack builders).
pub fn parse_cmd_text(text: &str, first_label: Label) -> Result<Cmd, ParseError> {
    let sexprs = read_all(text)?;
    let mut next = first_label;
    let mut cmd = Vec::new();
    for form in &sexprs {
        cmd.push(parse_instr(form, &mut next)?);
    }
    Ok(cmd)
}

fn parse_cmd(form: &Sexpr, next_label: &mut Label) -> Result<Cmd, ParseError> {
    let list = form.as_list("command sequence")?;
    list.iter().map(|f| parse_instr(f, next_label)).collect()
}

fn parse_instr(form: &Sexpr, next_label: &mut Label) -> Result<Instr, ParseError> {
    let list = form.as_list("instruction")?;
    let head = list
        .first()
        .ok_or_else(|| form.err("empty instruction"))?
        .as_symbol("instruction head")?;
    let mut fresh = || {
        let l = *next_label;
        *next_label += 1;
        l
    };
    match head {
        "skip" => {
            expect_len(form, list, 1)?;
            Ok(Instr::Skip)
        }
        "fence" => {
            expect_len(form, list, 1)?;
            Ok(Instr::Fence)
        }
        ":=" => {
            expect_len(form, list, 3)?;
            Ok(Instr::Assign(list[1].as_reg()?, parse_expr(&list[2])?))
        }
        "load" => {
            expect_len(form, list, 3)?;
            Ok(Instr::Load(fresh(), list[1].as_reg()?, parse_expr(&list[2])?))
        }
        "store" => {
            expect_len(form, list, 3)?;
            Ok(Instr::Store(parse_expr(&list[1])?, parse_expr(&list[2])?))
        }
        "call" | "scall" => {
            if list.len() < 2 {
                return Err(form.err("call needs a target expression"));
            }
            if list.len() - 2 > MAX_ARG_REGS as usize {
                return Err(form.err("calls accept at most 8 arguments"));
            }
            let target = parse_expr(&list[1])?;
            let args: Vec<Expr> = list[2..].iter().map(parse_expr).collect::<Result<_, _>>()?;
            if head == "call" {
                Ok(Instr::Call(fresh(), target, args))
            } else {
                Ok(Instr::SCall(target, args))
            }
        }
        "sys" => {
            if list.len() < 2 {
                return Err(form.err("sys needs a syscall name"));
            }
            if list.len() - 2 > MAX_ARG_REGS as usize {
                return Err(form.err("syscalls accept at most 8 arguments"));
            }
            let name = list[1].as_symbol("syscall name")?.to_string();
            let args: Vec<Expr> = list[2..].iter().map(parse_expr).collect::<Result<_, _>>()?;
            Ok(Instr::Syscall(name, args))
        }
        "if" => {
            expect_len(form, list, 4)?;
            let label = fresh();
            let guard = parse_expr(&list[1])?;
            let then_cmd = parse_cmd(&list[2], next_label)?;
            let else_cmd = parse_cmd(&list[3], next_label)?;
            Ok(Instr::If(label, guard, then_cmd, else_cmd))
        }
        "while" => {
            expect_len(form, list, 3)?;
            let label = fresh();
            let guard = parse_expr(&list[1])?;
            let body = parse_cmd(&list[2], next_label)?;
            Ok(Instr::While(label, guard, body))
        }
        other => Err(form.err(&format!("unknown instruction '{other}'"))),
    }
}

fn parse_expr(form: &Sexpr) -> Result<Expr, ParseError> {
    match form {
        Sexpr::Atom { text, .. } => {
            if let Some(v) = atom_value(text) {
                return Ok(Expr::Const(v));
            }
            if let Some(r) = atom_reg(text) {
                return Ok(Expr::Reg(r));
            }
            if is_ident_name(text) {
                return Ok(Expr::Ident(text.clone()));
            }
            Err(form.err(&format!("cannot parse expression atom '{text}'")))
        }
        Sexpr::List { items, .. } => {
            let head = items
                .first()
                .ok_or_else(|| form.err("empty expression"))?
                .as_symbol("operator")?;
            let op = match head {
                "+" => Op::Add,
                "-" => Op::Sub,
                "*" => Op::Mul,
                "=" => Op::Eq,
                "!=" => Op::Ne,
                "<" => Op::Lt,
                "and" => Op::And,
                "or" => Op::Or,
                "not" => Op::Not,
                other => return Err(form.err(&format!("unknown operator '{other}'"))),
            };
            let args: Vec<Expr> = items[1..].iter().map(parse_expr).collect::<Result<_, _>>()?;
            if args.len() != op.arity() {
                return Err(form.err(&format!(
                    "operator '{head}' takes {} operands, got {}",
                    op.arity(),
                    args.len()
                )));
            }
            Ok(Expr::Op(op, args))
        }
    }
}

fn atom_value(text: &str) -> Option<Value> {
    match text {
        "true" => Some(Value::Bool(true)),
        "false" => Some(Value::Bool(false)),
        "nil" => Some(Value::Nil),
        _ => text.parse::<i64>().ok().map(Value::Int),
    }
}

fn atom_reg(text: &str) -> Option<Reg> {
    if text == "ret" {
        return Some(Reg::Ret);
    }
    let rest = text.strip_prefix('x')?;
    let i: u8 = rest.parse().ok()?;
    (1..=MAX_ARG_REGS).contains(&i).then_some(Reg::X(i))
}

fn is_ident_name(text: &str) -> bool {
    let mut chars = text.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && text.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && atom_reg(text).is_none()
        && atom_value(text).is_none()
}

// ---------------------------------------------------------------------------
// S-expression reader
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Sexpr {
    Atom { text: String, line: usize, col: usize },
    List { items: Vec<Sexpr>, line: usize, col: usize },
}

impl Sexpr {
    fn pos(&self) -> (usize, usize) {
        match self {
            Sexpr::Atom { line, col, .. } | Sexpr::List { line, col, .. } => (*line, *col),
        }
    }

    fn err(&self, msg: &str) -> ParseError {
        let (line, col) = self.pos();
        ParseError::Syntax { line, col, msg: msg.to_string() }
    }

    fn as_list(&self, what: &str) -> Result<&[Sexpr], ParseError> {
        match self {
            Sexpr::List { items, .. } => Ok(items),
            Sexpr::Atom { .. } => Err(self.err(&format!("expected a list for {what}"))),
        }
    }

    fn as_symbol(&self, what: &str) -> Result<&str, ParseError> {
        match self {
            Sexpr::Atom { text, .. } => Ok(text),
            Sexpr::List { .. } => Err(self.err(&format!("expected a symbol for {what}"))),
        }
    }

    fn as_u64(&self) -> Result<u64, ParseError> {
        self.as_symbol("number")?
            .parse::<u64>()
            .map_err(|_| self.err("expected a non-negative number"))
    }

    fn as_value(&self) -> Result<Value, ParseError> {
        let text = self.as_symbol("value")?;
        atom_value(text).ok_or_else(|| self.err(&format!("cannot parse value '{text}'")))
    }

    fn as_reg(&self) -> Result<Reg, ParseError> {
        let text = self.as_symbol("register")?;
        atom_reg(text)
            .ok_or_else(|| self.err(&format!("unknown register '{text}' (use x1..x8 or ret)")))
    }
}

fn expect_len(form: &Sexpr, list: &[Sexpr], len: usize) -> Result<(), ParseError> {
    if list.len() != len {
        return Err(form.err(&format!("expected {} elements, got {}", len, list.len())));
    }
    Ok(())
}

fn read_all(text: &str) -> Result<Vec<Sexpr>, ParseError> {
    let mut reader = Reader { text: text.as_bytes(), pos: 0, line: 1, col: 1 };
    let mut out = Vec::new();
    loop {
        reader.skip_ws();
        if reader.at_end() {
            return Ok(out);
        }
        out.push(reader.read()?);
    }
}

struct Reader<'a> {
    text: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Reader<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.text.len()
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c == b';' {
                while let Some(c) = self.peek() {
                    if c == b'\n' {
                        break;
                    }
                    self.bump();
                }
            } else if c.is_ascii_whitespace() {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn read(&mut self) -> Result<Sexpr, ParseError> {
        self.skip_ws();
        let (line, col) = (self.line, self.col);
        match self.peek() {
            None => Err(ParseError::Syntax { line, col, msg: "unexpected end of input".into() }),
            Some(b'(') => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        None => {
                            return Err(ParseError::Syntax {
                                line,
                                col,
                                msg: "unclosed '('".into(),
                            })
                        }
                        Some(b')') => {
                            self.bump();
                            return Ok(Sexpr::List { items, line, col });
                        }
                        Some(_) => items.push(self.read()?),
                    }
                }
            }
            Some(b')') => {
                Err(ParseError::Syntax { line, col, msg: "unexpected ')'".into() })
            }
            Some(_) => {
                let start = self.pos;
                while let Some(c) = self.peek() {
                    if c.is_ascii_whitespace() || c == b'(' || c == b')' || c == b';' {
                        break;
                    }
                    self.bump();
                }
                let text = std::str::from_utf8(&self.text[start..self.pos])
                    .map_err(|_| ParseError::Syntax {
                        line,
                        col,
                        msg: "invalid UTF-8 atom".into(),
                    })?
                    .to_string();
                Ok(Sexpr::Atom { text, line, col })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::print::system_to_ksl;

    #[test]
    fn empty_text_gives_empty_system() {
        let sys = parse_system("").unwrap();
        assert!(sys.idents.is_empty() && sys.syscalls.is_empty());
        assert_eq!((sys.kappa_user, sys.kappa_kernel), (8, 8));
    }

    #[test]
    fn capability_gap_is_rejected_at_parse_time() {
        let err = parse_system(
            "(space kernel) (array a 2 init 0 0) (syscall t (caps) ((store a 1)))",
        )
        .unwrap_err();
        assert!(err.to_string().contains("capability closure violated for 't'"));
        // With the capability present the same source parses.
        parse_system("(space kernel) (array a 2 init 0 0) (syscall t (caps a) ((store a 1)))")
            .unwrap();
    }

    #[test]
    fn message_passing_example_parses_with_buffer_caps() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space kernel)\n\
             (array buf 2 init 0 0)\n\
             (syscall recv (caps buf) ((load ret (+ buf x1))))\n\
             (syscall send (caps buf) ((store (+ buf x1) x2)))",
        )
        .unwrap();
        assert_eq!(sys.caps.get("recv").unwrap().iter().collect::<Vec<_>>(), vec!["buf"]);
        assert_eq!(sys.caps.get("send").unwrap().iter().collect::<Vec<_>>(), vec!["buf"]);
    }

    #[test]
    fn labels_are_assigned_in_source_order() {
        let sys = parse_system(
            "(space kernel)\n\
             (array a 1 init 0)\n\
             (syscall s (caps a) ((load x1 a) (if x1 ((load x2 a)) ()) (while x1 ((skip)))))",
        )
        .unwrap();
        assert_eq!(sys.labels_in_syscall("s", LabelKind::Load), vec![0, 2]);
        assert_eq!(sys.labels_in_syscall("s", LabelKind::Branch), vec![1]);
        assert_eq!(sys.labels_in_syscall("s", LabelKind::Loop), vec![3]);
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse_system("(space kernel)\n(array a 1 init 0\n").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { line: 2, .. }));
    }

    #[test]
    fn print_then_parse_round_trips() {
        let sys = parse_system(
            "(addr-space 8 8)\n\
             (space user)\n\
             (array ubuf 2 init 5 nil)\n\
             (proc helper ((:= ret 1)))\n\
             (space kernel)\n\
             (array a 2 init 0 true)\n\
             (proc f ((store a 1) (if (< x1 2) ((call f x1)) ((skip)))))\n\
             (syscall s (caps a f) ((sys t) (scall f 1)))\n\
             (syscall t (caps a) ((while (< x1 2) ((:= x1 (+ x1 1)))) (fence) (store a x1)))",
        )
        .unwrap();
        let printed = system_to_ksl(&sys);
        let reparsed = parse_system(&printed).unwrap();
        assert_eq!(sys, reparsed);
    }
}
