//! Dialect checker: MiniML allows only shallow patterns, no or-patterns,
//! no `when` guards and no `function` expressions.

use super::ast::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dialect {
    MiniML,
    FullML,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub span: Span,
    pub message: String,
}

pub fn check_subset(program: &Program, dialect: Dialect) -> Vec<Violation> {
    let mut out = Vec::new();
    if dialect == Dialect::FullML {
        return out;
    }
    for item in &program.items {
        if let Item::Let { bindings, .. } = item {
            for b in bindings {
                binding(b, &mut out);
            }
        }
    }
    out
}

fn violation(out: &mut Vec<Violation>, span: Span, message: &str) {
    out.push(Violation { span, message: message.to_string() });
}

fn binding(b: &Binding, out: &mut Vec<Violation>) {
    pattern(&b.pat, out);
    for p in &b.params {
        pattern(p, out);
    }
    expr(&b.body, out);
}

fn pattern(p: &Pattern, out: &mut Vec<Violation>) {
    match &p.kind {
        PatternKind::Or(..) => violation(out, p.span, "or-pattern"),
        PatternKind::Tuple(ps) | PatternKind::Ctor(_, ps) => {
            for sub in ps {
                match &sub.kind {
                    PatternKind::Wildcard | PatternKind::Var(_) => {}
                    PatternKind::Ctor(..) => violation(out, sub.span, "nested constructor pattern"),
                    _ => violation(out, sub.span, "nested pattern"),
                }
            }
        }
        _ => {}
    }
}

fn cases(cs: &[Case], out: &mut Vec<Violation>) {
    for c in cs {
        pattern(&c.pat, out);
        if let Some(g) = &c.guard {
            violation(out, g.span, "`when` guard");
            expr(g, out);
        }
        expr(&c.body, out);
    }
}

fn expr(e: &Expr, out: &mut Vec<Violation>) {
    // Explicit work list; corpus expressions can be long sequences.
    let mut work = vec![e];
    while let Some(e) = work.pop() {
        match &e.kind {
            ExprKind::IntLit(_) | ExprKind::StrLit(_) | ExprKind::CharLit(_) | ExprKind::Var(_) => {}
            ExprKind::Ctor(_, args) | ExprKind::Tuple(args) => work.extend(args),
            ExprKind::Record(fields) => work.extend(fields.iter().map(|(_, e)| e)),
            ExprKind::FieldGet(r, _) => work.push(r),
            ExprKind::FieldSet(r, _, v) => work.extend([&**r, &**v]),
            ExprKind::Apply(f, args) => {
                work.push(f);
                work.extend(args);
            }
            ExprKind::Fun(params, body) => {
                for p in params {
                    pattern(p, out);
                }
                work.push(body);
            }
            ExprKind::Function(cs) => {
                violation(out, e.span, "`function` expression");
                cases(cs, out);
            }
            ExprKind::Let(_, bs, body) => {
                for b in bs {
                    binding(b, out);
                }
                work.push(body);
            }
            ExprKind::If(c, t, f) => {
                work.extend([&**c, &**t]);
                if let Some(f) = f {
                    work.push(f);
                }
            }
            ExprKind::Match(s, cs) | ExprKind::Try(s, cs) => {
                work.push(s);
                cases(cs, out);
            }
            ExprKind::Raise(x) => work.push(x),
            ExprKind::Sequence(a, b) | ExprKind::AndAlso(a, b) | ExprKind::OrElse(a, b) => {
                work.extend([&**a, &**b])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{lexer::lex, parser::parse};

    fn check(src: &str, dialect: Dialect) -> usize {
        let program = parse(&lex(src.as_bytes(), FileId(0)).unwrap()).unwrap();
        check_subset(&program, dialect).len()
    }

    #[test]
    fn nested_ctor_is_a_violation() {
        assert_eq!(check("let f x = match x with C (D x) -> x | _ -> 0", Dialect::MiniML), 1);
        assert_eq!(check("let f x = match x with C (D x) -> x | _ -> 0", Dialect::FullML), 0);
    }

    #[test]
    fn shallow_tuple_args_are_fine() {
        assert_eq!(check("let f v = match v with C (x, y) -> x | _ -> 0", Dialect::MiniML), 0);
    }

    #[test]
    fn function_guard_and_or() {
        assert_eq!(check("let f = function A -> 1 | _ -> 0", Dialect::MiniML), 1);
        assert_eq!(check("let f x = match x with A | B -> 1 | _ -> 0", Dialect::MiniML), 1);
        assert_eq!(check("let f x = match x with y when y > 0 -> 1 | _ -> 0", Dialect::MiniML), 1);
    }
}
