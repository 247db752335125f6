//! Recursive-descent parser. Precedence, loosest first:
//! `,` < `;` < `if` < `:=`/`<-` < `||` < `&&` < comparisons < `::` <
//! `+ - ^` < `* / mod` < unary `-` < application < `!` and field access.
//! `let`, `fun`, `function`, `match`, `try` and `if` may start any operand
//! and extend as far to the right as possible.

use thiserror::Error;

use super::ast::*;
use super::lexer::{Token, TokenKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("syntax error: expected {}, found {found}", expected.join(" or "))]
pub struct ParseError {
    pub span: Span,
    pub expected: Vec<String>,
    pub found: String,
}

type PResult<T> = Result<T, ParseError>;

/// Operators that may be named as values, as in `(+)`.
const OPERATOR_NAMES: &[&str] =
    &["+", "-", "*", "/", "mod", "^", "=", "<>", "<", "<=", ">", ">=", ":=", "!", "&&", "||"];

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
}

fn mk(kind: ExprKind, span: Span) -> Expr {
    Expr { kind, span }
}

fn var(name: &str, span: Span) -> Expr {
    mk(ExprKind::Var(name.to_string()), span)
}

fn apply_op(op: &str, op_span: Span, args: Vec<Expr>) -> Expr {
    let span = args[0].span.to(args[args.len() - 1].span);
    mk(ExprKind::Apply(Box::new(var(op, op_span)), args), span)
}

/// A constructor's syntactic argument: a tuple supplies several.
fn ctor_args(arg: Expr) -> Vec<Expr> {
    match arg.kind {
        ExprKind::Tuple(items) => items,
        _ => vec![arg],
    }
}

fn ctor_pargs(arg: Pattern) -> Vec<Pattern> {
    match arg.kind {
        PatternKind::Tuple(items) => items,
        _ => vec![arg],
    }
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &'a Token {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn peek_at(&self, k: usize) -> &'a Token {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)]
    }

    fn bump(&mut self) -> &'a Token {
        let t = self.peek();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn prev_span(&self) -> Span {
        self.toks[self.pos.saturating_sub(1)].span
    }

    fn is(&self, sym: &str) -> bool {
        self.peek().kind.symbol() == Some(sym)
    }

    fn is_at(&self, k: usize, sym: &str) -> bool {
        self.peek_at(k).kind.symbol() == Some(sym)
    }

    fn eat(&mut self, sym: &str) -> bool {
        if self.is(sym) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn error<T>(&self, expected: &[&str]) -> PResult<T> {
        let t = self.peek();
        Err(ParseError {
            span: t.span,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: t.kind.describe(),
        })
    }

    fn expect(&mut self, sym: &str) -> PResult<Span> {
        if self.is(sym) {
            Ok(self.bump().span)
        } else {
            self.error(&[&format!("'{sym}'")])
        }
    }

    fn lident(&mut self) -> PResult<(String, Span)> {
        match &self.peek().kind {
            TokenKind::Ident(s) => {
                let s = s.clone();
                Ok((s, self.bump().span))
            }
            _ => self.error(&["identifier"]),
        }
    }

    fn uident(&mut self) -> PResult<(String, Span)> {
        match &self.peek().kind {
            TokenKind::UIdent(s) => {
                let s = s.clone();
                Ok((s, self.bump().span))
            }
            _ => self.error(&["constructor"]),
        }
    }

    /// `( op )` at the current position.
    fn operator_name(&self) -> Option<&'static str> {
        if !self.is("(") || !self.is_at(2, ")") {
            return None;
        }
        match &self.peek_at(1).kind {
            TokenKind::Op(op) if OPERATOR_NAMES.contains(op) => Some(op),
            _ => None,
        }
    }

    // ---- items ----

    fn program(&mut self) -> PResult<Program> {
        let mut items = Vec::new();
        while self.peek().kind != TokenKind::Eof {
            items.push(self.item()?);
        }
        Ok(Program { items })
    }

    fn item(&mut self) -> PResult<Item> {
        let start = self.peek().span;
        if self.eat("type") {
            let mut decls = vec![self.type_decl()?];
            while self.eat("and") {
                decls.push(self.type_decl()?);
            }
            Ok(Item::Type(decls))
        } else if self.eat("exception") {
            let (name, span) = self.uident()?;
            let arity = if self.eat("of") { self.type_expr()? } else { 0 };
            Ok(Item::Exception { name, arity, span })
        } else if self.eat("let") {
            let recursive = self.eat("rec");
            let bindings = self.bindings()?;
            if self.is("in") {
                return self.error(&["top-level definition"]);
            }
            Ok(Item::Let { recursive, bindings, span: start.to(self.prev_span()) })
        } else {
            self.error(&["'let'", "'type'", "'exception'"])
        }
    }

    fn type_decl(&mut self) -> PResult<TypeDecl> {
        if let TokenKind::TyVar(_) = self.peek().kind {
            self.bump();
        } else if self.is("(") {
            self.bump();
            loop {
                match self.peek().kind {
                    TokenKind::TyVar(_) => {
                        self.bump();
                    }
                    _ => return self.error(&["type variable"]),
                }
                if !self.eat(",") {
                    break;
                }
            }
            self.expect(")")?;
        }
        let (name, span) = self.lident()?;
        if !self.eat("=") {
            return Ok(TypeDecl { name, kind: TypeKind::Alias, span });
        }
        let kind = if self.eat("{") {
            let mut fields = Vec::new();
            while !self.is("}") {
                let mutable = self.eat("mutable");
                let (fname, fspan) = self.lident()?;
                self.expect(":")?;
                self.type_expr()?;
                fields.push(FieldDecl { name: fname, mutable, span: fspan });
                if !self.eat(";") {
                    break;
                }
            }
            self.expect("}")?;
            TypeKind::Record(fields)
        } else if self.is("|") || matches!(self.peek().kind, TokenKind::UIdent(_)) {
            self.eat("|");
            let mut ctors = Vec::new();
            loop {
                let (cname, cspan) = self.uident()?;
                let arity = if self.eat("of") { self.type_expr()? } else { 0 };
                ctors.push(CtorDecl { name: cname, arity, span: cspan });
                if !self.eat("|") {
                    break;
                }
            }
            TypeKind::Variant(ctors)
        } else {
            self.type_expr()?;
            TypeKind::Alias
        };
        Ok(TypeDecl { name, kind, span })
    }

    /// Parses a type expression; returns its number of top-level `*` components.
    fn type_expr(&mut self) -> PResult<usize> {
        let mut count = 1;
        self.type_app()?;
        while self.eat("*") {
            self.type_app()?;
            count += 1;
        }
        if self.eat("->") {
            self.type_expr()?;
            return Ok(1);
        }
        Ok(count)
    }

    fn type_app(&mut self) -> PResult<()> {
        match &self.peek().kind {
            TokenKind::TyVar(_) | TokenKind::Ident(_) => {
                self.bump();
            }
            _ if self.is("(") => {
                self.bump();
                self.type_expr()?;
                while self.eat(",") {
                    self.type_expr()?;
                }
                self.expect(")")?;
            }
            _ => return self.error(&["type"]),
        }
        while let TokenKind::Ident(_) = self.peek().kind {
            self.bump();
        }
        Ok(())
    }

    fn bindings(&mut self) -> PResult<Vec<Binding>> {
        let mut out = vec![self.binding()?];
        while self.eat("and") {
            out.push(self.binding()?);
        }
        Ok(out)
    }

    fn binding(&mut self) -> PResult<Binding> {
        let start = self.peek().span;
        let name = if let Some(op) = self.operator_name() {
            self.pos += 3;
            Some((op.to_string(), start.to(self.prev_span())))
        } else if let TokenKind::Ident(n) = &self.peek().kind {
            if !self.is_at(1, "=") && !self.is_at(1, ",") && !self.is_at(1, "::") {
                let n = n.clone();
                let span = self.bump().span;
                Some((n, span))
            } else {
                None
            }
        } else {
            None
        };
        let (pat, params) = match name {
            Some((n, span)) => {
                let mut params = Vec::new();
                while !self.is("=") {
                    params.push(self.simple_pattern()?);
                }
                (Pattern { kind: PatternKind::Var(n), span }, params)
            }
            None => (self.pattern()?, Vec::new()),
        };
        self.expect("=")?;
        let body = self.expr()?;
        Ok(Binding { span: start.to(body.span), pat, params, body })
    }

    // ---- expressions ----

    fn expr(&mut self) -> PResult<Expr> {
        let first = self.seq()?;
        if !self.is(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat(",") {
            items.push(self.seq()?);
        }
        let span = items[0].span.to(items[items.len() - 1].span);
        Ok(mk(ExprKind::Tuple(items), span))
    }

    fn seq(&mut self) -> PResult<Expr> {
        let first = self.assign()?;
        if self.eat(";") {
            let rest = self.seq()?;
            let span = first.span.to(rest.span);
            return Ok(mk(ExprKind::Sequence(Box::new(first), Box::new(rest)), span));
        }
        Ok(first)
    }

    /// An expression without top-level `;`, allowing a comma-tuple.
    fn element(&mut self) -> PResult<Expr> {
        let first = self.assign()?;
        if !self.is(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat(",") {
            items.push(self.assign()?);
        }
        let span = items[0].span.to(items[items.len() - 1].span);
        Ok(mk(ExprKind::Tuple(items), span))
    }

    fn assign(&mut self) -> PResult<Expr> {
        let lhs = self.or_expr()?;
        if self.is(":=") {
            let op = self.bump().span;
            let rhs = self.assign()?;
            return Ok(apply_op(":=", op, vec![lhs, rhs]));
        }
        if self.is("<-") {
            let ExprKind::FieldGet(record, field) = lhs.kind else {
                return self.error(&["field access before '<-'"]);
            };
            self.bump();
            let rhs = self.assign()?;
            let span = lhs.span.to(rhs.span);
            return Ok(mk(ExprKind::FieldSet(record, field, Box::new(rhs)), span));
        }
        Ok(lhs)
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        let lhs = self.and_expr()?;
        if self.eat("||") {
            let rhs = self.or_expr()?;
            let span = lhs.span.to(rhs.span);
            return Ok(mk(ExprKind::OrElse(Box::new(lhs), Box::new(rhs)), span));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let lhs = self.cmp_expr()?;
        if self.eat("&&") {
            let rhs = self.and_expr()?;
            let span = lhs.span.to(rhs.span);
            return Ok(mk(ExprKind::AndAlso(Box::new(lhs), Box::new(rhs)), span));
        }
        Ok(lhs)
    }

    fn cmp_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.cons_expr()?;
        while let Some(op) = ["=", "<>", "<", "<=", ">", ">="].into_iter().find(|o| self.is(o)) {
            let span = self.bump().span;
            let rhs = self.cons_expr()?;
            lhs = apply_op(op, span, vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn cons_expr(&mut self) -> PResult<Expr> {
        let head = self.add_expr()?;
        if self.eat("::") {
            let tail = self.cons_expr()?;
            let span = head.span.to(tail.span);
            return Ok(mk(ExprKind::Ctor("::".into(), vec![head, tail]), span));
        }
        Ok(head)
    }

    fn add_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.mul_expr()?;
        while let Some(op) = ["+", "-", "^"].into_iter().find(|o| self.is(o)) {
            let span = self.bump().span;
            let rhs = self.mul_expr()?;
            lhs = apply_op(op, span, vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn mul_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = ["*", "/", "mod"].into_iter().find(|o| self.is(o)) {
            let span = self.bump().span;
            let rhs = self.unary()?;
            lhs = apply_op(op, span, vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.is("-") {
            let span = self.bump().span;
            if let TokenKind::Int(n) = self.peek().kind {
                let s = span.to(self.bump().span);
                return Ok(mk(ExprKind::IntLit(n.wrapping_neg()), s));
            }
            let arg = self.unary()?;
            return Ok(apply_op("~-", span, vec![arg]));
        }
        self.app()
    }

    fn starts_simple(&self) -> bool {
        match &self.peek().kind {
            TokenKind::Int(_)
            | TokenKind::Str(_)
            | TokenKind::Char(_)
            | TokenKind::Ident(_)
            | TokenKind::UIdent(_) => true,
            k => matches!(k.symbol(), Some("true" | "false" | "(" | "[" | "{" | "begin" | "!")),
        }
    }

    fn app(&mut self) -> PResult<Expr> {
        let start = self.peek().span;
        match self.peek().kind.symbol() {
            Some("let") => return self.let_expr(),
            Some("fun") => {
                self.bump();
                let mut params = vec![self.simple_pattern()?];
                while !self.is("->") {
                    params.push(self.simple_pattern()?);
                }
                self.expect("->")?;
                let body = self.expr()?;
                let span = start.to(body.span);
                return Ok(mk(ExprKind::Fun(params, Box::new(body)), span));
            }
            Some("function") => {
                self.bump();
                let cases = self.cases()?;
                return Ok(mk(ExprKind::Function(cases), start.to(self.prev_span())));
            }
            Some("match") | Some("try") => {
                let is_match = self.is("match");
                self.bump();
                let scrutinee = self.expr()?;
                self.expect("with")?;
                let cases = self.cases()?;
                let span = start.to(self.prev_span());
                let kind = if is_match {
                    ExprKind::Match(Box::new(scrutinee), cases)
                } else {
                    ExprKind::Try(Box::new(scrutinee), cases)
                };
                return Ok(mk(kind, span));
            }
            Some("if") => {
                self.bump();
                let cond = self.expr()?;
                self.expect("then")?;
                let then = self.assign()?;
                let els = if self.eat("else") { Some(Box::new(self.assign()?)) } else { None };
                let span = start.to(self.prev_span());
                return Ok(mk(ExprKind::If(Box::new(cond), Box::new(then), els), span));
            }
            Some("raise") => {
                self.bump();
                let arg = self.ctor_or_simple()?;
                let span = start.to(arg.span);
                return Ok(mk(ExprKind::Raise(Box::new(arg)), span));
            }
            _ => {}
        }
        if let TokenKind::UIdent(_) = self.peek().kind {
            return self.ctor_or_simple();
        }
        let head = self.simple()?;
        let mut args = Vec::new();
        while self.starts_simple() {
            args.push(self.simple()?);
        }
        if args.is_empty() {
            return Ok(head);
        }
        let span = head.span.to(args[args.len() - 1].span);
        Ok(mk(ExprKind::Apply(Box::new(head), args), span))
    }

    fn ctor_or_simple(&mut self) -> PResult<Expr> {
        if let TokenKind::UIdent(name) = &self.peek().kind {
            let name = name.clone();
            let span = self.bump().span;
            if self.starts_simple() {
                let arg = self.simple()?;
                let s = span.to(arg.span);
                return Ok(mk(ExprKind::Ctor(name, ctor_args(arg)), s));
            }
            return Ok(mk(ExprKind::Ctor(name, Vec::new()), span));
        }
        self.simple()
    }

    fn let_expr(&mut self) -> PResult<Expr> {
        let start = self.expect("let")?;
        let recursive = self.eat("rec");
        let bindings = self.bindings()?;
        self.expect("in")?;
        let body = self.expr()?;
        let span = start.to(body.span);
        Ok(mk(ExprKind::Let(recursive, bindings, Box::new(body)), span))
    }

    fn cases(&mut self) -> PResult<Vec<Case>> {
        self.eat("|");
        let mut cases = Vec::new();
        loop {
            let pat = self.pattern()?;
            let guard = if self.eat("when") { Some(self.expr()?) } else { None };
            self.expect("->")?;
            let body = self.expr()?;
            cases.push(Case { pat, guard, body });
            if !self.eat("|") {
                return Ok(cases);
            }
        }
    }

    fn simple(&mut self) -> PResult<Expr> {
        let mut e = self.atom()?;
        while self.is(".") {
            self.bump();
            let (field, span) = self.lident()?;
            let s = e.span.to(span);
            e = mk(ExprKind::FieldGet(Box::new(e), field), s);
        }
        Ok(e)
    }

    fn atom(&mut self) -> PResult<Expr> {
        let t = self.peek();
        let span = t.span;
        let simple = match &t.kind {
            TokenKind::Int(n) => Some(ExprKind::IntLit(*n)),
            TokenKind::Str(s) => Some(ExprKind::StrLit(s.clone())),
            TokenKind::Char(c) => Some(ExprKind::CharLit(*c)),
            TokenKind::Ident(n) => Some(ExprKind::Var(n.clone())),
            TokenKind::UIdent(n) => Some(ExprKind::Ctor(n.clone(), Vec::new())),
            TokenKind::Keyword("true") => Some(ExprKind::Ctor("true".into(), Vec::new())),
            TokenKind::Keyword("false") => Some(ExprKind::Ctor("false".into(), Vec::new())),
            _ => None,
        };
        if let Some(kind) = simple {
            self.bump();
            return Ok(mk(kind, span));
        }
        if let Some(op) = self.operator_name() {
            self.pos += 3;
            return Ok(var(op, span.to(self.prev_span())));
        }
        if self.eat("!") {
            let arg = self.simple()?;
            return Ok(apply_op("!", span, vec![arg]));
        }
        if self.eat("(") {
            if self.eat(")") {
                return Ok(mk(ExprKind::Ctor("()".into(), Vec::new()), span.to(self.prev_span())));
            }
            let mut e = self.expr()?;
            let end = self.expect(")")?;
            e.span = span.to(end);
            return Ok(e);
        }
        if self.eat("begin") {
            if self.eat("end") {
                return Ok(mk(ExprKind::Ctor("()".into(), Vec::new()), span.to(self.prev_span())));
            }
            let mut e = self.expr()?;
            let end = self.expect("end")?;
            e.span = span.to(end);
            return Ok(e);
        }
        if self.eat("[") {
            let mut items = Vec::new();
            while !self.is("]") {
                items.push(self.element()?);
                if !self.eat(";") {
                    break;
                }
            }
            let end = self.expect("]")?;
            let mut list = mk(ExprKind::Ctor("[]".into(), Vec::new()), end);
            for item in items.into_iter().rev() {
                let s = item.span.to(end);
                list = mk(ExprKind::Ctor("::".into(), vec![item, list]), s);
            }
            list.span = span.to(end);
            return Ok(list);
        }
        if self.eat("{") {
            let mut fields = Vec::new();
            loop {
                let (name, _) = self.lident()?;
                self.expect("=")?;
                fields.push((name, self.element()?));
                if !self.eat(";") || self.is("}") {
                    break;
                }
            }
            let end = self.expect("}")?;
            return Ok(mk(ExprKind::Record(fields), span.to(end)));
        }
        self.error(&["expression"])
    }

    // ---- patterns ----

    fn pattern(&mut self) -> PResult<Pattern> {
        let first = self.or_pattern()?;
        if !self.is(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat(",") {
            items.push(self.or_pattern()?);
        }
        let span = items[0].span.to(items[items.len() - 1].span);
        Ok(Pattern { kind: PatternKind::Tuple(items), span })
    }

    fn or_pattern(&mut self) -> PResult<Pattern> {
        let mut p = self.cons_pattern()?;
        while self.eat("|") {
            let q = self.cons_pattern()?;
            let span = p.span.to(q.span);
            p = Pattern { kind: PatternKind::Or(Box::new(p), Box::new(q)), span };
        }
        Ok(p)
    }

    fn cons_pattern(&mut self) -> PResult<Pattern> {
        let head = self.app_pattern()?;
        if self.eat("::") {
            let tail = self.cons_pattern()?;
            let span = head.span.to(tail.span);
            return Ok(Pattern { kind: PatternKind::Ctor("::".into(), vec![head, tail]), span });
        }
        Ok(head)
    }

    fn starts_simple_pattern(&self) -> bool {
        match &self.peek().kind {
            TokenKind::Int(_)
            | TokenKind::Str(_)
            | TokenKind::Char(_)
            | TokenKind::Ident(_)
            | TokenKind::UIdent(_) => true,
            k => matches!(k.symbol(), Some("_" | "true" | "false" | "(" | "[" | "-")),
        }
    }

    fn app_pattern(&mut self) -> PResult<Pattern> {
        if let TokenKind::UIdent(name) = &self.peek().kind {
            let name = name.clone();
            let span = self.bump().span;
            if self.starts_simple_pattern() {
                let arg = self.simple_pattern()?;
                let s = span.to(arg.span);
                return Ok(Pattern { kind: PatternKind::Ctor(name, ctor_pargs(arg)), span: s });
            }
            return Ok(Pattern { kind: PatternKind::Ctor(name, Vec::new()), span });
        }
        self.simple_pattern()
    }

    fn simple_pattern(&mut self) -> PResult<Pattern> {
        let t = self.peek();
        let span = t.span;
        let kind = match &t.kind {
            TokenKind::Punct("_") => PatternKind::Wildcard,
            TokenKind::Ident(n) => PatternKind::Var(n.clone()),
            TokenKind::Int(n) => PatternKind::IntLit(*n),
            TokenKind::Char(c) => PatternKind::CharLit(*c),
            TokenKind::Str(s) => PatternKind::StrLit(s.clone()),
            TokenKind::UIdent(n) => PatternKind::Ctor(n.clone(), Vec::new()),
            TokenKind::Keyword("true") => PatternKind::Ctor("true".into(), Vec::new()),
            TokenKind::Keyword("false") => PatternKind::Ctor("false".into(), Vec::new()),
            TokenKind::Op("-") => {
                self.bump();
                if let TokenKind::Int(n) = self.peek().kind {
                    let s = span.to(self.bump().span);
                    return Ok(Pattern { kind: PatternKind::IntLit(n.wrapping_neg()), span: s });
                }
                return self.error(&["integer"]);
            }
            _ => {
                if self.eat("(") {
                    if self.eat(")") {
                        return Ok(Pattern { kind: PatternKind::Unit, span: span.to(self.prev_span()) });
                    }
                    let mut p = self.pattern()?;
                    let end = self.expect(")")?;
                    p.span = span.to(end);
                    return Ok(p);
                }
                if self.eat("[") {
                    let mut items = Vec::new();
                    while !self.is("]") {
                        items.push(self.or_pattern_list_item()?);
                        if !self.eat(";") {
                            break;
                        }
                    }
                    let end = self.expect("]")?;
                    let mut list = Pattern { kind: PatternKind::Ctor("[]".into(), Vec::new()), span: end };
                    for item in items.into_iter().rev() {
                        let s = item.span.to(end);
                        list = Pattern { kind: PatternKind::Ctor("::".into(), vec![item, list]), span: s };
                    }
                    list.span = span.to(end);
                    return Ok(list);
                }
                return self.error(&["pattern"]);
            }
        };
        self.bump();
        Ok(Pattern { kind, span })
    }

    fn or_pattern_list_item(&mut self) -> PResult<Pattern> {
        let first = self.or_pattern()?;
        if !self.is(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat(",") {
            items.push(self.or_pattern()?);
        }
        let span = items[0].span.to(items[items.len() - 1].span);
        Ok(Pattern { kind: PatternKind::Tuple(items), span })
    }
}

pub fn parse(tokens: &[Token]) -> Result<Program, ParseError> {
    assert!(matches!(tokens.last().map(|t| &t.kind), Some(TokenKind::Eof)), "token stream must end with Eof");
    Parser { toks: tokens, pos: 0 }.program()
}

/// Parse a single expression (used by tests and tools).
pub fn parse_expr(tokens: &[Token]) -> Result<Expr, ParseError> {
    let mut p = Parser { toks: tokens, pos: 0 };
    let e = p.expr()?;
    if p.peek().kind != TokenKind::Eof {
        return p.error(&["end of input"]);
    }
    Ok(e)
}
