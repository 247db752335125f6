//! First pass: patterns, records, constructors and operators become a
//! small pattern-free language with resolved variable references and
//! explicit tail calls.

use std::collections::HashMap;

use crate::bytecode::{ConstValue, Opcode};
use crate::frontend::ast::*;
use crate::vm::{Prim, EXN_TAG, MATCH_FAILURE_ID};

use super::tables::{CtorKind, SymbolTables};
use super::CompileError;

pub type VarId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimOp {
    Ccall(Prim),
    /// `acc = acc op pop`
    Binary(Opcode),
    Unary(Opcode),
}

impl PrimOp {
    pub fn arity(self) -> usize {
        match self {
            PrimOp::Ccall(p) => p.arity(),
            PrimOp::Binary(_) => 2,
            PrimOp::Unary(_) => 1,
        }
    }
}

/// Operators and primitives available without definition.
pub fn builtin(name: &str) -> Option<PrimOp> {
    use Opcode::*;
    let op = match name {
        "+" => PrimOp::Binary(ADDINT),
        "-" => PrimOp::Binary(SUBINT),
        "*" => PrimOp::Binary(MULINT),
        "/" => PrimOp::Binary(DIVINT),
        "mod" => PrimOp::Binary(MODINT),
        "=" => PrimOp::Binary(EQ),
        "<>" => PrimOp::Binary(NEQ),
        "<" => PrimOp::Binary(LT),
        "<=" => PrimOp::Binary(LE),
        ">" => PrimOp::Binary(GT),
        ">=" => PrimOp::Binary(GE),
        "~-" => PrimOp::Unary(NEGINT),
        "not" => PrimOp::Unary(BOOLNOT),
        "^" => PrimOp::Ccall(Prim::StringConcat),
        _ => PrimOp::Ccall(Prim::from_name(name)?),
    };
    Some(op)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosureSpec {
    pub arity: u32,
    pub params: Vec<VarId>,
    pub body: LExpr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Switch {
    /// Re-evaluated when both tables are in use, so always a plain access.
    pub scrutinee: LExpr,
    pub consts: Vec<(u32, LExpr)>,
    pub blocks: Vec<(u32, LExpr)>,
    pub const_size: u32,
    pub block_size: u32,
    pub default: LExpr,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LExpr {
    Const(ConstValue),
    Local(VarId),
    Env(u32),
    OffsetClosure(u32),
    Global(u32),
    SetGlobal(u32, Box<LExpr>),
    MakeBlock(u8, Vec<LExpr>),
    Field(Box<LExpr>, u32),
    SetField(Box<LExpr>, u32, Box<LExpr>),
    Apply(Box<LExpr>, Vec<LExpr>),
    TailApply(Box<LExpr>, Vec<LExpr>),
    Prim(PrimOp, Vec<LExpr>),
    If(Box<LExpr>, Box<LExpr>, Box<LExpr>),
    Switch(Box<Switch>),
    Let(VarId, Box<LExpr>, Box<LExpr>),
    /// Mutually recursive closures sharing one environment; `vars[j]`
    /// names closure `j` in the body.
    LetRec { vars: Vec<VarId>, funcs: Vec<ClosureSpec>, captures: Vec<LExpr>, body: Box<LExpr> },
    Closure(Box<ClosureSpec>, Vec<LExpr>),
    Seq(Box<LExpr>, Box<LExpr>),
    Trap { body: Box<LExpr>, exn: VarId, handler: Box<LExpr> },
    Raise(Box<LExpr>),
}

impl LExpr {
    fn int(n: i64) -> LExpr {
        LExpr::Const(ConstValue::Int(n))
    }

    fn unit() -> LExpr {
        LExpr::int(0)
    }
}

/// Whole lowered program: top-level statements executed in order.
#[derive(Clone, Debug, PartialEq)]
pub struct LoweredProgram {
    /// Named global slots, including slot 0 (the exception name table).
    pub named_globals: u32,
    pub exception_names: Vec<String>,
    pub statements: Vec<LExpr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bind {
    Local(VarId),
    Member(usize, u32),
}

struct Level {
    env: usize,
    group: Option<usize>,
}

#[derive(Clone, Copy)]
enum Fail {
    MatchFailure,
    Reraise(VarId),
}

enum Class<'e> {
    Irrefutable,
    Ctor(&'e str, &'e [Pattern]),
    Int(i64),
    Str(&'e [u8]),
}

type ArmBody<'b, 't> = dyn FnMut(&mut Lowerer<'t>) -> Result<LExpr, CompileError> + 'b;

pub struct Lowerer<'t> {
    tables: &'t SymbolTables,
    scope: Vec<(String, Bind)>,
    globals: HashMap<String, u32>,
    next_global: u32,
    next_var: VarId,
    var_level: Vec<usize>,
    levels: Vec<Level>,
    envs: Vec<Vec<(Bind, LExpr)>>,
    next_group: usize,
}

fn classify(p: &Pattern) -> Result<Class<'_>, CompileError> {
    Ok(match &p.kind {
        PatternKind::Wildcard | PatternKind::Var(_) | PatternKind::Unit | PatternKind::Tuple(_) => {
            Class::Irrefutable
        }
        PatternKind::IntLit(n) => Class::Int(*n),
        PatternKind::CharLit(c) => Class::Int(*c as i64),
        PatternKind::StrLit(s) => Class::Str(s),
        PatternKind::Ctor(name, args) => Class::Ctor(name, args),
        PatternKind::Or(..) => return Err(CompileError::Unsupported { what: "or-pattern".into(), span: p.span }),
    })
}

impl<'t> Lowerer<'t> {
    pub fn new(tables: &'t SymbolTables) -> Self {
        Lowerer {
            tables,
            scope: Vec::new(),
            globals: HashMap::new(),
            next_global: 1,
            next_var: 0,
            var_level: Vec::new(),
            levels: vec![Level { env: 0, group: None }],
            envs: vec![Vec::new()],
            next_group: 0,
        }
    }

    fn fresh(&mut self) -> VarId {
        let v = self.next_var;
        self.next_var += 1;
        self.var_level.push(self.levels.len() - 1);
        v
    }

    fn bind_local(&mut self, name: &str) -> VarId {
        let v = self.fresh();
        self.scope.push((name.to_string(), Bind::Local(v)));
        v
    }

    fn resolve(&mut self, key: Bind, level: usize) -> LExpr {
        match key {
            Bind::Local(v) if self.var_level[v as usize] == level => return LExpr::Local(v),
            Bind::Member(g, j) if self.levels[level].group == Some(g) => return LExpr::OffsetClosure(j),
            _ => {}
        }
        let env = self.levels[level].env;
        if let Some(i) = self.envs[env].iter().position(|(k, _)| *k == key) {
            return LExpr::Env(i as u32);
        }
        assert!(level > 0, "unresolvable capture at top level");
        let outer = self.resolve(key, level - 1);
        self.envs[env].push((key, outer));
        LExpr::Env(self.envs[env].len() as u32 - 1)
    }

    fn lookup(&mut self, name: &str, span: Span) -> Result<LExpr, CompileError> {
        if let Some((_, b)) = self.scope.iter().rev().find(|(n, _)| n == name) {
            let level = self.levels.len() - 1;
            return Ok(self.resolve(*b, level));
        }
        if let Some(slot) = self.globals.get(name) {
            return Ok(LExpr::Global(*slot));
        }
        if let Some(op) = builtin(name) {
            return Ok(self.eta(op));
        }
        Err(CompileError::UnknownVariable { name: name.to_string(), span })
    }

    /// A closure standing for a builtin used as a value.
    fn eta(&mut self, op: PrimOp) -> LExpr {
        let params: Vec<VarId> = (0..op.arity()).map(|_| self.fresh()).collect();
        let args = params.iter().map(|v| LExpr::Local(*v)).collect();
        let spec = ClosureSpec { arity: params.len() as u32, params, body: LExpr::Prim(op, args) };
        LExpr::Closure(Box::new(spec), Vec::new())
    }

    fn new_global(&mut self) -> u32 {
        self.next_global += 1;
        self.next_global - 1
    }

    // ---- expressions ----

    fn expr(&mut self, e: &Expr, tail: bool) -> Result<LExpr, CompileError> {
        Ok(match &e.kind {
            ExprKind::IntLit(n) => LExpr::int(*n),
            ExprKind::CharLit(c) => LExpr::int(*c as i64),
            ExprKind::StrLit(s) => LExpr::Const(ConstValue::Str(s.clone())),
            ExprKind::Var(name) => self.lookup(name, e.span)?,
            ExprKind::Ctor(name, args) => self.ctor(name, args, e.span)?,
            ExprKind::Tuple(items) => {
                let items = self.exprs(items)?;
                make_block(0, items)
            }
            ExprKind::Record(fields) => self.record(fields, e.span)?,
            ExprKind::FieldGet(r, f) => {
                let info = self.field(f, e.span)?;
                LExpr::Field(Box::new(self.expr(r, false)?), info.0)
            }
            ExprKind::FieldSet(r, f, v) => {
                let (offset, mutable) = self.field(f, e.span)?;
                if !mutable {
                    return Err(CompileError::ImmutableField { name: f.clone(), span: e.span });
                }
                let r = self.expr(r, false)?;
                let v = self.expr(v, false)?;
                LExpr::SetField(Box::new(r), offset, Box::new(v))
            }
            ExprKind::Apply(f, args) => self.apply(f, args, tail)?,
            ExprKind::Fun(params, body) => {
                let (spec, captures) = self.closure(params, None, |l| l.expr(body, true))?;
                LExpr::Closure(Box::new(spec), captures)
            }
            ExprKind::Function(cases) => {
                let (spec, captures) = self.closure(&[], Some(cases), |_| unreachable!())?;
                LExpr::Closure(Box::new(spec), captures)
            }
            ExprKind::Let(false, bindings, body) => self.let_in(bindings, body, tail)?,
            ExprKind::Let(true, bindings, body) => self.let_rec(bindings, body, tail)?,
            ExprKind::If(c, t, f) => {
                let c = self.expr(c, false)?;
                let t = self.expr(t, tail)?;
                let f = match f {
                    Some(f) => self.expr(f, tail)?,
                    None => LExpr::unit(),
                };
                LExpr::If(Box::new(c), Box::new(t), Box::new(f))
            }
            ExprKind::Match(scrutinee, cases) => {
                let s = self.expr(scrutinee, false)?;
                self.with_scrutinee(s, |l, v| l.cases(v, cases, tail, Fail::MatchFailure))?
            }
            ExprKind::Try(body, cases) => {
                let body = self.expr(body, false)?;
                let exn = self.fresh();
                let handler = self.cases(LExpr::Local(exn), cases, tail, Fail::Reraise(exn))?;
                LExpr::Trap { body: Box::new(body), exn, handler: Box::new(handler) }
            }
            ExprKind::Raise(x) => LExpr::Raise(Box::new(self.expr(x, false)?)),
            ExprKind::Sequence(a, b) => {
                let a = self.expr(a, false)?;
                LExpr::Seq(Box::new(a), Box::new(self.expr(b, tail)?))
            }
            ExprKind::AndAlso(a, b) => {
                let a = self.expr(a, false)?;
                let b = self.expr(b, tail)?;
                LExpr::If(Box::new(a), Box::new(b), Box::new(LExpr::int(0)))
            }
            ExprKind::OrElse(a, b) => {
                let a = self.expr(a, false)?;
                let b = self.expr(b, tail)?;
                LExpr::If(Box::new(a), Box::new(LExpr::int(1)), Box::new(b))
            }
        })
    }

    fn exprs(&mut self, es: &[Expr]) -> Result<Vec<LExpr>, CompileError> {
        es.iter().map(|e| self.expr(e, false)).collect()
    }

    fn field(&self, name: &str, span: Span) -> Result<(u32, bool), CompileError> {
        let info = self
            .tables
            .fields
            .get(name)
            .ok_or_else(|| CompileError::UnknownField { name: name.to_string(), span })?;
        Ok((info.offset as u32, info.mutable))
    }

    fn record(&mut self, fields: &[(String, Expr)], span: Span) -> Result<LExpr, CompileError> {
        let first = &fields[0].0;
        let info = self
            .tables
            .fields
            .get(first)
            .ok_or_else(|| CompileError::UnknownField { name: first.clone(), span })?;
        let size = self.tables.record_size(info.type_id);
        let mut slots: Vec<Option<LExpr>> = vec![None; size];
        for (name, value) in fields {
            let f = self
                .tables
                .fields
                .get(name)
                .ok_or_else(|| CompileError::UnknownField { name: name.clone(), span })?;
            if f.type_id != info.type_id || slots[f.offset].is_some() {
                return Err(CompileError::BadRecord { message: format!("field {name} misplaced"), span });
            }
            slots[f.offset] = Some(self.expr(value, false)?);
        }
        let values: Option<Vec<LExpr>> = slots.into_iter().collect();
        let values = values.ok_or_else(|| CompileError::BadRecord { message: "missing fields".into(), span })?;
        Ok(LExpr::MakeBlock(0, values))
    }

    /// Constructor arguments adjusted to the declared arity: a single
    /// declared argument receives the syntactic tuple.
    fn ctor_args(
        &mut self,
        name: &str,
        arity: usize,
        args: &[Expr],
        span: Span,
    ) -> Result<Vec<LExpr>, CompileError> {
        let lowered = self.exprs(args)?;
        if arity == 1 && lowered.len() > 1 {
            return Ok(vec![make_block(0, lowered)]);
        }
        if lowered.len() != arity {
            return Err(CompileError::CtorArityMismatch {
                name: name.to_string(),
                expected: arity,
                found: lowered.len(),
                span,
            });
        }
        Ok(lowered)
    }

    fn ctor(&mut self, name: &str, args: &[Expr], span: Span) -> Result<LExpr, CompileError> {
        if let Some(exn) = self.tables.exceptions.get(name).cloned() {
            let mut fields = vec![LExpr::int(exn.id as i64)];
            fields.extend(self.ctor_args(name, exn.arity, args, span)?);
            return Ok(LExpr::MakeBlock(EXN_TAG, fields));
        }
        let info = self
            .tables
            .ctors
            .get(name)
            .cloned()
            .ok_or_else(|| CompileError::UnknownCtor { name: name.to_string(), span })?;
        let args = self.ctor_args(name, info.arity, args, span)?;
        Ok(match info.kind {
            CtorKind::Constant => LExpr::int(info.tag as i64),
            CtorKind::Block => make_block(info.tag as u8, args),
        })
    }

    fn apply(&mut self, f: &Expr, args: &[Expr], tail: bool) -> Result<LExpr, CompileError> {
        if let ExprKind::Var(name) = &f.kind {
            let shadowed =
                self.scope.iter().any(|(n, _)| n == name) || self.globals.contains_key(name.as_str());
            if let (false, Some(op)) = (shadowed, builtin(name)) {
                if args.len() > op.arity() {
                    return Err(CompileError::PrimitiveArity {
                        name: name.clone(),
                        expected: op.arity(),
                        found: args.len(),
                        span: f.span,
                    });
                }
                if args.len() == op.arity() {
                    return Ok(LExpr::Prim(op, self.exprs(args)?));
                }
            }
        }
        let f = self.expr(f, false)?;
        let args = self.exprs(args)?;
        Ok(if tail { LExpr::TailApply(Box::new(f), args) } else { LExpr::Apply(Box::new(f), args) })
    }

    /// Lower a function with the given parameter patterns (or a single
    /// parameter matched against `cases`).
    fn closure(
        &mut self,
        params: &[Pattern],
        cases: Option<&[Case]>,
        body: impl FnOnce(&mut Self) -> Result<LExpr, CompileError>,
    ) -> Result<(ClosureSpec, Vec<LExpr>), CompileError> {
        let env = self.envs.len();
        self.envs.push(Vec::new());
        self.levels.push(Level { env, group: None });
        let spec = self.function_body(params, cases, body);
        self.levels.pop();
        let captures = std::mem::take(&mut self.envs[env]).into_iter().map(|(_, e)| e).collect();
        Ok((spec?, captures))
    }

    /// Parameters and body of a function, in the current level.
    fn function_body(
        &mut self,
        params: &[Pattern],
        cases: Option<&[Case]>,
        body: impl FnOnce(&mut Self) -> Result<LExpr, CompileError>,
    ) -> Result<ClosureSpec, CompileError> {
        let mark = self.scope.len();
        let result = (|| {
            if let Some(cases) = cases {
                let v = self.fresh();
                let body = self.cases(LExpr::Local(v), cases, true, Fail::MatchFailure)?;
                return Ok(ClosureSpec { arity: 1, params: vec![v], body });
            }
            let mut vars = Vec::new();
            let mut destructure = Vec::new();
            for p in params {
                match &p.kind {
                    PatternKind::Var(name) => vars.push(self.bind_local(name)),
                    PatternKind::Wildcard | PatternKind::Unit => vars.push(self.fresh()),
                    _ => {
                        let v = self.fresh();
                        vars.push(v);
                        destructure.push((v, p));
                    }
                }
            }
            let body = self.destructure(&destructure, true, &mut Some(body))?;
            Ok(ClosureSpec { arity: vars.len() as u32, params: vars, body })
        })();
        self.scope.truncate(mark);
        result
    }

    /// Match each `(var, pattern)` in turn, then run `body`.
    fn destructure(
        &mut self,
        pats: &[(VarId, &Pattern)],
        tail: bool,
        body: &mut Option<impl FnOnce(&mut Self) -> Result<LExpr, CompileError>>,
    ) -> Result<LExpr, CompileError> {
        let Some(((v, p), rest)) = pats.split_first() else {
            return body.take().expect("body used once")(self);
        };
        let mut arm = |l: &mut Lowerer<'t>| l.destructure(rest, tail, body);
        self.match_arms(LExpr::Local(*v), &[(*p, None)], &mut arm, Fail::MatchFailure)
    }

    fn let_in(&mut self, bindings: &[Binding], body: &Expr, tail: bool) -> Result<LExpr, CompileError> {
        let mut rhs = Vec::new();
        for b in bindings {
            rhs.push(self.binding_value(b)?);
        }
        let vars: Vec<VarId> = rhs.iter().map(|_| self.fresh()).collect();
        let mark = self.scope.len();
        let mut destructure = Vec::new();
        for (b, v) in bindings.iter().zip(&vars) {
            match &b.pat.kind {
                PatternKind::Var(name) => self.scope.push((name.clone(), Bind::Local(*v))),
                PatternKind::Wildcard | PatternKind::Unit => {}
                _ => destructure.push((*v, &b.pat)),
            }
        }
        let inner = self.destructure(&destructure, tail, &mut Some(|l: &mut Self| l.expr(body, tail)));
        self.scope.truncate(mark);
        let mut out = inner?;
        for (v, r) in vars.into_iter().zip(rhs).rev() {
            out = LExpr::Let(v, Box::new(r), Box::new(out));
        }
        Ok(out)
    }

    /// Right-hand side of a binding; `let f x = e` is a closure.
    fn binding_value(&mut self, b: &Binding) -> Result<LExpr, CompileError> {
        if b.params.is_empty() {
            return self.expr(&b.body, false);
        }
        let (spec, captures) = self.closure(&b.params, None, |l| l.expr(&b.body, true))?;
        Ok(LExpr::Closure(Box::new(spec), captures))
    }

    fn recursive_function(b: &Binding) -> Result<(&[Pattern], Option<&[Case]>, &Expr), CompileError> {
        if !b.params.is_empty() {
            return Ok((&b.params, None, &b.body));
        }
        match &b.body.kind {
            ExprKind::Fun(params, body) => Ok((params, None, body)),
            ExprKind::Function(cases) => Ok((&[], Some(cases), &b.body)),
            _ => Err(CompileError::BadRecursiveBinding { span: b.span }),
        }
    }

    fn let_rec(&mut self, bindings: &[Binding], body: &Expr, tail: bool) -> Result<LExpr, CompileError> {
        let group = self.next_group;
        self.next_group += 1;
        let mut names = Vec::new();
        for b in bindings {
            let name = b.name().ok_or(CompileError::BadRecursiveBinding { span: b.span })?;
            names.push(name.to_string());
        }
        let mark = self.scope.len();
        for (j, n) in names.iter().enumerate() {
            self.scope.push((n.clone(), Bind::Member(group, j as u32)));
        }
        let env = self.envs.len();
        self.envs.push(Vec::new());
        let mut funcs = Vec::new();
        for b in bindings {
            let (params, cases, fbody) = match Self::recursive_function(b) {
                Ok(x) => x,
                Err(e) => {
                    self.scope.truncate(mark);
                    return Err(e);
                }
            };
            self.levels.push(Level { env, group: Some(group) });
            let spec = self.function_body(params, cases, |l| l.expr(fbody, true));
            self.levels.pop();
            match spec {
                Ok(s) => funcs.push(s),
                Err(e) => {
                    self.scope.truncate(mark);
                    return Err(e);
                }
            }
        }
        self.scope.truncate(mark);
        let captures = std::mem::take(&mut self.envs[env]).into_iter().map(|(_, e)| e).collect();
        let vars: Vec<VarId> = names.iter().map(|n| self.bind_local(n)).collect();
        let body = self.expr(body, tail);
        self.scope.truncate(mark);
        Ok(LExpr::LetRec { vars, funcs, captures, body: Box::new(body?) })
    }

    // ---- pattern matching ----

    /// Bind `s` to a variable unless it is already a plain access.
    fn with_scrutinee(
        &mut self,
        s: LExpr,
        f: impl FnOnce(&mut Self, LExpr) -> Result<LExpr, CompileError>,
    ) -> Result<LExpr, CompileError> {
        match s {
            LExpr::Local(_) | LExpr::Env(_) | LExpr::Global(_) => f(self, s),
            _ => {
                let v = self.fresh();
                let body = f(self, LExpr::Local(v))?;
                Ok(LExpr::Let(v, Box::new(s), Box::new(body)))
            }
        }
    }

    fn cases(&mut self, scrutinee: LExpr, cases: &[Case], tail: bool, fail: Fail) -> Result<LExpr, CompileError> {
        if let Some(c) = cases.iter().find(|c| c.guard.is_some()) {
            return Err(CompileError::Unsupported { what: "`when` guard".into(), span: c.pat.span });
        }
        let arms: Vec<(&Pattern, Option<usize>)> = cases.iter().enumerate().map(|(i, c)| (&c.pat, Some(i))).collect();
        let mut body = |l: &mut Lowerer<'t>, i: usize| l.expr(&cases[i].body, tail);
        self.match_indexed(scrutinee, &arms, &mut body, fail)
    }

    /// Shallow match with a single shared arm body (used to destructure).
    fn match_arms(
        &mut self,
        scrutinee: LExpr,
        arms: &[(&Pattern, Option<usize>)],
        body: &mut ArmBody<'_, 't>,
        fail: Fail,
    ) -> Result<LExpr, CompileError> {
        let mut indexed = |l: &mut Lowerer<'t>, _: usize| body(l);
        self.match_indexed(scrutinee, arms, &mut indexed, fail)
    }

    fn fail_expr(&self, fail: Fail) -> LExpr {
        match fail {
            Fail::MatchFailure => {
                LExpr::Raise(Box::new(LExpr::MakeBlock(EXN_TAG, vec![LExpr::int(MATCH_FAILURE_ID)])))
            }
            Fail::Reraise(v) => LExpr::Raise(Box::new(LExpr::Local(v))),
        }
    }

    fn match_indexed(
        &mut self,
        scrutinee: LExpr,
        arms: &[(&Pattern, Option<usize>)],
        body: &mut dyn FnMut(&mut Lowerer<'t>, usize) -> Result<LExpr, CompileError>,
        fail: Fail,
    ) -> Result<LExpr, CompileError> {
        let mut classes = Vec::new();
        for (p, _) in arms {
            classes.push(classify(p)?);
        }
        let first_irrefutable = classes.iter().position(|c| matches!(c, Class::Irrefutable));
        let refutable = first_irrefutable.unwrap_or(arms.len());
        let default = match first_irrefutable {
            Some(k) => {
                let (p, i) = arms[k];
                self.bind_irrefutable(&scrutinee, p, &mut |l| body(l, i.unwrap_or(0)))?
            }
            None => self.fail_expr(fail),
        };
        if refutable == 0 {
            return Ok(default);
        }
        match &classes[0] {
            Class::Ctor(..) => self.ctor_switch(scrutinee, &arms[..refutable], &classes[..refutable], body, default),
            Class::Int(_) | Class::Str(_) => {
                let mut table = Vec::new();
                let mut chain = Vec::new();
                let small = classes[..refutable].iter().all(|c| matches!(c, Class::Int(n) if (0..256).contains(n)));
                for (k, c) in classes[..refutable].iter().enumerate() {
                    let lit = match c {
                        Class::Int(n) => ConstValue::Int(*n),
                        Class::Str(s) => ConstValue::Str(s.to_vec()),
                        _ => return Err(mixed(arms[k].0)),
                    };
                    if chain.iter().any(|(l, _)| *l == lit) {
                        continue;
                    }
                    let arm = body(self, arms[k].1.unwrap_or(0))?;
                    if small {
                        let ConstValue::Int(n) = lit else { unreachable!() };
                        table.push((n as u32, arm.clone()));
                    }
                    chain.push((lit, arm));
                }
                if small {
                    let size = table.iter().map(|(n, _)| n + 1).max().unwrap_or(0);
                    return Ok(LExpr::Switch(Box::new(Switch {
                        scrutinee,
                        consts: table,
                        blocks: Vec::new(),
                        const_size: size,
                        block_size: 0,
                        default,
                    })));
                }
                let mut out = default;
                for (lit, arm) in chain.into_iter().rev() {
                    let test = LExpr::Prim(PrimOp::Binary(Opcode::EQ), vec![scrutinee.clone(), LExpr::Const(lit)]);
                    out = LExpr::If(Box::new(test), Box::new(arm), Box::new(out));
                }
                Ok(out)
            }
            Class::Irrefutable => unreachable!(),
        }
    }

    fn ctor_switch(
        &mut self,
        scrutinee: LExpr,
        arms: &[(&Pattern, Option<usize>)],
        classes: &[Class<'_>],
        body: &mut dyn FnMut(&mut Lowerer<'t>, usize) -> Result<LExpr, CompileError>,
        default: LExpr,
    ) -> Result<LExpr, CompileError> {
        let Class::Ctor(first, _) = classes[0] else { unreachable!() };
        let exceptions = self.tables.is_exception(first);
        let mut consts: Vec<(u32, LExpr)> = Vec::new();
        let mut blocks: Vec<(u32, LExpr)> = Vec::new();
        let (mut const_size, mut block_size) = (0, 0);
        for (k, class) in classes.iter().enumerate() {
            let span = arms[k].0.span;
            let Class::Ctor(name, args) = class else {
                return Err(mixed(arms[k].0));
            };
            let (kind, tag, arity, offset) = if exceptions {
                let e = self
                    .tables
                    .exceptions
                    .get(*name)
                    .ok_or_else(|| CompileError::UnknownCtor { name: name.to_string(), span })?;
                const_size = const_size.max(e.id + 1);
                (CtorKind::Constant, e.id, e.arity, 1)
            } else {
                let c = self
                    .tables
                    .ctors
                    .get(*name)
                    .ok_or_else(|| CompileError::UnknownCtor { name: name.to_string(), span })?;
                const_size = c.constant_count;
                block_size = c.block_count;
                (c.kind, c.tag, c.arity, 0)
            };
            let table = if kind == CtorKind::Constant { &consts } else { &blocks };
            if table.iter().any(|(t, _)| *t == tag) {
                continue;
            }
            let fields = self.ctor_fields(name, arity, args, offset, &scrutinee, span)?;
            let index = arms[k].1.unwrap_or(0);
            let arm = self.bind_fields(fields, &mut |l| body(l, index))?;
            if kind == CtorKind::Constant {
                consts.push((tag, arm));
            } else {
                blocks.push((tag, arm));
            }
        }
        if exceptions {
            let id = LExpr::Field(Box::new(scrutinee), 0);
            return self.with_scrutinee(id, move |_, id| {
                Ok(LExpr::Switch(Box::new(Switch {
                    scrutinee: id,
                    consts,
                    blocks: Vec::new(),
                    const_size,
                    block_size: 0,
                    default,
                })))
            });
        }
        Ok(LExpr::Switch(Box::new(Switch { scrutinee, consts, blocks, const_size, block_size, default })))
    }

    /// Variables bound by a constructor pattern, with their accessors.
    fn ctor_fields(
        &self,
        name: &str,
        arity: usize,
        args: &[Pattern],
        offset: u32,
        scrutinee: &LExpr,
        span: Span,
    ) -> Result<Vec<(String, LExpr)>, CompileError> {
        let field = |i: u32| LExpr::Field(Box::new(scrutinee.clone()), i + offset);
        let accessors: Vec<LExpr> = if args.len() == arity {
            (0..arity as u32).map(field).collect()
        } else if arity == 1 && args.len() > 1 {
            (0..args.len() as u32).map(|i| LExpr::Field(Box::new(field(0)), i)).collect()
        } else if args.len() == 1 && arity > 1 && matches!(args[0].kind, PatternKind::Wildcard) {
            return Ok(Vec::new());
        } else {
            return Err(CompileError::CtorArityMismatch {
                name: name.to_string(),
                expected: arity,
                found: args.len(),
                span,
            });
        };
        let mut out = Vec::new();
        for (p, acc) in args.iter().zip(accessors) {
            match &p.kind {
                PatternKind::Var(v) => out.push((v.clone(), acc)),
                PatternKind::Wildcard => {}
                _ => return Err(CompileError::Unsupported { what: "nested pattern".into(), span: p.span }),
            }
        }
        Ok(out)
    }

    fn bind_fields(
        &mut self,
        fields: Vec<(String, LExpr)>,
        body: &mut ArmBody<'_, 't>,
    ) -> Result<LExpr, CompileError> {
        let mark = self.scope.len();
        let mut lets = Vec::new();
        for (name, acc) in fields {
            let v = self.bind_local(&name);
            lets.push((v, acc));
        }
        let inner = body(self);
        self.scope.truncate(mark);
        let mut out = inner?;
        for (v, acc) in lets.into_iter().rev() {
            out = LExpr::Let(v, Box::new(acc), Box::new(out));
        }
        Ok(out)
    }

    fn bind_irrefutable(
        &mut self,
        scrutinee: &LExpr,
        p: &Pattern,
        body: &mut ArmBody<'_, 't>,
    ) -> Result<LExpr, CompileError> {
        let fields = match &p.kind {
            PatternKind::Wildcard | PatternKind::Unit => Vec::new(),
            PatternKind::Var(name) => vec![(name.clone(), scrutinee.clone())],
            PatternKind::Tuple(items) => {
                let mut out = Vec::new();
                for (i, item) in items.iter().enumerate() {
                    let acc = LExpr::Field(Box::new(scrutinee.clone()), i as u32);
                    match &item.kind {
                        PatternKind::Var(v) => out.push((v.clone(), acc)),
                        PatternKind::Wildcard => {}
                        _ => return Err(CompileError::Unsupported { what: "nested pattern".into(), span: item.span }),
                    }
                }
                out
            }
            _ => unreachable!("refutable pattern"),
        };
        self.bind_fields(fields, body)
    }

    // ---- top level ----

    pub fn program(mut self, program: &Program) -> Result<LoweredProgram, CompileError> {
        let mut statements = Vec::new();
        for item in &program.items {
            let Item::Let { recursive, bindings, .. } = item else { continue };
            if *recursive {
                let mut slots = Vec::new();
                for b in bindings {
                    let name = b.name().ok_or(CompileError::BadRecursiveBinding { span: b.span })?;
                    let slot = self.new_global();
                    self.globals.insert(name.to_string(), slot);
                    slots.push(slot);
                }
                for (b, slot) in bindings.iter().zip(slots) {
                    let (params, cases, body) = Self::recursive_function(b)?;
                    let (spec, captures) = self.closure(params, cases, |l| l.expr(body, true))?;
                    statements.push(LExpr::SetGlobal(slot, Box::new(LExpr::Closure(Box::new(spec), captures))));
                }
                continue;
            }
            let mut pending = Vec::new();
            for b in bindings {
                let value = self.binding_value(b)?;
                match &b.pat.kind {
                    PatternKind::Var(name) => {
                        let slot = self.new_global();
                        statements.push(LExpr::SetGlobal(slot, Box::new(value)));
                        pending.push((name.clone(), slot));
                    }
                    PatternKind::Wildcard | PatternKind::Unit => statements.push(value),
                    _ => {
                        let names: Vec<String> = b.pat.vars().into_iter().map(String::from).collect();
                        let slots: Vec<u32> = names.iter().map(|_| self.new_global()).collect();
                        let tmp = self.fresh();
                        let mut assign = |l: &mut Lowerer<'t>| {
                            let mut out = LExpr::unit();
                            for (n, s) in names.iter().zip(&slots).rev() {
                                let v = l.lookup(n, b.span)?;
                                out = LExpr::Seq(Box::new(LExpr::SetGlobal(*s, Box::new(v))), Box::new(out));
                            }
                            Ok(out)
                        };
                        let m = self.match_arms(LExpr::Local(tmp), &[(&b.pat, None)], &mut assign, Fail::MatchFailure)?;
                        statements.push(LExpr::Let(tmp, Box::new(value), Box::new(m)));
                        pending.extend(b.pat.vars().into_iter().map(String::from).zip(slots));
                    }
                }
            }
            for (name, slot) in pending {
                self.globals.insert(name, slot);
            }
        }
        Ok(LoweredProgram {
            named_globals: self.next_global,
            exception_names: self.tables.exception_names.clone(),
            statements,
        })
    }
}

fn mixed(p: &Pattern) -> CompileError {
    CompileError::Unsupported { what: "mixed pattern kinds in one match".into(), span: p.span }
}

/// A block, or a pooled constant when every field is constant.
fn make_block(tag: u8, fields: Vec<LExpr>) -> LExpr {
    if fields.iter().all(|f| matches!(f, LExpr::Const(_))) {
        let fields = fields
            .into_iter()
            .map(|f| match f {
                LExpr::Const(c) => c,
                _ => unreachable!(),
            })
            .collect();
        return LExpr::Const(ConstValue::Block { tag, fields });
    }
    LExpr::MakeBlock(tag, fields)
}

pub fn lower(program: &Program, tables: &SymbolTables) -> Result<LoweredProgram, CompileError> {
    Lowerer::new(tables).program(program)
}

/// Every `TailApply` is in tail position (checked structurally).
pub fn tail_calls_well_placed(program: &LoweredProgram) -> bool {
    fn check(e: &LExpr, tail: bool) -> bool {
        use LExpr::*;
        match e {
            Const(_) | Local(_) | Env(_) | OffsetClosure(_) | Global(_) => true,
            SetGlobal(_, x) | Field(x, _) | Raise(x) => check(x, false),
            MakeBlock(_, xs) | Prim(_, xs) => xs.iter().all(|x| check(x, false)),
            SetField(a, _, b) => check(a, false) && check(b, false),
            Apply(f, xs) => check(f, false) && xs.iter().all(|x| check(x, false)),
            TailApply(f, xs) => tail && check(f, false) && xs.iter().all(|x| check(x, false)),
            If(c, t, f) => check(c, false) && check(t, tail) && check(f, tail),
            Switch(s) => {
                check(&s.scrutinee, false)
                    && s.consts.iter().chain(&s.blocks).all(|(_, a)| check(a, tail))
                    && check(&s.default, tail)
            }
            Let(_, r, b) => check(r, false) && check(b, tail),
            LetRec { funcs, captures, body, .. } => {
                funcs.iter().all(|f| check(&f.body, true)) && captures.iter().all(|c| check(c, false)) && check(body, tail)
            }
            Closure(spec, captures) => check(&spec.body, true) && captures.iter().all(|c| check(c, false)),
            Seq(a, b) => check(a, false) && check(b, tail),
            Trap { body, handler, .. } => check(body, false) && check(handler, tail),
        }
    }
    program.statements.iter().all(|s| check(s, false))
}
