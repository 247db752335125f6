//! Second pass: direct bytecode emission with label backpatching and
//! static stack-depth tracking.

use std::collections::{HashMap, VecDeque};

use crate::bytecode::{BytecodeImage, ConstValue, Opcode};
use crate::vm::Prim;

use super::lower::{ClosureSpec, LExpr, LoweredProgram, PrimOp, VarId};
use super::CompileError;

type Label = usize;

enum LabelState {
    Resolved(usize),
    Pending(Vec<usize>),
}

struct PendingFn<'a> {
    label: Label,
    spec: &'a ClosureSpec,
}

pub struct EmitState<'a> {
    out: Vec<u32>,
    stacksize: usize,
    labels: Vec<LabelState>,
    var_pos: HashMap<VarId, usize>,
    /// Set after an unconditional transfer; cleared when a label is placed.
    dead: bool,
    prims: Vec<Prim>,
    consts: Vec<(u32, ConstValue)>,
    next_global: u32,
    queue: VecDeque<PendingFn<'a>>,
}

impl<'a> EmitState<'a> {
    fn new(next_global: u32) -> Self {
        EmitState {
            out: Vec::new(),
            stacksize: 0,
            labels: Vec::new(),
            var_pos: HashMap::new(),
            dead: false,
            prims: Vec::new(),
            consts: Vec::new(),
            next_global,
            queue: VecDeque::new(),
        }
    }

    fn op(&mut self, op: Opcode, operands: &[u32]) {
        self.out.push(op.code());
        self.out.extend_from_slice(operands);
        if matches!(op, Opcode::BRANCH | Opcode::RETURN | Opcode::APPTERM | Opcode::RAISE | Opcode::HALT) {
            self.dead = true;
        }
    }

    fn new_label(&mut self) -> Label {
        self.labels.push(LabelState::Pending(Vec::new()));
        self.labels.len() - 1
    }

    fn labref(&mut self, label: Label) {
        let site = self.out.len();
        match &mut self.labels[label] {
            LabelState::Resolved(at) => self.out.push(*at as u32),
            LabelState::Pending(sites) => {
                sites.push(site);
                self.out.push(u32::MAX);
            }
        }
    }

    fn place(&mut self, label: Label) {
        let here = self.out.len();
        if let LabelState::Pending(sites) = std::mem::replace(&mut self.labels[label], LabelState::Resolved(here)) {
            for s in sites {
                self.out[s] = here as u32;
            }
        }
        self.dead = false;
    }

    fn push(&mut self) {
        self.op(Opcode::PUSH, &[]);
        self.stacksize += 1;
    }

    fn pop_n(&mut self, n: usize) -> Result<(), CompileError> {
        if n > self.stacksize {
            return Err(CompileError::Internal("stack size went negative".into()));
        }
        if n > 0 {
            self.op(Opcode::POP, &[n as u32]);
        }
        self.stacksize -= n;
        Ok(())
    }

    fn prim_index(&mut self, p: Prim) -> u32 {
        match self.prims.iter().position(|q| *q == p) {
            Some(i) => i as u32,
            None => {
                self.prims.push(p);
                self.prims.len() as u32 - 1
            }
        }
    }

    fn constant(&mut self, c: &ConstValue) {
        match c {
            ConstValue::Int(n) if i32::try_from(*n).is_ok() => self.op(Opcode::CONSTINT, &[*n as i32 as u32]),
            _ => {
                let slot = self.next_global;
                self.next_global += 1;
                self.consts.push((slot, c.clone()));
                self.op(Opcode::GETGLOBAL, &[slot]);
            }
        }
    }

    fn local(&self, v: VarId) -> Result<u32, CompileError> {
        let pos = self.var_pos.get(&v).ok_or_else(|| CompileError::Internal(format!("unplaced variable {v}")))?;
        Ok((self.stacksize - 1 - pos) as u32)
    }

    fn ret(&mut self, tail: bool) {
        if tail {
            let n = self.stacksize as u32;
            self.op(Opcode::RETURN, &[n]);
        }
    }

    /// Evaluate `args` right to left, pushing each, so `args[0]` ends on top.
    fn push_args(&mut self, args: &'a [LExpr]) -> Result<(), CompileError> {
        for a in args.iter().rev() {
            self.expr(a, false)?;
            self.push();
        }
        Ok(())
    }

    /// Like `push_args`, except `args[0]` is left in the accumulator.
    fn acc_args(&mut self, args: &'a [LExpr]) -> Result<(), CompileError> {
        if let Some((first, rest)) = args.split_first() {
            self.push_args(rest)?;
            self.expr(first, false)?;
        }
        Ok(())
    }

    fn release(&mut self, n: usize) -> Result<(), CompileError> {
        self.stacksize = self
            .stacksize
            .checked_sub(n)
            .ok_or_else(|| CompileError::Internal("stack size went negative".into()))?;
        Ok(())
    }

    fn expr(&mut self, e: &'a LExpr, tail: bool) -> Result<(), CompileError> {
        match e {
            LExpr::Const(c) => {
                self.constant(c);
                self.ret(tail);
            }
            LExpr::Local(v) => {
                let n = self.local(*v)?;
                self.op(Opcode::ACC, &[n]);
                self.ret(tail);
            }
            LExpr::Env(i) => {
                self.op(Opcode::ENVACC, &[*i]);
                self.ret(tail);
            }
            LExpr::OffsetClosure(j) => {
                self.op(Opcode::OFFSETCLOSURE, &[*j]);
                self.ret(tail);
            }
            LExpr::Global(s) => {
                self.op(Opcode::GETGLOBAL, &[*s]);
                self.ret(tail);
            }
            LExpr::SetGlobal(s, v) => {
                self.expr(v, false)?;
                self.op(Opcode::SETGLOBAL, &[*s]);
                self.ret(tail);
            }
            LExpr::MakeBlock(tag, fields) => {
                self.acc_args(fields)?;
                self.op(Opcode::MAKEBLOCK, &[*tag as u32, fields.len() as u32]);
                self.release(fields.len().saturating_sub(1))?;
                self.ret(tail);
            }
            LExpr::Field(r, i) => {
                self.expr(r, false)?;
                self.op(Opcode::GETFIELD, &[*i]);
                self.ret(tail);
            }
            LExpr::SetField(r, i, v) => {
                self.expr(v, false)?;
                self.push();
                self.expr(r, false)?;
                self.op(Opcode::SETFIELD, &[*i]);
                self.release(1)?;
                self.ret(tail);
            }
            LExpr::Apply(f, args) => {
                self.push_args(args)?;
                self.expr(f, false)?;
                self.op(Opcode::APPLY, &[args.len() as u32]);
                self.release(args.len())?;
                self.ret(tail);
            }
            LExpr::TailApply(f, args) => {
                if !tail {
                    return Err(CompileError::Internal("tail call outside tail position".into()));
                }
                let depth = self.stacksize;
                self.push_args(args)?;
                self.expr(f, false)?;
                let n = args.len() as u32;
                self.op(Opcode::APPTERM, &[n, depth as u32 + n]);
                self.release(args.len())?;
            }
            LExpr::Prim(op, args) => {
                match op {
                    PrimOp::Ccall(p) => {
                        self.acc_args(args)?;
                        let index = self.prim_index(*p);
                        self.op(Opcode::CCALL, &[index, args.len() as u32]);
                    }
                    PrimOp::Binary(code) | PrimOp::Unary(code) => {
                        self.acc_args(args)?;
                        self.op(*code, &[]);
                    }
                }
                self.release(args.len().saturating_sub(1))?;
                self.ret(tail);
            }
            LExpr::If(c, t, f) => {
                let (l_else, l_join) = (self.new_label(), self.new_label());
                self.expr(c, false)?;
                self.op(Opcode::BRANCHIFNOT, &[]);
                self.labref(l_else);
                self.expr(t, tail)?;
                if !tail && !self.dead {
                    self.op(Opcode::BRANCH, &[]);
                    self.labref(l_join);
                }
                self.place(l_else);
                self.expr(f, tail)?;
                self.place(l_join);
                if tail {
                    self.dead = true;
                }
            }
            LExpr::Switch(s) => {
                let l_join = self.new_label();
                let l_default = self.new_label();
                let mut arm_labels: Vec<(Label, &'a LExpr)> = Vec::new();
                let mut table = |state: &mut Self, arms: &'a [(u32, LExpr)], size: u32, op: Opcode| {
                    let mut slots = vec![l_default; size as usize];
                    for (tag, arm) in arms {
                        let l = state.new_label();
                        slots[*tag as usize] = l;
                        arm_labels.push((l, arm));
                    }
                    state.op(op, &[size]);
                    for l in slots {
                        state.labref(l);
                    }
                    state.op(Opcode::BRANCH, &[]);
                    state.labref(l_default);
                };
                self.expr(&s.scrutinee, false)?;
                match (s.const_size == 0, s.block_size == 0) {
                    (false, true) | (true, true) => table(self, &s.consts, s.const_size, Opcode::SWITCHINT),
                    (true, false) => table(self, &s.blocks, s.block_size, Opcode::SWITCHTAG),
                    (false, false) => {
                        let l_blocks = self.new_label();
                        self.op(Opcode::ISINT, &[]);
                        self.op(Opcode::BRANCHIFNOT, &[]);
                        self.labref(l_blocks);
                        self.expr(&s.scrutinee, false)?;
                        table(self, &s.consts, s.const_size, Opcode::SWITCHINT);
                        self.place(l_blocks);
                        self.expr(&s.scrutinee, false)?;
                        table(self, &s.blocks, s.block_size, Opcode::SWITCHTAG);
                    }
                }
                for (l, arm) in arm_labels {
                    self.place(l);
                    self.expr(arm, tail)?;
                    if !tail && !self.dead {
                        self.op(Opcode::BRANCH, &[]);
                        self.labref(l_join);
                    }
                }
                self.place(l_default);
                self.expr(&s.default, tail)?;
                self.place(l_join);
                if tail {
                    self.dead = true;
                }
            }
            LExpr::Let(v, rhs, body) => {
                self.expr(rhs, false)?;
                self.push();
                self.var_pos.insert(*v, self.stacksize - 1);
                self.expr(body, tail)?;
                if tail {
                    self.release(1)?;
                } else {
                    self.pop_n(1)?;
                }
            }
            LExpr::LetRec { vars, funcs, captures, body } => {
                self.acc_args(captures)?;
                self.release(captures.len().saturating_sub(1))?;
                let labels: Vec<Label> = funcs.iter().map(|_| self.new_label()).collect();
                self.op(Opcode::CLOSUREREC, &[funcs.len() as u32, captures.len() as u32]);
                for (f, l) in funcs.iter().zip(&labels) {
                    self.out.push(f.arity);
                    self.labref(*l);
                    self.queue.push_back(PendingFn { label: *l, spec: f });
                }
                for v in vars {
                    self.var_pos.insert(*v, self.stacksize);
                    self.stacksize += 1;
                }
                self.expr(body, tail)?;
                if tail {
                    self.release(vars.len())?;
                } else {
                    self.pop_n(vars.len())?;
                }
            }
            LExpr::Closure(spec, captures) => {
                self.acc_args(captures)?;
                self.release(captures.len().saturating_sub(1))?;
                let l = self.new_label();
                self.op(Opcode::CLOSURE, &[spec.arity, captures.len() as u32]);
                self.labref(l);
                self.queue.push_back(PendingFn { label: l, spec });
                self.ret(tail);
            }
            LExpr::Seq(a, b) => {
                self.expr(a, false)?;
                self.expr(b, tail)?;
            }
            LExpr::Trap { body, exn, handler } => {
                let (l_handler, l_join) = (self.new_label(), self.new_label());
                self.op(Opcode::PUSHTRAP, &[]);
                self.labref(l_handler);
                self.expr(body, false)?;
                self.op(Opcode::POPTRAP, &[]);
                if tail {
                    self.ret(true);
                } else {
                    self.op(Opcode::BRANCH, &[]);
                    self.labref(l_join);
                }
                self.place(l_handler);
                self.push();
                self.var_pos.insert(*exn, self.stacksize - 1);
                self.expr(handler, tail)?;
                if tail {
                    self.release(1)?;
                } else {
                    self.pop_n(1)?;
                }
                self.place(l_join);
                if tail {
                    self.dead = true;
                }
            }
            LExpr::Raise(x) => {
                self.expr(x, false)?;
                self.op(Opcode::RAISE, &[]);
            }
        }
        Ok(())
    }

    fn function(&mut self, f: PendingFn<'a>) -> Result<(), CompileError> {
        self.place(f.label);
        self.stacksize = f.spec.arity as usize;
        for (i, p) in f.spec.params.iter().enumerate() {
            self.var_pos.insert(*p, f.spec.arity as usize - 1 - i);
        }
        self.expr(&f.spec.body, true)
    }
}

pub fn emit(program: &LoweredProgram) -> Result<BytecodeImage, CompileError> {
    let mut st = EmitState::new(program.named_globals);
    let names = program.exception_names.iter().map(|n| ConstValue::Str(n.as_bytes().to_vec())).collect();
    st.consts.push((0, ConstValue::Block { tag: 0, fields: names }));
    for s in &program.statements {
        st.expr(s, false)?;
        if st.stacksize != 0 {
            return Err(CompileError::Internal(format!("stack size {} at top-level boundary", st.stacksize)));
        }
    }
    st.op(Opcode::CONSTINT, &[0]);
    st.op(Opcode::HALT, &[]);
    while let Some(f) = st.queue.pop_front() {
        st.function(f)?;
    }
    if st.labels.iter().any(|l| matches!(l, LabelState::Pending(sites) if !sites.is_empty())) {
        return Err(CompileError::Internal("unresolved label".into()));
    }
    Ok(BytecodeImage {
        global_count: st.next_global,
        code: st.out,
        prims: st.prims.iter().map(|p| p.name().to_string()).collect(),
        consts: st.consts,
    })
}
