//! Bytecode interpreter: an accumulator machine with a value stack, a
//! separate frame stack, a trap stack for exceptions and a fixed table of
//! named primitives.
//!
//! Calling convention: arguments are pushed so that the first argument
//! ends up on top; the callee sees argument `i` at `ACC i` on entry. An
//! application of `k` arguments to a closure of arity `n` enters when
//! `k = n`, builds a [`Value::Partial`] when `k < n`, and when `k > n`
//! enters with the first `n` and applies the result to the rest on return.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::rc::Rc;

use thiserror::Error;

use crate::bytecode::{BytecodeImage, ConstValue, Opcode};

/// Tag of exception values: field 0 is the exception id, fields 1.. the payload.
pub const EXN_TAG: u8 = 250;
/// Tag of buffer blocks: field 0 is the accumulated string.
pub const BUFFER_TAG: u8 = 251;
/// Exception id raised by file primitives.
pub const SYS_ERROR_ID: i64 = 1;
/// Exception id raised on match fall-through.
pub const MATCH_FAILURE_ID: i64 = 0;

pub const EXIT_UNCAUGHT: i32 = 2;
pub const EXIT_FAULT: i32 = 125;

#[derive(Clone)]
pub enum Value {
    Int(i64),
    Block(Rc<Block>),
    Str(Rc<RefCell<Vec<u8>>>),
    Closure(Rc<ClosureGroup>, u32),
    Partial(Rc<Partial>),
}

pub struct Block {
    pub tag: u8,
    pub fields: RefCell<Vec<Value>>,
}

/// Closures created together by one CLOSURE/CLOSUREREC share their
/// environment; a closure is a group plus the index of its function.
pub struct ClosureGroup {
    pub funcs: Vec<(u32, u32)>,
    pub env: Vec<Value>,
}

pub struct Partial {
    pub group: Rc<ClosureGroup>,
    pub index: u32,
    pub got: Vec<Value>,
}

impl Drop for Block {
    fn drop(&mut self) {
        // Long lists would otherwise recurse once per cell.
        let mut pending = std::mem::take(self.fields.get_mut());
        while let Some(v) = pending.pop() {
            if let Value::Block(rc) = v {
                if let Ok(mut block) = Rc::try_unwrap(rc) {
                    pending.append(block.fields.get_mut());
                }
            }
        }
    }
}

impl Value {
    pub const UNIT: Value = Value::Int(0);

    pub fn bool(b: bool) -> Value {
        Value::Int(b as i64)
    }

    pub fn str(bytes: impl Into<Vec<u8>>) -> Value {
        Value::Str(Rc::new(RefCell::new(bytes.into())))
    }

    pub fn block(tag: u8, fields: Vec<Value>) -> Value {
        Value::Block(Rc::new(Block { tag, fields: RefCell::new(fields) }))
    }

    pub fn list(items: Vec<Value>) -> Value {
        items.into_iter().rev().fold(Value::Int(0), |tail, head| Value::block(0, vec![head, tail]))
    }

    pub fn exception(id: i64, payload: Vec<Value>) -> Value {
        let mut fields = vec![Value::Int(id)];
        fields.extend(payload);
        Value::block(EXN_TAG, fields)
    }

    pub fn from_const(c: &ConstValue) -> Value {
        match c {
            ConstValue::Int(n) => Value::Int(*n),
            ConstValue::Str(s) => Value::str(s.clone()),
            ConstValue::Block { tag, fields } => {
                Value::block(*tag, fields.iter().map(Value::from_const).collect())
            }
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<Vec<u8>> {
        match self {
            Value::Str(s) => Some(s.borrow().clone()),
            _ => None,
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Str(s) => write!(f, "{:?}", String::from_utf8_lossy(&s.borrow())),
            Value::Block(b) => {
                write!(f, "[{}:", b.tag)?;
                for (i, v) in b.fields.borrow().iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, " {v:?}")?;
                }
                write!(f, "]")
            }
            Value::Closure(g, i) => write!(f, "<closure @{}>", g.funcs[*i as usize].0),
            Value::Partial(p) => write!(f, "<partial {}/{}>", p.got.len(), p.group.funcs[p.index as usize].1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    FieldOfNonBlock,
    ApplyOfNonFunction,
    StackUnderflow,
    UninitializedGlobal,
    BadPrimitive,
    NotAnInteger,
    DivisionByZero,
    IndexOutOfBounds,
    BadInstruction,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("VM fault: {kind:?} at pc {pc}")]
pub struct VmFault {
    pub kind: FaultKind,
    pub pc: usize,
}

/// I/O seen by a running program.
pub trait Ports {
    fn stdout(&mut self, bytes: &[u8]);
    fn stderr(&mut self, bytes: &[u8]);
    fn read_file(&mut self, path: &str) -> Result<Vec<u8>, String>;
    fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), String>;
}

/// Where file primitives resolve paths.
#[derive(Clone, Debug)]
pub enum FileSystem {
    /// The real filesystem; relative paths are resolved against `base` when set.
    Real { base: Option<PathBuf> },
    Memory(BTreeMap<String, Vec<u8>>),
}

impl FileSystem {
    fn resolve(base: &Option<PathBuf>, path: &str) -> PathBuf {
        match base {
            Some(dir) => dir.join(path),
            None => PathBuf::from(path),
        }
    }

    pub fn read(&mut self, path: &str) -> Result<Vec<u8>, String> {
        match self {
            FileSystem::Real { base } => std::fs::read(Self::resolve(base, path))
                .map_err(|e| format!("{path}: {}", io_message(&e))),
            FileSystem::Memory(files) => {
                files.get(path).cloned().ok_or_else(|| format!("{path}: No such file or directory"))
            }
        }
    }

    pub fn write(&mut self, path: &str, data: &[u8]) -> Result<(), String> {
        match self {
            FileSystem::Real { base } => std::fs::write(Self::resolve(base, path), data)
                .map_err(|e| format!("{path}: {}", io_message(&e))),
            FileSystem::Memory(files) => {
                files.insert(path.to_string(), data.to_vec());
                Ok(())
            }
        }
    }
}

fn io_message(e: &std::io::Error) -> String {
    match e.kind() {
        std::io::ErrorKind::NotFound => "No such file or directory".into(),
        std::io::ErrorKind::PermissionDenied => "Permission denied".into(),
        _ => "I/O error".into(),
    }
}

/// Process stdio plus the real filesystem.
pub struct StdPorts {
    out: std::io::BufWriter<std::io::Stdout>,
    fs: FileSystem,
}

impl StdPorts {
    pub fn new() -> Self {
        StdPorts { out: std::io::BufWriter::new(std::io::stdout()), fs: FileSystem::Real { base: None } }
    }
}

impl Default for StdPorts {
    fn default() -> Self {
        Self::new()
    }
}

impl Ports for StdPorts {
    fn stdout(&mut self, bytes: &[u8]) {
        let _ = self.out.write_all(bytes);
    }
    fn stderr(&mut self, bytes: &[u8]) {
        let _ = self.out.flush();
        let _ = std::io::stderr().write_all(bytes);
    }
    fn read_file(&mut self, path: &str) -> Result<Vec<u8>, String> {
        self.fs.read(path)
    }
    fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), String> {
        self.fs.write(path, data)
    }
}

impl Drop for StdPorts {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Captures standard output and error in memory.
#[derive(Clone, Debug)]
pub struct CapturePorts {
    pub out: Vec<u8>,
    pub err: Vec<u8>,
    pub fs: FileSystem,
}

impl CapturePorts {
    pub fn new(fs: FileSystem) -> Self {
        CapturePorts { out: Vec::new(), err: Vec::new(), fs }
    }

    pub fn real() -> Self {
        Self::new(FileSystem::Real { base: None })
    }

    pub fn memory() -> Self {
        Self::new(FileSystem::Memory(BTreeMap::new()))
    }
}

impl Ports for CapturePorts {
    fn stdout(&mut self, bytes: &[u8]) {
        self.out.extend_from_slice(bytes);
    }
    fn stderr(&mut self, bytes: &[u8]) {
        self.err.extend_from_slice(bytes);
    }
    fn read_file(&mut self, path: &str) -> Result<Vec<u8>, String> {
        self.fs.read(path)
    }
    fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), String> {
        self.fs.write(path, data)
    }
}

macro_rules! primitives {
    ($( $variant:ident = $name:literal / $arity:expr; )*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum Prim {
            $( $variant, )*
        }

        impl Prim {
            pub const ALL: &'static [Prim] = &[$( Prim::$variant, )*];

            pub fn name(self) -> &'static str {
                match self {
                    $( Prim::$variant => $name, )*
                }
            }

            pub fn arity(self) -> usize {
                match self {
                    $( Prim::$variant => $arity, )*
                }
            }

            pub fn from_name(name: &str) -> Option<Prim> {
                match name {
                    $( $name => Some(Prim::$variant), )*
                    _ => None,
                }
            }
        }
    };
}

primitives! {
    PrintString = "print_string" / 1;
    PrintInt = "print_int" / 1;
    PrintError = "print_error" / 1;
    ReadFile = "read_file" / 1;
    WriteFile = "write_file" / 2;
    SysArgv = "sys_argv" / 1;
    Exit = "exit" / 1;
    Compare = "compare" / 2;
    StringLength = "string_length" / 1;
    StringGet = "string_get" / 2;
    StringSet = "string_set" / 3;
    StringSub = "string_sub" / 3;
    StringConcat = "string_concat" / 2;
    StringOfInt = "string_of_int" / 1;
    IntOfString = "int_of_string" / 1;
    StringMake = "string_make" / 2;
    BufferCreate = "buffer_create" / 1;
    BufferAddChar = "buffer_add_char" / 2;
    BufferAddString = "buffer_add_string" / 2;
    BufferContents = "buffer_contents" / 1;
}

/// Result of a primitive: a value, a language exception, or termination.
pub enum PrimOutcome {
    Value(Value),
    Raise(Value),
    Exit(i32),
}

/// Total structural order: Int < Str < Block; blocks by tag, then fields
/// lexicographically, then arity. Functional values fault.
pub fn compare_values(a: &Value, b: &Value) -> Result<Ordering, FaultKind> {
    enum Work {
        Pair(Value, Value),
        Len(usize, usize),
    }
    fn rank(v: &Value) -> Result<u8, FaultKind> {
        match v {
            Value::Int(_) => Ok(0),
            Value::Str(_) => Ok(1),
            Value::Block(_) => Ok(2),
            _ => Err(FaultKind::BadPrimitive),
        }
    }
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => return Ok(x.cmp(y)),
        (Value::Str(x), Value::Str(y)) => return Ok(x.borrow().as_slice().cmp(y.borrow().as_slice())),
        _ => {}
    }
    let mut work = vec![Work::Pair(a.clone(), b.clone())];
    while let Some(item) = work.pop() {
        let (x, y) = match item {
            Work::Len(n, m) => {
                if n != m {
                    return Ok(n.cmp(&m));
                }
                continue;
            }
            Work::Pair(x, y) => (x, y),
        };
        let ord = match (&x, &y) {
            (Value::Int(p), Value::Int(q)) => p.cmp(q),
            (Value::Str(p), Value::Str(q)) => p.borrow().as_slice().cmp(q.borrow().as_slice()),
            (Value::Block(p), Value::Block(q)) => {
                if p.tag != q.tag {
                    p.tag.cmp(&q.tag)
                } else {
                    let pf = p.fields.borrow();
                    let qf = q.fields.borrow();
                    work.push(Work::Len(pf.len(), qf.len()));
                    for (u, v) in pf.iter().zip(qf.iter()).rev() {
                        work.push(Work::Pair(u.clone(), v.clone()));
                    }
                    Ordering::Equal
                }
            }
            _ => rank(&x)?.cmp(&rank(&y)?),
        };
        if ord != Ordering::Equal {
            return Ok(ord);
        }
    }
    Ok(Ordering::Equal)
}

/// Quoted rendering used for string payloads of uncaught exceptions.
pub fn quote_string(bytes: &[u8]) -> String {
    let mut out = String::from("\"");
    for &b in bytes {
        match b {
            b'"' => out.push_str("\\\""),
            b'\\' => out.push_str("\\\\"),
            b'\n' => out.push_str("\\n"),
            b'\t' => out.push_str("\\t"),
            b'\r' => out.push_str("\\r"),
            32..=126 => out.push(b as char),
            _ => out.push_str(&format!("\\{b:03}")),
        }
    }
    out.push('"');
    out
}

/// `Fatal error: exception <Name>[(<args>)]`, with argument values
/// rendered as integers, quoted strings, or `_`.
pub fn render_exception(names: Option<&Value>, exn: &Value) -> String {
    let Value::Block(b) = exn else {
        return "_".into();
    };
    let fields = b.fields.borrow();
    let id = match (b.tag, fields.first()) {
        (EXN_TAG, Some(Value::Int(id))) => *id,
        _ => return "_".into(),
    };
    let name = match names {
        Some(Value::Block(table)) => match table.fields.borrow().get(id as usize) {
            Some(Value::Str(s)) => String::from_utf8_lossy(&s.borrow()).into_owned(),
            _ => format!("Exception#{id}"),
        },
        _ => format!("Exception#{id}"),
    };
    if fields.len() == 1 {
        return name;
    }
    let args: Vec<String> = fields[1..]
        .iter()
        .map(|v| match v {
            Value::Int(n) => n.to_string(),
            Value::Str(s) => quote_string(&s.borrow()),
            _ => "_".into(),
        })
        .collect();
    format!("{name}({})", args.join(", "))
}

pub fn call_primitive(
    prim: Prim,
    args: &[Value],
    argv: &[String],
    ports: &mut dyn Ports,
) -> Result<PrimOutcome, FaultKind> {
    use PrimOutcome::Value as V;
    if args.len() != prim.arity() {
        return Err(FaultKind::BadPrimitive);
    }
    let int = |i: usize| args[i].as_int().ok_or(FaultKind::NotAnInteger);
    let string = |i: usize| match &args[i] {
        Value::Str(s) => Ok(s.clone()),
        _ => Err(FaultKind::BadPrimitive),
    };
    let buffer = |i: usize| match &args[i] {
        Value::Block(b) if b.tag == BUFFER_TAG => match b.fields.borrow().first() {
            Some(Value::Str(s)) => Ok(s.clone()),
            _ => Err(FaultKind::BadPrimitive),
        },
        _ => Err(FaultKind::BadPrimitive),
    };
    let sys_error = |msg: String| PrimOutcome::Raise(Value::exception(SYS_ERROR_ID, vec![Value::str(msg)]));
    let byte = |n: i64| if (0..256).contains(&n) { Ok(n as u8) } else { Err(FaultKind::IndexOutOfBounds) };
    Ok(match prim {
        Prim::PrintString => {
            ports.stdout(&string(0)?.borrow());
            V(Value::UNIT)
        }
        Prim::PrintInt => {
            ports.stdout(int(0)?.to_string().as_bytes());
            V(Value::UNIT)
        }
        Prim::PrintError => {
            ports.stderr(&string(0)?.borrow());
            V(Value::UNIT)
        }
        Prim::ReadFile => {
            let path = String::from_utf8_lossy(&string(0)?.borrow()).into_owned();
            match ports.read_file(&path) {
                Ok(bytes) => V(Value::str(bytes)),
                Err(msg) => sys_error(msg),
            }
        }
        Prim::WriteFile => {
            let path = String::from_utf8_lossy(&string(0)?.borrow()).into_owned();
            let data = string(1)?;
            let result = ports.write_file(&path, &data.borrow());
            match result {
                Ok(()) => V(Value::UNIT),
                Err(msg) => sys_error(msg),
            }
        }
        Prim::SysArgv => V(Value::list(argv.iter().map(|a| Value::str(a.as_bytes())).collect())),
        Prim::Exit => PrimOutcome::Exit(int(0)? as i32),
        Prim::Compare => V(Value::Int(match compare_values(&args[0], &args[1])? {
            Ordering::Less => -1,
            Ordering::Equal => 0,
            Ordering::Greater => 1,
        })),
        Prim::StringLength => V(Value::Int(string(0)?.borrow().len() as i64)),
        Prim::StringGet => {
            let s = string(0)?;
            let i = int(1)?;
            let s = s.borrow();
            if i < 0 || i as usize >= s.len() {
                return Err(FaultKind::IndexOutOfBounds);
            }
            V(Value::Int(s[i as usize] as i64))
        }
        Prim::StringSet => {
            let s = string(0)?;
            let i = int(1)?;
            let c = byte(int(2)?)?;
            let mut s = s.borrow_mut();
            if i < 0 || i as usize >= s.len() {
                return Err(FaultKind::IndexOutOfBounds);
            }
            s[i as usize] = c;
            V(Value::UNIT)
        }
        Prim::StringSub => {
            let s = string(0)?;
            let (pos, len) = (int(1)?, int(2)?);
            let s = s.borrow();
            if pos < 0 || len < 0 || (pos + len) as usize > s.len() {
                return Err(FaultKind::IndexOutOfBounds);
            }
            V(Value::str(&s[pos as usize..(pos + len) as usize]))
        }
        Prim::StringConcat => {
            let (a, b) = (string(0)?, string(1)?);
            let mut out = a.borrow().clone();
            out.extend_from_slice(&b.borrow());
            V(Value::str(out))
        }
        Prim::StringOfInt => V(Value::str(int(0)?.to_string())),
        Prim::IntOfString => {
            let s = string(0)?;
            let text = String::from_utf8_lossy(&s.borrow()).into_owned();
            V(Value::Int(text.parse::<i64>().map_err(|_| FaultKind::BadPrimitive)?))
        }
        Prim::StringMake => {
            let n = int(0)?;
            let c = byte(int(1)?)?;
            if n < 0 {
                return Err(FaultKind::IndexOutOfBounds);
            }
            V(Value::str(vec![c; n as usize]))
        }
        Prim::BufferCreate => V(Value::block(BUFFER_TAG, vec![Value::str(Vec::new())])),
        Prim::BufferAddChar => {
            let b = buffer(0)?;
            let c = byte(int(1)?)?;
            b.borrow_mut().push(c);
            V(Value::UNIT)
        }
        Prim::BufferAddString => {
            let b = buffer(0)?;
            let s = string(1)?;
            if Rc::ptr_eq(&b, &s) {
                let copy = s.borrow().clone();
                b.borrow_mut().extend_from_slice(&copy);
            } else {
                b.borrow_mut().extend_from_slice(&s.borrow());
            }
            V(Value::UNIT)
        }
        Prim::BufferContents => V(Value::str(buffer(0)?.borrow().clone())),
    })
}

#[derive(Clone)]
pub struct Frame {
    pub return_pc: usize,
    pub saved_env: Option<(Rc<ClosureGroup>, u32)>,
    pub stack_base: usize,
    pub pending: Vec<Value>,
}

#[derive(Clone)]
pub struct TrapFrame {
    pub handler_pc: usize,
    pub stack_depth: usize,
    pub frame_depth: usize,
    pub saved_env: Option<(Rc<ClosureGroup>, u32)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Continue,
    Halted(i32),
}

/// How a run ended, for harness consumers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Termination {
    Halted(i32),
    Exited(i32),
    Uncaught(String),
    Fault(VmFault),
}

impl Termination {
    pub fn status(&self) -> i32 {
        match self {
            Termination::Halted(s) | Termination::Exited(s) => *s,
            Termination::Uncaught(_) => EXIT_UNCAUGHT,
            Termination::Fault(_) => EXIT_FAULT,
        }
    }
}

pub struct Machine<'p> {
    code: Vec<u32>,
    prims: Vec<Prim>,
    pub acc: Value,
    pub pc: usize,
    pub env: Option<(Rc<ClosureGroup>, u32)>,
    pub stack: Vec<Value>,
    pub frames: Vec<Frame>,
    pub traps: Vec<TrapFrame>,
    pub globals: Vec<Option<Value>>,
    argv: Vec<String>,
    ports: &'p mut dyn Ports,
    pub steps: u64,
    pub max_frames: usize,
    /// Set when the program terminated through a path other than HALT.
    pub termination: Option<Termination>,
}

impl<'p> Machine<'p> {
    pub fn new(image: &BytecodeImage, argv: Vec<String>, ports: &'p mut dyn Ports) -> Result<Self, VmFault> {
        let mut prims = Vec::with_capacity(image.prims.len());
        for name in &image.prims {
            prims.push(Prim::from_name(name).ok_or(VmFault { kind: FaultKind::BadPrimitive, pc: 0 })?);
        }
        let mut globals = vec![None; image.global_count as usize];
        for (slot, value) in &image.consts {
            let slot = globals
                .get_mut(*slot as usize)
                .ok_or(VmFault { kind: FaultKind::UninitializedGlobal, pc: 0 })?;
            *slot = Some(Value::from_const(value));
        }
        Ok(Machine {
            code: image.code.clone(),
            prims,
            acc: Value::UNIT,
            pc: 0,
            env: None,
            stack: Vec::with_capacity(1024),
            frames: Vec::with_capacity(256),
            traps: Vec::new(),
            globals,
            argv,
            ports,
            steps: 0,
            max_frames: 0,
            termination: None,
        })
    }

    #[inline(always)]
    fn fault(&self, kind: FaultKind) -> VmFault {
        VmFault { kind, pc: self.pc }
    }

    #[inline(always)]
    fn word(&self, at: usize) -> u32 {
        self.code[at]
    }

    #[inline(always)]
    fn pop(&mut self) -> Result<Value, VmFault> {
        self.stack.pop().ok_or(VmFault { kind: FaultKind::StackUnderflow, pc: self.pc })
    }

    #[inline(always)]
    fn peek(&self, n: usize) -> Result<&Value, VmFault> {
        let len = self.stack.len();
        if n >= len {
            return Err(self.fault(FaultKind::StackUnderflow));
        }
        Ok(&self.stack[len - 1 - n])
    }

    #[inline(always)]
    fn acc_int(&self) -> Result<i64, VmFault> {
        match self.acc {
            Value::Int(n) => Ok(n),
            _ => Err(self.fault(FaultKind::NotAnInteger)),
        }
    }

    fn env_group(&self) -> Result<&(Rc<ClosureGroup>, u32), VmFault> {
        self.env.as_ref().ok_or(self.fault(FaultKind::BadInstruction))
    }

    /// Enter `f` with the top `nargs` stack values as arguments. In tail
    /// mode the current frame is reused.
    fn apply(&mut self, mut f: Value, mut nargs: usize, tail: bool) -> Result<(), VmFault> {
        loop {
            match f {
                Value::Closure(group, index) => {
                    let (entry, arity) = group.funcs[index as usize];
                    let arity = arity as usize;
                    if nargs < arity {
                        let mut got = Vec::with_capacity(nargs);
                        for _ in 0..nargs {
                            got.push(self.pop()?);
                        }
                        self.acc = Value::Partial(Rc::new(Partial { group, index, got }));
                        if tail {
                            self.do_return()?;
                        }
                        return Ok(());
                    }
                    let len = self.stack.len();
                    let mut pending = Vec::new();
                    if nargs > arity {
                        pending = self.stack.drain(len - nargs..len - arity).rev().collect();
                    }
                    if tail {
                        if !pending.is_empty() {
                            let frame = self.frames.last_mut().ok_or(VmFault {
                                kind: FaultKind::BadInstruction,
                                pc: self.pc,
                            })?;
                            pending.append(&mut frame.pending);
                            frame.pending = pending;
                        }
                    } else {
                        self.frames.push(Frame {
                            return_pc: self.pc,
                            saved_env: self.env.take(),
                            stack_base: len - nargs,
                            pending,
                        });
                        if self.frames.len() > self.max_frames {
                            self.max_frames = self.frames.len();
                        }
                    }
                    self.env = Some((group, index));
                    self.pc = entry as usize;
                    return Ok(());
                }
                Value::Partial(p) => {
                    for v in p.got.iter().rev() {
                        self.stack.push(v.clone());
                    }
                    nargs += p.got.len();
                    f = Value::Closure(p.group.clone(), p.index);
                }
                _ => return Err(self.fault(FaultKind::ApplyOfNonFunction)),
            }
        }
    }

    fn do_return(&mut self) -> Result<(), VmFault> {
        let frame = self.frames.pop().ok_or(self.fault(FaultKind::BadInstruction))?;
        if self.stack.len() != frame.stack_base {
            return Err(self.fault(FaultKind::StackUnderflow));
        }
        self.pc = frame.return_pc;
        self.env = frame.saved_env;
        if !frame.pending.is_empty() {
            let n = frame.pending.len();
            for v in frame.pending.into_iter().rev() {
                self.stack.push(v);
            }
            let f = std::mem::replace(&mut self.acc, Value::UNIT);
            self.apply(f, n, false)?;
        }
        Ok(())
    }

    /// Raise `exn`; returns the exit status when no handler is installed.
    fn raise(&mut self, exn: Value) -> Option<i32> {
        match self.traps.pop() {
            Some(trap) => {
                self.stack.truncate(trap.stack_depth);
                self.frames.truncate(trap.frame_depth);
                self.env = trap.saved_env;
                self.pc = trap.handler_pc;
                self.acc = exn;
                None
            }
            None => {
                let names = self.globals.first().and_then(|g| g.as_ref());
                let msg = format!("Fatal error: exception {}\n", render_exception(names, &exn));
                self.ports.stderr(msg.as_bytes());
                self.termination = Some(Termination::Uncaught(msg));
                self.acc = exn;
                Some(EXIT_UNCAUGHT)
            }
        }
    }

    fn binop(&mut self, op: Opcode) -> Result<(), VmFault> {
        let rhs = self.pop()?;
        let res = match (op, &self.acc, &rhs) {
            (Opcode::ADDINT, Value::Int(a), Value::Int(b)) => a.wrapping_add(*b),
            (Opcode::SUBINT, Value::Int(a), Value::Int(b)) => a.wrapping_sub(*b),
            (Opcode::MULINT, Value::Int(a), Value::Int(b)) => a.wrapping_mul(*b),
            (Opcode::DIVINT | Opcode::MODINT, Value::Int(_), Value::Int(0)) => {
                return Err(self.fault(FaultKind::DivisionByZero))
            }
            (Opcode::DIVINT, Value::Int(a), Value::Int(b)) => a.wrapping_div(*b),
            (Opcode::MODINT, Value::Int(a), Value::Int(b)) => a.wrapping_rem(*b),
            (Opcode::ADDINT | Opcode::SUBINT | Opcode::MULINT | Opcode::DIVINT | Opcode::MODINT, _, _) => {
                return Err(self.fault(FaultKind::NotAnInteger))
            }
            (_, a, b) => {
                let ord = compare_values(a, b).map_err(|k| self.fault(k))?;
                let r = match op {
                    Opcode::EQ => ord == Ordering::Equal,
                    Opcode::NEQ => ord != Ordering::Equal,
                    Opcode::LT => ord == Ordering::Less,
                    Opcode::LE => ord != Ordering::Greater,
                    Opcode::GT => ord == Ordering::Greater,
                    Opcode::GE => ord != Ordering::Less,
                    _ => unreachable!(),
                };
                r as i64
            }
        };
        self.acc = Value::Int(res);
        Ok(())
    }

    /// Execute exactly one instruction.
    #[inline(always)]
    pub fn step(&mut self) -> Result<Step, VmFault> {
        let pc = self.pc;
        let word = *self.code.get(pc).ok_or(self.fault(FaultKind::BadInstruction))?;
        let op = Opcode::from_word(word).ok_or(self.fault(FaultKind::BadInstruction))?;
        self.steps += 1;
        match op {
            Opcode::HALT => {
                let status = self.acc.as_int().unwrap_or(0) as i32;
                return Ok(Step::Halted(status));
            }
            Opcode::ACC => {
                self.acc = self.peek(self.word(pc + 1) as usize)?.clone();
                self.pc = pc + 2;
            }
            Opcode::PUSH => {
                self.stack.push(self.acc.clone());
                self.pc = pc + 1;
            }
            Opcode::POP => {
                let n = self.word(pc + 1) as usize;
                if n > self.stack.len() {
                    return Err(self.fault(FaultKind::StackUnderflow));
                }
                let len = self.stack.len();
                self.stack.truncate(len - n);
                self.pc = pc + 2;
            }
            Opcode::ASSIGN => {
                let n = self.word(pc + 1) as usize;
                let len = self.stack.len();
                if n >= len {
                    return Err(self.fault(FaultKind::StackUnderflow));
                }
                self.stack[len - 1 - n] = std::mem::replace(&mut self.acc, Value::UNIT);
                self.pc = pc + 2;
            }
            Opcode::ENVACC => {
                let n = self.word(pc + 1) as usize;
                let (group, _) = self.env_group()?;
                self.acc = group.env.get(n).cloned().ok_or(self.fault(FaultKind::BadInstruction))?;
                self.pc = pc + 2;
            }
            Opcode::OFFSETCLOSURE => {
                let n = self.word(pc + 1);
                let (group, _) = self.env_group()?;
                if n as usize >= group.funcs.len() {
                    return Err(self.fault(FaultKind::BadInstruction));
                }
                self.acc = Value::Closure(group.clone(), n);
                self.pc = pc + 2;
            }
            Opcode::GETGLOBAL => {
                let n = self.word(pc + 1) as usize;
                self.acc = match self.globals.get(n) {
                    Some(Some(v)) => v.clone(),
                    _ => return Err(self.fault(FaultKind::UninitializedGlobal)),
                };
                self.pc = pc + 2;
            }
            Opcode::SETGLOBAL => {
                let n = self.word(pc + 1) as usize;
                let v = std::mem::replace(&mut self.acc, Value::UNIT);
                *self.globals.get_mut(n).ok_or(VmFault { kind: FaultKind::UninitializedGlobal, pc })? =
                    Some(v);
                self.pc = pc + 2;
            }
            Opcode::CONSTINT => {
                self.acc = Value::Int(self.word(pc + 1) as i32 as i64);
                self.pc = pc + 2;
            }
            Opcode::MAKEBLOCK => {
                let tag = self.word(pc + 1);
                let n = self.word(pc + 2) as usize;
                if tag > 255 {
                    return Err(self.fault(FaultKind::BadInstruction));
                }
                let mut fields = Vec::with_capacity(n);
                if n > 0 {
                    fields.push(std::mem::replace(&mut self.acc, Value::UNIT));
                    for _ in 1..n {
                        fields.push(self.pop()?);
                    }
                }
                self.acc = Value::block(tag as u8, fields);
                self.pc = pc + 3;
            }
            Opcode::GETFIELD => {
                let n = self.word(pc + 1) as usize;
                let v = match &self.acc {
                    Value::Block(b) => b.fields.borrow().get(n).cloned(),
                    _ => None,
                };
                self.acc = v.ok_or(self.fault(FaultKind::FieldOfNonBlock))?;
                self.pc = pc + 2;
            }
            Opcode::SETFIELD => {
                let n = self.word(pc + 1) as usize;
                let v = self.pop()?;
                match &self.acc {
                    Value::Block(b) => {
                        let mut fields = b.fields.borrow_mut();
                        let slot = fields.get_mut(n).ok_or(VmFault { kind: FaultKind::FieldOfNonBlock, pc })?;
                        *slot = v;
                    }
                    _ => return Err(self.fault(FaultKind::FieldOfNonBlock)),
                }
                self.acc = Value::UNIT;
                self.pc = pc + 2;
            }
            Opcode::GETTAG => {
                self.acc = match &self.acc {
                    Value::Block(b) => Value::Int(b.tag as i64),
                    _ => return Err(self.fault(FaultKind::FieldOfNonBlock)),
                };
                self.pc = pc + 1;
            }
            Opcode::ISINT => {
                self.acc = Value::bool(matches!(self.acc, Value::Int(_)));
                self.pc = pc + 1;
            }
            Opcode::BRANCH => self.pc = self.word(pc + 1) as usize,
            Opcode::BRANCHIF => {
                self.pc = if self.acc_int()? != 0 { self.word(pc + 1) as usize } else { pc + 2 };
            }
            Opcode::BRANCHIFNOT => {
                self.pc = if self.acc_int()? == 0 { self.word(pc + 1) as usize } else { pc + 2 };
            }
            Opcode::SWITCHINT => {
                let n = self.word(pc + 1) as usize;
                let v = self.acc_int()?;
                self.pc = if v >= 0 && (v as usize) < n { self.word(pc + 2 + v as usize) as usize } else { pc + 2 + n };
            }
            Opcode::SWITCHTAG => {
                let n = self.word(pc + 1) as usize;
                let tag = match &self.acc {
                    Value::Block(b) => b.tag as usize,
                    _ => return Err(self.fault(FaultKind::FieldOfNonBlock)),
                };
                self.pc = if tag < n { self.word(pc + 2 + tag) as usize } else { pc + 2 + n };
            }
            Opcode::CLOSURE => {
                let arity = self.word(pc + 1);
                let nvars = self.word(pc + 2) as usize;
                let entry = self.word(pc + 3);
                let env = self.collect_env(nvars)?;
                self.acc = Value::Closure(Rc::new(ClosureGroup { funcs: vec![(entry, arity)], env }), 0);
                self.pc = pc + 4;
            }
            Opcode::CLOSUREREC => {
                let nfuncs = self.word(pc + 1) as usize;
                let nvars = self.word(pc + 2) as usize;
                let funcs: Vec<(u32, u32)> = (0..nfuncs)
                    .map(|i| (self.word(pc + 4 + 2 * i), self.word(pc + 3 + 2 * i)))
                    .collect();
                let env = self.collect_env(nvars)?;
                let group = Rc::new(ClosureGroup { funcs, env });
                for i in 0..nfuncs {
                    self.stack.push(Value::Closure(group.clone(), i as u32));
                }
                self.acc = Value::UNIT;
                self.pc = pc + 3 + 2 * nfuncs;
            }
            Opcode::APPLY => {
                let n = self.word(pc + 1) as usize;
                if n > self.stack.len() {
                    return Err(self.fault(FaultKind::StackUnderflow));
                }
                self.pc = pc + 2;
                let f = std::mem::replace(&mut self.acc, Value::UNIT);
                self.apply(f, n, false).map_err(|mut e| {
                    e.pc = pc;
                    e
                })?;
            }
            Opcode::APPTERM => {
                let n = self.word(pc + 1) as usize;
                let m = self.word(pc + 2) as usize;
                let len = self.stack.len();
                if m > len || n > m {
                    return Err(self.fault(FaultKind::StackUnderflow));
                }
                self.stack.drain(len - m..len - n);
                let f = std::mem::replace(&mut self.acc, Value::UNIT);
                self.apply(f, n, true)?;
            }
            Opcode::RETURN => {
                let n = self.word(pc + 1) as usize;
                let len = self.stack.len();
                if n > len {
                    return Err(self.fault(FaultKind::StackUnderflow));
                }
                self.stack.truncate(len - n);
                self.do_return()?;
            }
            Opcode::PUSHTRAP => {
                self.traps.push(TrapFrame {
                    handler_pc: self.word(pc + 1) as usize,
                    stack_depth: self.stack.len(),
                    frame_depth: self.frames.len(),
                    saved_env: self.env.clone(),
                });
                self.pc = pc + 2;
            }
            Opcode::POPTRAP => {
                self.traps.pop().ok_or(self.fault(FaultKind::BadInstruction))?;
                self.pc = pc + 1;
            }
            Opcode::RAISE => {
                let exn = std::mem::replace(&mut self.acc, Value::UNIT);
                if let Some(status) = self.raise(exn) {
                    return Ok(Step::Halted(status));
                }
            }
            Opcode::CCALL => {
                let index = self.word(pc + 1) as usize;
                let nargs = self.word(pc + 2) as usize;
                let prim = *self.prims.get(index).ok_or(self.fault(FaultKind::BadPrimitive))?;
                if nargs == 0 || nargs > self.stack.len() + 1 {
                    return Err(self.fault(FaultKind::BadPrimitive));
                }
                let mut args = Vec::with_capacity(nargs);
                args.push(std::mem::replace(&mut self.acc, Value::UNIT));
                for _ in 1..nargs {
                    args.push(self.pop()?);
                }
                self.pc = pc + 3;
                match call_primitive(prim, &args, &self.argv, &mut *self.ports) {
                    Ok(PrimOutcome::Value(v)) => self.acc = v,
                    Ok(PrimOutcome::Raise(exn)) => {
                        if let Some(status) = self.raise(exn) {
                            return Ok(Step::Halted(status));
                        }
                    }
                    Ok(PrimOutcome::Exit(status)) => {
                        self.termination = Some(Termination::Exited(status));
                        return Ok(Step::Halted(status));
                    }
                    Err(kind) => return Err(VmFault { kind, pc }),
                }
            }
            Opcode::ADDINT
            | Opcode::SUBINT
            | Opcode::MULINT
            | Opcode::DIVINT
            | Opcode::MODINT
            | Opcode::EQ
            | Opcode::NEQ
            | Opcode::LT
            | Opcode::LE
            | Opcode::GT
            | Opcode::GE => {
                self.binop(op)?;
                self.pc = pc + 1;
            }
            Opcode::NEGINT => {
                self.acc = Value::Int(self.acc_int()?.wrapping_neg());
                self.pc = pc + 1;
            }
            Opcode::BOOLNOT => {
                self.acc = Value::bool(self.acc_int()? == 0);
                self.pc = pc + 1;
            }
        }
        Ok(Step::Continue)
    }

    fn collect_env(&mut self, nvars: usize) -> Result<Vec<Value>, VmFault> {
        let mut env = Vec::with_capacity(nvars);
        if nvars > 0 {
            env.push(std::mem::replace(&mut self.acc, Value::UNIT));
            for _ in 1..nvars {
                env.push(self.pop()?);
            }
        }
        Ok(env)
    }

    /// Run until HALT, exit, an uncaught exception, or a fault.
    pub fn run(&mut self) -> Result<i32, VmFault> {
        loop {
            if let Step::Halted(status) = self.step()? {
                if self.termination.is_none() {
                    self.termination = Some(Termination::Halted(status));
                }
                return Ok(status);
            }
        }
    }

    /// Like [`Machine::run`], writing one trace line per instruction (up to `limit`).
    pub fn run_traced(&mut self, limit: u64, sink: &mut dyn FnMut(String)) -> Result<i32, VmFault> {
        loop {
            if self.steps < limit {
                sink(self.trace_line());
            }
            if let Step::Halted(status) = self.step()? {
                if self.termination.is_none() {
                    self.termination = Some(Termination::Halted(status));
                }
                return Ok(status);
            }
        }
    }

    fn trace_line(&self) -> String {
        let pc = self.pc;
        let mnemonic = self
            .code
            .get(pc)
            .and_then(|w| Opcode::from_word(*w))
            .map(|o| o.mnemonic())
            .unwrap_or("?");
        format!(
            "pc={pc} {mnemonic} acc={:?} depth={} frames={}",
            self.acc,
            self.stack.len(),
            self.frames.len()
        )
    }
}

/// Run an image to completion; faults are reported on the error port and
/// mapped to status 125.
pub fn run(image: &BytecodeImage, argv: Vec<String>, ports: &mut dyn Ports) -> Termination {
    let result = Machine::new(image, argv, ports).and_then(|mut m| {
        let status = m.run();
        status.map(|_| m.termination.clone().unwrap_or(Termination::Halted(0)))
    });
    match result {
        Ok(t) => t,
        Err(fault) => {
            ports.stderr(format!("{fault}\n").as_bytes());
            Termination::Fault(fault)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Opcode::*;

    fn img(code: Vec<u32>, prims: &[&str], globals: u32, consts: Vec<(u32, ConstValue)>) -> BytecodeImage {
        BytecodeImage { global_count: globals, code, prims: prims.iter().map(|s| s.to_string()).collect(), consts }
    }

    fn w(op: Opcode) -> u32 {
        op.code()
    }

    #[test]
    fn hello_world() {
        let image = img(
            vec![w(GETGLOBAL), 0, w(CCALL), 0, 1, w(CONSTINT), 0, w(HALT)],
            &["print_string"],
            1,
            vec![(0, ConstValue::Str(b"hello".to_vec()))],
        );
        let mut ports = CapturePorts::memory();
        let t = run(&image, vec![], &mut ports);
        assert_eq!(t, Termination::Halted(0));
        assert_eq!(ports.out, b"hello");
    }

    #[test]
    fn uncaught_exception_status_two() {
        let names = ConstValue::Block { tag: 0, fields: vec![ConstValue::Str(b"Match_failure".to_vec()), ConstValue::Str(b"Boom".to_vec())] };
        // raise (Boom "x") with exception id 1
        let image = img(
            vec![w(GETGLOBAL), 1, w(PUSH), w(CONSTINT), 1, w(MAKEBLOCK), 250, 2, w(RAISE)],
            &[],
            2,
            vec![(0, names), (1, ConstValue::Str(b"x".to_vec()))],
        );
        let mut ports = CapturePorts::memory();
        let t = run(&image, vec![], &mut ports);
        assert_eq!(t.status(), 2);
        assert_eq!(String::from_utf8(ports.err).unwrap(), "Fatal error: exception Boom(\"x\")\n");
    }

    #[test]
    fn over_application_applies_pending() {
        // let f x = fun y -> x + y in f 1 2
        // 0: CLOSURE 1 0 L_f ; PUSH (f at slot)
        // args: push 2, push 1, ACC 2 (f), APPLY 2, HALT
        // L_f: ACC 0; CLOSURE 1 1 L_g; RETURN 1        (captures x)
        // L_g: ENVACC 0; PUSH; ACC 1; ADDINT ... acc = y + x ; RETURN 1
        let mut code = vec![
            w(CLOSURE), 1, 0, 0, // patched
            w(PUSH),
            w(CONSTINT), 2, w(PUSH),
            w(CONSTINT), 1, w(PUSH),
            w(ACC), 2,
            w(APPLY), 2,
            w(HALT),
        ];
        let lf = code.len() as u32;
        code.extend([w(ACC), 0, w(CLOSURE), 1, 1, 0, w(RETURN), 1]);
        let lg = code.len() as u32;
        code.extend([w(ENVACC), 0, w(PUSH), w(ACC), 1, w(ADDINT), w(RETURN), 1]);
        code[3] = lf;
        code[lf as usize + 5] = lg;
        let image = img(code, &[], 0, vec![]);
        assert!(crate::bytecode::verify_image(&image).is_empty(), "{:?}", crate::bytecode::verify_image(&image));
        let mut ports = CapturePorts::memory();
        let mut m = Machine::new(&image, vec![], &mut ports).unwrap();
        m.run().unwrap();
        assert_eq!(m.acc.as_int(), Some(3));
        assert!(m.frames.is_empty());
    }

    #[test]
    fn branchifnot_on_false_jumps() {
        let image = img(vec![w(BRANCHIFNOT), 3, w(HALT), w(HALT)], &[], 0, vec![]);
        let mut ports = CapturePorts::memory();
        let mut m = Machine::new(&image, vec![], &mut ports).unwrap();
        m.acc = Value::Int(0);
        m.step().unwrap();
        assert_eq!(m.pc, 3);
    }

    #[test]
    fn push_pop_restores_stack() {
        let image = img(vec![w(CONSTINT), 5, w(PUSH), w(POP), 1, w(HALT)], &[], 0, vec![]);
        let mut ports = CapturePorts::memory();
        let mut m = Machine::new(&image, vec![], &mut ports).unwrap();
        m.stack.push(Value::Int(9));
        let before = m.stack.len();
        m.step().unwrap();
        m.step().unwrap();
        assert_eq!(m.stack.len(), before + 1);
        m.step().unwrap();
        assert_eq!(m.stack.len(), before);
        assert_eq!(m.stack[0].as_int(), Some(9));
    }

    #[test]
    fn raise_restores_trap_depths() {
        // PUSHTRAP L; PUSH; PUSH; CONSTINT 7; RAISE; L: HALT
        let image = img(vec![w(PUSHTRAP), 8, w(PUSH), w(PUSH), w(CONSTINT), 7, w(RAISE), w(HALT), w(HALT)], &[], 0, vec![]);
        let mut ports = CapturePorts::memory();
        let mut m = Machine::new(&image, vec![], &mut ports).unwrap();
        m.step().unwrap();
        let (depth, frames) = (m.traps[0].stack_depth, m.traps[0].frame_depth);
        for _ in 0..4 {
            m.step().unwrap();
        }
        assert_eq!(m.pc, 8);
        assert_eq!(m.stack.len(), depth);
        assert_eq!(m.frames.len(), frames);
        assert_eq!(m.acc.as_int(), Some(7));
        assert!(m.traps.is_empty());
    }

    #[test]
    fn primitive_examples() {
        let mut ports = CapturePorts::memory();
        let mut call = |p: Prim, args: Vec<Value>| match call_primitive(p, &args, &[], &mut ports) {
            Ok(PrimOutcome::Value(v)) => Ok(v),
            Ok(_) => panic!("unexpected control outcome"),
            Err(k) => Err(k),
        };
        assert_eq!(call(Prim::Compare, vec![Value::Int(1), Value::Int(1)]).unwrap().as_int(), Some(0));
        let sub = call(Prim::StringSub, vec![Value::str("abcdef"), Value::Int(1), Value::Int(3)]).unwrap();
        assert_eq!(sub.as_bytes().unwrap(), b"bcd");
        let g = Rc::new(ClosureGroup { funcs: vec![(0, 1)], env: vec![] });
        let c1 = Value::Closure(g.clone(), 0);
        let c2 = Value::Closure(g, 0);
        assert_eq!(call(Prim::Compare, vec![c1, c2]).unwrap_err(), FaultKind::BadPrimitive);
    }

    #[test]
    fn structural_order() {
        let s = Value::str("a");
        let b = Value::block(0, vec![]);
        assert_eq!(compare_values(&Value::Int(100), &s), Ok(Ordering::Less));
        assert_eq!(compare_values(&s, &b), Ok(Ordering::Less));
        let l1 = Value::list(vec![Value::Int(1), Value::Int(2)]);
        let l2 = Value::list(vec![Value::Int(1), Value::Int(3)]);
        assert_eq!(compare_values(&l1, &l2), Ok(Ordering::Less));
        assert_eq!(compare_values(&l1, &l1.clone()), Ok(Ordering::Equal));
        let short = Value::block(3, vec![Value::Int(1)]);
        let long = Value::block(3, vec![Value::Int(1), Value::Int(0)]);
        assert_eq!(compare_values(&short, &long), Ok(Ordering::Less));
    }

    #[test]
    fn read_missing_file_raises_sys_error() {
        let mut ports = CapturePorts::memory();
        match call_primitive(Prim::ReadFile, &[Value::str("nope.txt")], &[], &mut ports) {
            Ok(PrimOutcome::Raise(Value::Block(b))) => {
                assert_eq!(b.tag, EXN_TAG);
                assert_eq!(b.fields.borrow()[0].as_int(), Some(SYS_ERROR_ID));
            }
            _ => panic!("expected Sys_error"),
        }
    }

    #[test]
    fn deep_list_drop_does_not_overflow() {
        let mut v = Value::Int(0);
        for i in 0..2_000_000 {
            v = Value::block(0, vec![Value::Int(i), v]);
        }
        drop(v);
    }

    #[test]
    fn fault_status() {
        let image = img(vec![w(CONSTINT), 1, w(GETFIELD), 0, w(HALT)], &[], 0, vec![]);
        let mut ports = CapturePorts::memory();
        let t = run(&image, vec![], &mut ports);
        assert_eq!(t, Termination::Fault(VmFault { kind: FaultKind::FieldOfNonBlock, pc: 2 }));
        assert_eq!(t.status(), 125);
    }
}
