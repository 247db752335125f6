//! The `.byte` image format: opcode table, sections, constant encoding, and
//! the static checks the toolchain runs over every image it produces.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   "MBC1"
//! 4   version        u32 (= 1)
//! 8   global_count   u32
//! 12  section table  3 x (id u32, offset u32, length u32)   ids: 1 CODE, 2 PRIM, 3 DATA
//! 48  CODE           u32 words
//!     PRIM           u32 count, then (u32 len, bytes) per name
//!     DATA           u32 count, then (u32 slot, const) per entry
//! ```
//!
//! Constants: `0x00` Int (i64), `0x01` Str (u32 len + bytes),
//! `0x02` Block (u8 tag, u32 arity, fields).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MBC1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12 + 3 * 12;

pub const SECTION_CODE: u32 = 1;
pub const SECTION_PRIM: u32 = 2;
pub const SECTION_DATA: u32 = 3;

const CONST_INT: u8 = 0x00;
const CONST_STR: u8 = 0x01;
const CONST_BLOCK: u8 = 0x02;

macro_rules! opcodes {
    ($( $name:ident = $code:expr, $ops:expr; )*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u32)]
        pub enum Opcode {
            $( $name = $code, )*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$( Opcode::$name, )*];

            pub fn from_word(word: u32) -> Option<Opcode> {
                match word {
                    $( $code => Some(Opcode::$name), )*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $( Opcode::$name => stringify!($name), )*
                }
            }

            /// Operand count for fixed-size opcodes; variable-size ones
            /// report their fixed prefix.
            fn base_operands(self) -> usize {
                match self {
                    $( Opcode::$name => $ops, )*
                }
            }
        }
    };
}

opcodes! {
    HALT = 0, 0;
    ACC = 1, 1;
    PUSH = 2, 0;
    POP = 3, 1;
    ASSIGN = 4, 1;
    ENVACC = 5, 1;
    OFFSETCLOSURE = 6, 1;
    GETGLOBAL = 7, 1;
    SETGLOBAL = 8, 1;
    CONSTINT = 9, 1;
    MAKEBLOCK = 10, 2;
    GETFIELD = 11, 1;
    SETFIELD = 12, 1;
    GETTAG = 13, 0;
    ISINT = 14, 0;
    BRANCH = 15, 1;
    BRANCHIF = 16, 1;
    BRANCHIFNOT = 17, 1;
    SWITCHINT = 18, 1;
    SWITCHTAG = 19, 1;
    CLOSURE = 20, 3;
    CLOSUREREC = 21, 2;
    APPLY = 22, 1;
    APPTERM = 23, 2;
    RETURN = 24, 1;
    PUSHTRAP = 25, 1;
    POPTRAP = 26, 0;
    RAISE = 27, 0;
    CCALL = 28, 2;
    ADDINT = 29, 0;
    SUBINT = 30, 0;
    MULINT = 31, 0;
    DIVINT = 32, 0;
    MODINT = 33, 0;
    NEGINT = 34, 0;
    BOOLNOT = 35, 0;
    EQ = 36, 0;
    NEQ = 37, 0;
    LT = 38, 0;
    LE = 39, 0;
    GT = 40, 0;
    GE = 41, 0;
}

impl Opcode {
    pub fn code(self) -> u32 {
        self as u32
    }

    /// Total operand count given the first operand (only consulted for
    /// the switch opcodes and CLOSUREREC).
    pub fn operand_count(self, first: Option<u32>) -> usize {
        match self {
            Opcode::SWITCHINT | Opcode::SWITCHTAG => 1 + first.unwrap_or(0) as usize,
            Opcode::CLOSUREREC => 2 + 2 * first.unwrap_or(0) as usize,
            op => op.base_operands(),
        }
    }

    /// Positions (operand indices) holding absolute code addresses.
    pub fn label_operands(self, operands: &[u32]) -> Vec<usize> {
        match self {
            Opcode::BRANCH | Opcode::BRANCHIF | Opcode::BRANCHIFNOT | Opcode::PUSHTRAP => vec![0],
            Opcode::SWITCHINT | Opcode::SWITCHTAG => (1..operands.len()).collect(),
            Opcode::CLOSURE => vec![2],
            Opcode::CLOSUREREC => (0..operands.first().copied().unwrap_or(0) as usize)
                .map(|i| 3 + 2 * i)
                .filter(|&i| i < operands.len())
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// A structured constant stored in the DATA section.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ConstValue {
    Int(i64),
    Str(Vec<u8>),
    Block { tag: u8, fields: Vec<ConstValue> },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BytecodeImage {
    pub global_count: u32,
    pub code: Vec<u32>,
    pub prims: Vec<String>,
    pub consts: Vec<(u32, ConstValue)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub offset: usize,
    pub opcode: Opcode,
    pub operands: Vec<u32>,
}

impl Instruction {
    pub fn len(&self) -> usize {
        1 + self.operands.len()
    }

    pub fn next(&self) -> usize {
        self.offset + self.len()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad magic number")]
    BadMagic,
    #[error("unsupported image version {0}")]
    BadVersion(u32),
    #[error("truncated or malformed section: {0}")]
    TruncatedSection(&'static str),
    #[error("unknown opcode {word} at word {offset}")]
    UnknownOpcode { word: u32, offset: usize },
    #[error("dangling {kind} index {index} at word {offset}")]
    DanglingIndex { kind: &'static str, index: u32, offset: usize },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

impl BytecodeImage {
    /// Linear sweep of the code section into instructions.
    pub fn instructions(&self) -> Result<Vec<Instruction>, ImageError> {
        decode_code(&self.code)
    }

    /// Index checks shared by the encoder and decoder.
    fn check_indices(&self, instrs: &[Instruction]) -> Result<(), ImageError> {
        for ins in instrs {
            match ins.opcode {
                Opcode::CCALL if ins.operands[0] as usize >= self.prims.len() => {
                    return Err(ImageError::DanglingIndex {
                        kind: "primitive",
                        index: ins.operands[0],
                        offset: ins.offset,
                    })
                }
                Opcode::GETGLOBAL | Opcode::SETGLOBAL if ins.operands[0] >= self.global_count => {
                    return Err(ImageError::DanglingIndex {
                        kind: "global",
                        index: ins.operands[0],
                        offset: ins.offset,
                    })
                }
                _ => {}
            }
        }
        for (slot, _) in &self.consts {
            if *slot >= self.global_count {
                return Err(ImageError::DanglingIndex { kind: "global", index: *slot, offset: 0 });
            }
        }
        Ok(())
    }
}

pub fn decode_code(code: &[u32]) -> Result<Vec<Instruction>, ImageError> {
    let mut out = Vec::new();
    let mut pc = 0;
    while pc < code.len() {
        let word = code[pc];
        let opcode =
            Opcode::from_word(word).ok_or(ImageError::UnknownOpcode { word, offset: pc })?;
        let count = opcode.operand_count(code.get(pc + 1).copied());
        if pc + 1 + count > code.len() {
            return Err(ImageError::TruncatedSection("CODE"));
        }
        out.push(Instruction { offset: pc, opcode, operands: code[pc + 1..pc + 1 + count].to_vec() });
        pc += 1 + count;
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_const(out: &mut Vec<u8>, value: &ConstValue) {
    match value {
        ConstValue::Int(n) => {
            out.push(CONST_INT);
            out.extend_from_slice(&n.to_le_bytes());
        }
        ConstValue::Str(bytes) => {
            out.push(CONST_STR);
            put_u32(out, bytes.len() as u32);
            out.extend_from_slice(bytes);
        }
        ConstValue::Block { tag, fields } => {
            out.push(CONST_BLOCK);
            out.push(*tag);
            put_u32(out, fields.len() as u32);
            for f in fields {
                put_const(out, f);
            }
        }
    }
}

pub fn encode_image(image: &BytecodeImage) -> Result<Vec<u8>, ImageError> {
    let instrs = image
        .instructions()
        .map_err(|e| ImageError::InvariantViolation(e.to_string()))?;
    image.check_indices(&instrs).map_err(|e| ImageError::InvariantViolation(e.to_string()))?;

    let mut code = Vec::with_capacity(image.code.len() * 4);
    for w in &image.code {
        put_u32(&mut code, *w);
    }
    let mut prim = Vec::new();
    put_u32(&mut prim, image.prims.len() as u32);
    for name in &image.prims {
        put_u32(&mut prim, name.len() as u32);
        prim.extend_from_slice(name.as_bytes());
    }
    let mut data = Vec::new();
    put_u32(&mut data, image.consts.len() as u32);
    for (slot, value) in &image.consts {
        put_u32(&mut data, *slot);
        put_const(&mut data, value);
    }

    let mut out = Vec::with_capacity(HEADER_LEN + code.len() + prim.len() + data.len());
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, image.global_count);
    let mut offset = HEADER_LEN;
    for (id, section) in [(SECTION_CODE, &code), (SECTION_PRIM, &prim), (SECTION_DATA, &data)] {
        put_u32(&mut out, id);
        put_u32(&mut out, offset as u32);
        put_u32(&mut out, section.len() as u32);
        offset += section.len();
    }
    out.extend_from_slice(&code);
    out.extend_from_slice(&prim);
    out.extend_from_slice(&data);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        if self.pos + n > self.bytes.len() {
            return Err(ImageError::TruncatedSection(self.section));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ImageError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, ImageError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn constant(&mut self) -> Result<ConstValue, ImageError> {
        // Iterative to keep deeply nested constants off the host stack.
        enum Pending {
            Block { tag: u8, arity: usize, fields: Vec<ConstValue> },
        }
        let mut stack: Vec<Pending> = Vec::new();
        loop {
            let mut value = match self.u8()? {
                CONST_INT => ConstValue::Int(self.i64()?),
                CONST_STR => {
                    let len = self.u32()? as usize;
                    ConstValue::Str(self.take(len)?.to_vec())
                }
                CONST_BLOCK => {
                    let tag = self.u8()?;
                    let arity = self.u32()? as usize;
                    if arity > self.bytes.len() {
                        return Err(ImageError::TruncatedSection(self.section));
                    }
                    if arity > 0 {
                        stack.push(Pending::Block { tag, arity, fields: Vec::with_capacity(arity) });
                        continue;
                    }
                    ConstValue::Block { tag, fields: Vec::new() }
                }
                _ => return Err(ImageError::TruncatedSection(self.section)),
            };
            loop {
                match stack.last_mut() {
                    None => return Ok(value),
                    Some(Pending::Block { arity, fields, .. }) => {
                        fields.push(value);
                        if fields.len() < *arity {
                            break;
                        }
                        let Some(Pending::Block { tag, fields, .. }) = stack.pop() else {
                            unreachable!()
                        };
                        value = ConstValue::Block { tag, fields };
                    }
                }
            }
        }
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<BytecodeImage, ImageError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(ImageError::BadMagic);
    }
    let mut header = Reader { bytes, pos: 4, section: "header" };
    let version = header.u32()?;
    if version != VERSION {
        return Err(ImageError::BadVersion(version));
    }
    let global_count = header.u32()?;
    let mut expected = HEADER_LEN;
    let mut sections = Vec::new();
    for id in [SECTION_CODE, SECTION_PRIM, SECTION_DATA] {
        let got_id = header.u32()?;
        let offset = header.u32()? as usize;
        let len = header.u32()? as usize;
        if got_id != id || offset != expected || offset + len > bytes.len() {
            return Err(ImageError::TruncatedSection("section table"));
        }
        sections.push(&bytes[offset..offset + len]);
        expected = offset + len;
    }
    if expected != bytes.len() {
        return Err(ImageError::TruncatedSection("trailing bytes"));
    }

    let code_bytes = sections[0];
    if code_bytes.len() % 4 != 0 {
        return Err(ImageError::TruncatedSection("CODE"));
    }
    let code: Vec<u32> =
        code_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();

    let mut r = Reader { bytes: sections[1], pos: 0, section: "PRIM" };
    let count = r.u32()? as usize;
    let mut prims = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ImageError::TruncatedSection("PRIM"))?;
        prims.push(name.to_string());
    }
    if !r.done() {
        return Err(ImageError::TruncatedSection("PRIM"));
    }

    let mut r = Reader { bytes: sections[2], pos: 0, section: "DATA" };
    let count = r.u32()? as usize;
    let mut consts = Vec::new();
    for _ in 0..count {
        let slot = r.u32()?;
        consts.push((slot, r.constant()?));
    }
    if !r.done() {
        return Err(ImageError::TruncatedSection("DATA"));
    }

    let image = BytecodeImage { global_count, code, prims, consts };
    let instrs = image.instructions()?;
    image.check_indices(&instrs)?;
    Ok(image)
}

/// Text listing, one instruction per line, labels rendered as `L<index>`.
pub fn disassemble(image: &BytecodeImage) -> Result<String, ImageError> {
    let instrs = image.instructions()?;
    let mut out = String::new();
    for ins in &instrs {
        let labels = ins.opcode.label_operands(&ins.operands);
        let _ = write!(out, "{}: {}", ins.offset, ins.opcode.mnemonic());
        for (i, op) in ins.operands.iter().enumerate() {
            if labels.contains(&i) {
                let _ = write!(out, " L{op}");
            } else if ins.opcode == Opcode::CONSTINT {
                let _ = write!(out, " {}", *op as i32);
            } else if ins.opcode == Opcode::CCALL && i == 0 {
                match image.prims.get(*op as usize) {
                    Some(name) => {
                        let _ = write!(out, " {op}<{name}>");
                    }
                    None => {
                        let _ = write!(out, " {op}");
                    }
                }
            } else {
                let _ = write!(out, " {op}");
            }
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "; code={} words, prims={}, globals={}, consts={}",
        image.code.len(),
        image.prims.len(),
        image.global_count,
        image.consts.len()
    );
    for (i, name) in image.prims.iter().enumerate() {
        let _ = writeln!(out, "; prim {i} {name}");
    }
    for (slot, value) in &image.consts {
        let _ = writeln!(out, "; global {slot} = {}", render_const(value));
    }
    Ok(out)
}

pub fn render_const(value: &ConstValue) -> String {
    match value {
        ConstValue::Int(n) => n.to_string(),
        ConstValue::Str(bytes) => format!("{:?}", String::from_utf8_lossy(bytes)),
        ConstValue::Block { tag, fields } => {
            let inner: Vec<String> = fields.iter().map(render_const).collect();
            format!("[{}: {}]", tag, inner.join(", "))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub offset: usize,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "word {}: {}", self.offset, self.message)
    }
}

/// Net effect on the value stack, and the minimum depth required.
fn stack_effect(ins: &Instruction) -> (isize, usize) {
    let ops = &ins.operands;
    let below = |n: u32| if n == 0 { 0 } else { n as usize - 1 };
    match ins.opcode {
        Opcode::ACC | Opcode::ASSIGN => (0, ops[0] as usize + 1),
        Opcode::PUSH => (1, 0),
        Opcode::POP => (-(ops[0] as isize), ops[0] as usize),
        Opcode::MAKEBLOCK => (-(below(ops[1]) as isize), below(ops[1])),
        Opcode::SETFIELD => (-1, 1),
        Opcode::CLOSURE => (-(below(ops[1]) as isize), below(ops[1])),
        Opcode::CLOSUREREC => (ops[0] as isize - below(ops[1]) as isize, below(ops[1])),
        Opcode::APPLY => (-(ops[0] as isize), ops[0] as usize),
        Opcode::CCALL => (-(below(ops[1]) as isize), below(ops[1])),
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
        | Opcode::GE => (-1, 1),
        _ => (0, 0),
    }
}

/// Static checks: label alignment, consistent stack depth at joins, no
/// underflow, valid indices. An empty result means the image is sound.
pub fn verify_image(image: &BytecodeImage) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let instrs = match image.instructions() {
        Ok(i) => i,
        Err(e) => {
            diags.push(Diagnostic { offset: 0, message: e.to_string() });
            return diags;
        }
    };
    if let Err(e) = image.check_indices(&instrs) {
        let offset = match &e {
            ImageError::DanglingIndex { offset, .. } => *offset,
            _ => 0,
        };
        diags.push(Diagnostic { offset, message: e.to_string() });
    }
    let index_of: BTreeMap<usize, usize> =
        instrs.iter().enumerate().map(|(i, ins)| (ins.offset, i)).collect();

    #[derive(Clone, Copy, PartialEq, Eq)]
    enum Ctx {
        TopLevel,
        Function,
    }
    // depth per instruction index, plus the kind of code it belongs to
    let mut depth: Vec<Option<(usize, Ctx)>> = vec![None; instrs.len()];
    let mut work: Vec<(usize, usize, Ctx, usize)> = Vec::new(); // (target word, depth, ctx, from)

    if !instrs.is_empty() {
        work.push((0, 0, Ctx::TopLevel, 0));
    }
    while let Some((target, d, ctx, from)) = work.pop() {
        let Some(&idx) = index_of.get(&target) else {
            diags.push(Diagnostic {
                offset: from,
                message: format!("jump target {target} is not an instruction boundary"),
            });
            continue;
        };
        match depth[idx] {
            Some((seen, seen_ctx)) => {
                if seen != d || seen_ctx != ctx {
                    diags.push(Diagnostic {
                        offset: target,
                        message: format!(
                            "inconsistent stack depth at join: {seen} vs {d} (from word {from})"
                        ),
                    });
                }
                continue;
            }
            None => depth[idx] = Some((d, ctx)),
        }
        let ins = &instrs[idx];
        let (delta, need) = stack_effect(ins);
        if need > d {
            diags.push(Diagnostic {
                offset: ins.offset,
                message: format!(
                    "stack underflow: {} needs depth {need}, have {d}",
                    ins.opcode.mnemonic()
                ),
            });
            continue;
        }
        let after = (d as isize + delta) as usize;
        let next = ins.next();
        let label = |i: usize| ins.operands[i] as usize;
        let mut fallthrough = true;
        match ins.opcode {
            Opcode::HALT | Opcode::RAISE => fallthrough = false,
            Opcode::RETURN => {
                fallthrough = false;
                if ctx != Ctx::Function {
                    diags.push(Diagnostic {
                        offset: ins.offset,
                        message: "RETURN outside a function".into(),
                    });
                } else if ins.operands[0] as usize != d {
                    diags.push(Diagnostic {
                        offset: ins.offset,
                        message: format!("RETURN {} at depth {d}", ins.operands[0]),
                    });
                }
            }
            Opcode::APPTERM => {
                fallthrough = false;
                let (n, m) = (ins.operands[0] as usize, ins.operands[1] as usize);
                if ctx != Ctx::Function {
                    diags.push(Diagnostic {
                        offset: ins.offset,
                        message: "APPTERM outside a function".into(),
                    });
                } else if m != d || n > m {
                    diags.push(Diagnostic {
                        offset: ins.offset,
                        message: format!("APPTERM {n} {m} at depth {d}"),
                    });
                }
            }
            Opcode::BRANCH => {
                fallthrough = false;
                work.push((label(0), after, ctx, ins.offset));
            }
            Opcode::BRANCHIF | Opcode::BRANCHIFNOT | Opcode::PUSHTRAP => {
                work.push((label(0), after, ctx, ins.offset));
            }
            Opcode::SWITCHINT | Opcode::SWITCHTAG => {
                for i in 1..ins.operands.len() {
                    work.push((label(i), after, ctx, ins.offset));
                }
            }
            Opcode::CLOSURE => {
                work.push((label(2), ins.operands[0] as usize, Ctx::Function, ins.offset));
            }
            Opcode::CLOSUREREC => {
                for i in 0..ins.operands[0] as usize {
                    let arity = ins.operands[2 + 2 * i] as usize;
                    work.push((label(3 + 2 * i), arity, Ctx::Function, ins.offset));
                }
            }
            _ => {}
        }
        if matches!(ins.opcode, Opcode::CLOSURE | Opcode::CLOSUREREC) {
            let arities: Vec<u32> = if ins.opcode == Opcode::CLOSURE {
                vec![ins.operands[0]]
            } else {
                (0..ins.operands[0] as usize).map(|i| ins.operands[2 + 2 * i]).collect()
            };
            if arities.contains(&0) {
                diags.push(Diagnostic { offset: ins.offset, message: "closure of arity 0".into() });
            }
        }
        if fallthrough {
            if next >= image.code.len() {
                diags.push(Diagnostic {
                    offset: ins.offset,
                    message: "control falls off the end of the code".into(),
                });
            } else {
                work.push((next, after, ctx, ins.offset));
            }
        }
    }
    diags.sort_by_key(|d| d.offset);
    diags
}
