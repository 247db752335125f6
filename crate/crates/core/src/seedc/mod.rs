//! The seed compiler: MiniML source files to a bytecode image, in two
//! passes (lowering, then emission).

pub mod emit;
pub mod lower;
pub mod tables;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bytecode::{encode_image, verify_image, BytecodeImage};
use crate::frontend::{check_subset, lex, parse, Dialect, FileId, LexError, ParseError, Program, SourceMap, Span};

pub use emit::emit;
pub use lower::{lower, LExpr, LoweredProgram};
pub use tables::{build_symbol_tables, SymbolTables};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("{0}")]
    Lex(LexError),
    #[error("{0}")]
    Parse(ParseError),
    #[error("not MiniML: {message}")]
    Subset { message: String, span: Span },
    #[error("constructor {name} is declared twice")]
    DuplicateCtor { name: String, first: Span, second: Span },
    #[error("record field {name} is declared twice")]
    DuplicateField { name: String, first: Span, second: Span },
    #[error("unknown constructor {name}")]
    UnknownCtor { name: String, span: Span },
    #[error("unknown record field {name}")]
    UnknownField { name: String, span: Span },
    #[error("constructor {name} expects {expected} argument(s), got {found}")]
    CtorArityMismatch { name: String, expected: usize, found: usize, span: Span },
    #[error("unbound variable {name}")]
    UnknownVariable { name: String, span: Span },
    #[error("primitive {name} takes {expected} argument(s), got {found}")]
    PrimitiveArity { name: String, expected: usize, found: usize, span: Span },
    #[error("field {name} is not mutable")]
    ImmutableField { name: String, span: Span },
    #[error("the right-hand side of `let rec` must be a function")]
    BadRecursiveBinding { span: Span },
    #[error("bad record expression: {message}")]
    BadRecord { message: String, span: Span },
    #[error("unsupported by the seed compiler: {what}")]
    Unsupported { what: String, span: Span },
    #[error("internal compiler error: {0}")]
    Internal(String),
}

impl CompileError {
    pub fn span(&self) -> Option<Span> {
        use CompileError::*;
        match self {
            Lex(e) => Some(e.span),
            Parse(e) => Some(e.span),
            Subset { span, .. }
            | UnknownCtor { span, .. }
            | UnknownField { span, .. }
            | CtorArityMismatch { span, .. }
            | UnknownVariable { span, .. }
            | PrimitiveArity { span, .. }
            | ImmutableField { span, .. }
            | BadRecursiveBinding { span }
            | BadRecord { span, .. }
            | Unsupported { span, .. } => Some(*span),
            DuplicateCtor { second, .. } | DuplicateField { second, .. } => Some(*second),
            Internal(_) => None,
        }
    }
}

/// Compilation failure with `file:offset: message` diagnostics.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{}", diagnostics.join("\n"))]
pub struct CompileFailure {
    pub diagnostics: Vec<String>,
}

fn failure(map: &SourceMap, errors: impl IntoIterator<Item = CompileError>) -> CompileFailure {
    let diagnostics = errors
        .into_iter()
        .map(|e| match e.span() {
            Some(span) => format!("{}: {e}", map.locate(span)),
            None => e.to_string(),
        })
        .collect();
    CompileFailure { diagnostics }
}

/// Lex and parse each source; items are concatenated in order.
pub fn parse_sources(sources: &[(String, Vec<u8>)]) -> Result<(Program, SourceMap), CompileFailure> {
    let mut map = SourceMap::default();
    let mut items = Vec::new();
    for (name, text) in sources {
        let file: FileId = map.add(name.clone());
        let tokens = lex(text, file).map_err(|e| failure(&map, [CompileError::Lex(e)]))?;
        let program = parse(&tokens).map_err(|e| failure(&map, [CompileError::Parse(e)]))?;
        items.extend(program.items);
    }
    Ok((Program { items }, map))
}

/// Full pipeline over in-memory sources.
pub fn compile_sources(sources: &[(String, Vec<u8>)]) -> Result<BytecodeImage, CompileFailure> {
    let sources = sources.to_vec();
    with_large_stack(move || compile_inner(&sources))
}

fn compile_inner(sources: &[(String, Vec<u8>)]) -> Result<BytecodeImage, CompileFailure> {
    let (program, map) = parse_sources(sources)?;
    let violations = check_subset(&program, Dialect::MiniML);
    if !violations.is_empty() {
        return Err(failure(
            &map,
            violations.into_iter().map(|v| CompileError::Subset { message: v.message, span: v.span }),
        ));
    }
    let image = build_symbol_tables(&program)
        .and_then(|tables| lower(&program, &tables))
        .and_then(|lowered| emit(&lowered))
        .map_err(|e| failure(&map, [e]))?;
    let diags = verify_image(&image);
    if !diags.is_empty() {
        let msgs = diags.into_iter().map(|d| CompileError::Internal(format!("emitted image fails verification: {d}")));
        return Err(failure(&map, msgs));
    }
    Ok(image)
}

/// Compile `paths` (concatenated in order) and write the image to `out`.
pub fn compile_files(paths: &[PathBuf], out: &Path) -> Result<BytecodeImage, CompileFailure> {
    let mut sources = Vec::new();
    for p in paths {
        let text = std::fs::read(p).map_err(|e| CompileFailure { diagnostics: vec![format!("{}: {e}", p.display())] })?;
        sources.push((p.display().to_string(), text));
    }
    let image = compile_sources(&sources)?;
    let bytes = encode_image(&image).map_err(|e| CompileFailure { diagnostics: vec![e.to_string()] })?;
    std::fs::write(out, bytes).map_err(|e| CompileFailure { diagnostics: vec![format!("{}: {e}", out.display())] })?;
    Ok(image)
}

/// Run `f` on a thread with a generous stack: lowering and emission
/// recurse over the expression tree.
pub(crate) fn with_large_stack<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    std::thread::Builder::new()
        .stack_size(256 << 20)
        .spawn(f)
        .expect("spawn compiler thread")
        .join()
        .unwrap_or_else(|p| std::panic::resume_unwind(p))
}
