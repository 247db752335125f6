//! Constructor, record-label and exception tables.

use std::collections::HashMap;

use crate::frontend::ast::*;

use super::CompileError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtorKind {
    Constant,
    Block,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtorInfo {
    pub kind: CtorKind,
    pub tag: u32,
    pub arity: usize,
    /// Number of constructors of each kind in the owning type, which
    /// sizes the switch tables.
    pub constant_count: u32,
    pub block_count: u32,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldInfo {
    pub type_id: usize,
    pub offset: usize,
    pub mutable: bool,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExceptionInfo {
    pub id: u32,
    pub arity: usize,
}

/// Predeclared exceptions, in id order.
pub const PREDECLARED_EXCEPTIONS: &[(&str, usize)] = &[("Match_failure", 0), ("Sys_error", 1)];

#[derive(Clone, Debug, Default)]
pub struct SymbolTables {
    pub ctors: HashMap<String, CtorInfo>,
    pub fields: HashMap<String, FieldInfo>,
    /// Field names of each record type, in declaration order.
    pub records: Vec<Vec<String>>,
    pub exceptions: HashMap<String, ExceptionInfo>,
    /// Exception names indexed by id.
    pub exception_names: Vec<String>,
}

impl SymbolTables {
    pub fn record_size(&self, type_id: usize) -> usize {
        self.records[type_id].len()
    }

    pub fn is_exception(&self, name: &str) -> bool {
        self.exceptions.contains_key(name)
    }

    fn add_variant(&mut self, ctors: &[(&str, usize, Span)]) -> Result<(), CompileError> {
        let constant_count = ctors.iter().filter(|c| c.1 == 0).count() as u32;
        let block_count = ctors.len() as u32 - constant_count;
        let (mut next_const, mut next_block) = (0, 0);
        for &(name, arity, span) in ctors {
            if let Some(prev) = self.ctors.get(name).map(|c| c.span).or_else(|| {
                self.exceptions.contains_key(name).then_some(Span::default())
            }) {
                return Err(CompileError::DuplicateCtor { name: name.to_string(), first: prev, second: span });
            }
            let (kind, tag) = if arity == 0 {
                next_const += 1;
                (CtorKind::Constant, next_const - 1)
            } else {
                next_block += 1;
                (CtorKind::Block, next_block - 1)
            };
            self.ctors.insert(
                name.to_string(),
                CtorInfo { kind, tag, arity, constant_count, block_count, span },
            );
        }
        Ok(())
    }

    fn add_record(&mut self, fields: &[(&str, bool, Span)]) -> Result<(), CompileError> {
        let type_id = self.records.len();
        for (offset, &(name, mutable, span)) in fields.iter().enumerate() {
            if let Some(prev) = self.fields.get(name) {
                return Err(CompileError::DuplicateField { name: name.to_string(), first: prev.span, second: span });
            }
            self.fields.insert(name.to_string(), FieldInfo { type_id, offset, mutable, span });
        }
        self.records.push(fields.iter().map(|f| f.0.to_string()).collect());
        Ok(())
    }

    fn add_exception(&mut self, name: &str, arity: usize, span: Span) -> Result<(), CompileError> {
        if let Some(prev) = self.ctors.get(name).map(|c| c.span).or_else(|| {
            self.exceptions.contains_key(name).then_some(Span::default())
        }) {
            return Err(CompileError::DuplicateCtor { name: name.to_string(), first: prev, second: span });
        }
        let id = self.exception_names.len() as u32;
        self.exceptions.insert(name.to_string(), ExceptionInfo { id, arity });
        self.exception_names.push(name.to_string());
        Ok(())
    }
}

/// Tables for `program`, with bool, unit, list and ref pre-seeded.
pub fn build_symbol_tables(program: &Program) -> Result<SymbolTables, CompileError> {
    let mut t = SymbolTables::default();
    let none = Span::default();
    t.add_variant(&[("false", 0, none), ("true", 0, none)])?;
    t.add_variant(&[("()", 0, none)])?;
    t.add_variant(&[("[]", 0, none), ("::", 2, none)])?;
    t.add_record(&[("contents", true, none)])?;
    for &(name, arity) in PREDECLARED_EXCEPTIONS {
        t.add_exception(name, arity, none)?;
    }
    for item in &program.items {
        match item {
            Item::Type(decls) => {
                for decl in decls {
                    match &decl.kind {
                        TypeKind::Variant(ctors) => {
                            let v: Vec<_> = ctors.iter().map(|c| (c.name.as_str(), c.arity, c.span)).collect();
                            t.add_variant(&v)?;
                        }
                        TypeKind::Record(fields) => {
                            let v: Vec<_> = fields.iter().map(|f| (f.name.as_str(), f.mutable, f.span)).collect();
                            t.add_record(&v)?;
                        }
                        TypeKind::Alias => {}
                    }
                }
            }
            Item::Exception { name, arity, span } => t.add_exception(name, *arity, *span)?,
            Item::Let { .. } => {}
        }
    }
    Ok(t)
}
