//! Surface syntax shared by both dialects.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileId(pub u32);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Span {
    pub file: FileId,
    pub start: u32,
    pub end: u32,
}

impl Span {
    pub fn new(file: FileId, start: usize, end: usize) -> Self {
        Span { file, start: start as u32, end: end as u32 }
    }

    pub fn to(self, other: Span) -> Span {
        Span { file: self.file, start: self.start, end: other.end.max(self.end) }
    }
}

/// File names indexed by [`FileId`], for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct SourceMap {
    names: Vec<String>,
}

impl SourceMap {
    pub fn add(&mut self, name: impl Into<String>) -> FileId {
        self.names.push(name.into());
        FileId(self.names.len() as u32 - 1)
    }

    pub fn name(&self, file: FileId) -> &str {
        self.names.get(file.0 as usize).map(String::as_str).unwrap_or("<unknown>")
    }

    /// `file:offset` prefix used in diagnostics.
    pub fn locate(&self, span: Span) -> String {
        format!("{}:{}", self.name(span.file), span.start)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    Type(Vec<TypeDecl>),
    Exception { name: String, arity: usize, span: Span },
    Let { recursive: bool, bindings: Vec<Binding>, span: Span },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypeDecl {
    pub name: String,
    pub kind: TypeKind,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TypeKind {
    Variant(Vec<CtorDecl>),
    Record(Vec<FieldDecl>),
    Alias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtorDecl {
    pub name: String,
    pub arity: usize,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldDecl {
    pub name: String,
    pub mutable: bool,
    pub span: Span,
}

/// `let f p1 .. pn = body` has `pat = Var f` and `params = [p1 .. pn]`;
/// `let p = body` has no params.
#[derive(Clone, Debug, PartialEq)]
pub struct Binding {
    pub pat: Pattern,
    pub params: Vec<Pattern>,
    pub body: Expr,
    pub span: Span,
}

impl Binding {
    pub fn name(&self) -> Option<&str> {
        match &self.pat.kind {
            PatternKind::Var(n) => Some(n),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub pat: Pattern,
    pub guard: Option<Expr>,
    pub body: Expr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExprKind {
    IntLit(i64),
    StrLit(Vec<u8>),
    CharLit(u8),
    Var(String),
    /// Constructor application; `C (a, b)` yields two arguments.
    Ctor(String, Vec<Expr>),
    Tuple(Vec<Expr>),
    Record(Vec<(String, Expr)>),
    FieldGet(Box<Expr>, String),
    FieldSet(Box<Expr>, String, Box<Expr>),
    Apply(Box<Expr>, Vec<Expr>),
    Fun(Vec<Pattern>, Box<Expr>),
    Function(Vec<Case>),
    Let(bool, Vec<Binding>, Box<Expr>),
    If(Box<Expr>, Box<Expr>, Option<Box<Expr>>),
    Match(Box<Expr>, Vec<Case>),
    Try(Box<Expr>, Vec<Case>),
    Raise(Box<Expr>),
    Sequence(Box<Expr>, Box<Expr>),
    AndAlso(Box<Expr>, Box<Expr>),
    OrElse(Box<Expr>, Box<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub kind: PatternKind,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PatternKind {
    Wildcard,
    Var(String),
    IntLit(i64),
    CharLit(u8),
    StrLit(Vec<u8>),
    Unit,
    Tuple(Vec<Pattern>),
    Ctor(String, Vec<Pattern>),
    Or(Box<Pattern>, Box<Pattern>),
}

impl Pattern {
    /// Variables bound by the pattern, left to right (or-patterns
    /// contribute their left alternative).
    pub fn vars(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match &self.kind {
            PatternKind::Var(n) => out.push(n),
            PatternKind::Tuple(ps) | PatternKind::Ctor(_, ps) => {
                for p in ps {
                    p.collect_vars(out);
                }
            }
            PatternKind::Or(a, _) => a.collect_vars(out),
            _ => {}
        }
    }

    pub fn is_irrefutable_leaf(&self) -> bool {
        matches!(self.kind, PatternKind::Wildcard | PatternKind::Var(_))
    }
}
