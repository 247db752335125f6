pub mod ast;
pub mod lexer;
pub mod parser;
pub mod subset;

pub use ast::{FileId, Program, SourceMap, Span};
pub use lexer::{lex, LexError, Token, TokenKind};
pub use parser::{parse, ParseError};
pub use subset::{check_subset, Dialect, Violation};
