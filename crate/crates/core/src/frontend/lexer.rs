use thiserror::Error;

use super::ast::{FileId, Span};

pub const KEYWORDS: &[&str] = &[
    "let", "rec", "and", "in", "fun", "function", "match", "with", "when", "type", "of",
    "exception", "try", "raise", "if", "then", "else", "true", "false", "mutable", "begin", "end",
];

/// Longest-match order: two-character symbols first.
const SYMBOLS: &[&str] = &[
    "->", "<-", ":=", "::", "<=", ">=", "<>", "&&", "||", "+", "-", "*", "/", "^", "=", "<", ">",
    "!", "|", ";", ",", ".", ":", "(", ")", "[", "]", "{", "}",
];

const OPERATORS: &[&str] =
    &["<-", ":=", "::", "<=", ">=", "<>", "&&", "||", "+", "-", "*", "/", "^", "=", "<", ">", "!", "mod"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Ident(String),
    UIdent(String),
    /// `'a` in type expressions.
    TyVar(String),
    Int(i64),
    Str(Vec<u8>),
    Char(u8),
    Keyword(&'static str),
    Op(&'static str),
    Punct(&'static str),
    Eof,
}

impl TokenKind {
    pub fn describe(&self) -> String {
        match self {
            TokenKind::Ident(s) => format!("identifier {s}"),
            TokenKind::UIdent(s) => format!("constructor {s}"),
            TokenKind::TyVar(s) => format!("type variable '{s}"),
            TokenKind::Int(n) => format!("integer {n}"),
            TokenKind::Str(_) => "string literal".into(),
            TokenKind::Char(_) => "character literal".into(),
            TokenKind::Keyword(k) => format!("'{k}'"),
            TokenKind::Op(o) | TokenKind::Punct(o) => format!("'{o}'"),
            TokenKind::Eof => "end of input".into(),
        }
    }

    /// Keyword, operator or punctuation text.
    pub fn symbol(&self) -> Option<&'static str> {
        match self {
            TokenKind::Keyword(s) | TokenKind::Op(s) | TokenKind::Punct(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub lexeme: String,
    pub span: Span,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{message}")]
pub struct LexError {
    pub span: Span,
    pub message: String,
}

fn is_ident_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'\''
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    file: FileId,
}

impl<'a> Lexer<'a> {
    fn err(&self, start: usize, message: impl Into<String>) -> LexError {
        LexError { span: Span::new(self.file, start, self.pos.max(start)), message: message.into() }
    }

    fn peek(&self, k: usize) -> Option<u8> {
        self.src.get(self.pos + k).copied()
    }

    fn skip_trivia(&mut self) -> Result<(), LexError> {
        loop {
            match self.peek(0) {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'(') if self.peek(1) == Some(b'*') => {
                    let start = self.pos;
                    self.pos += 2;
                    let mut depth = 1;
                    while depth > 0 {
                        match (self.peek(0), self.peek(1)) {
                            (None, _) => return Err(self.err(start, "unterminated comment")),
                            (Some(b'('), Some(b'*')) => {
                                depth += 1;
                                self.pos += 2;
                            }
                            (Some(b'*'), Some(b')')) => {
                                depth -= 1;
                                self.pos += 2;
                            }
                            _ => self.pos += 1,
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    /// One escape sequence after a backslash; `pos` is on the backslash.
    fn escape(&mut self, start: usize) -> Result<u8, LexError> {
        self.pos += 1;
        let c = self.peek(0).ok_or_else(|| self.err(start, "unterminated literal"))?;
        self.pos += 1;
        Ok(match c {
            b'n' => b'\n',
            b't' => b'\t',
            b'r' => b'\r',
            b'\\' => b'\\',
            b'"' => b'"',
            b'\'' => b'\'',
            b'x' => {
                let hex = |c: Option<u8>| c.and_then(|c| (c as char).to_digit(16));
                match (hex(self.peek(0)), hex(self.peek(1))) {
                    (Some(h), Some(l)) => {
                        self.pos += 2;
                        (h * 16 + l) as u8
                    }
                    _ => return Err(self.err(start, "bad \\x escape")),
                }
            }
            _ => return Err(self.err(start, "unknown escape sequence")),
        })
    }

    fn next_token(&mut self) -> Result<Token, LexError> {
        self.skip_trivia()?;
        let start = self.pos;
        let Some(c) = self.peek(0) else {
            return Ok(self.token(TokenKind::Eof, start));
        };
        let kind = if c.is_ascii_digit() {
            while self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
            let n = text.parse::<i64>().map_err(|_| self.err(start, "integer literal overflow"))?;
            TokenKind::Int(n)
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while self.peek(0).is_some_and(is_ident_char) {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
            if text == "_" {
                TokenKind::Punct("_")
            } else if let Some(kw) = KEYWORDS.iter().find(|k| **k == text) {
                TokenKind::Keyword(kw)
            } else if text == "mod" {
                TokenKind::Op("mod")
            } else if c.is_ascii_uppercase() {
                TokenKind::UIdent(text)
            } else {
                TokenKind::Ident(text)
            }
        } else if c == b'"' {
            self.pos += 1;
            let mut bytes = Vec::new();
            loop {
                match self.peek(0) {
                    None => return Err(self.err(start, "unterminated string literal")),
                    Some(b'"') => {
                        self.pos += 1;
                        break;
                    }
                    Some(b'\\') => bytes.push(self.escape(start)?),
                    Some(c) => {
                        bytes.push(c);
                        self.pos += 1;
                    }
                }
            }
            TokenKind::Str(bytes)
        } else if c == b'\'' {
            match (self.peek(1), self.peek(2)) {
                (Some(b'\\'), _) => {
                    self.pos += 1;
                    let b = self.escape(start)?;
                    if self.peek(0) != Some(b'\'') {
                        return Err(self.err(start, "unterminated character literal"));
                    }
                    self.pos += 1;
                    TokenKind::Char(b)
                }
                (Some(ch), Some(b'\'')) => {
                    self.pos += 3;
                    TokenKind::Char(ch)
                }
                (Some(ch), _) if ch.is_ascii_alphabetic() || ch == b'_' => {
                    self.pos += 1;
                    while self.peek(0).is_some_and(is_ident_char) {
                        self.pos += 1;
                    }
                    let name = std::str::from_utf8(&self.src[start + 1..self.pos]).unwrap();
                    TokenKind::TyVar(name.to_string())
                }
                _ => return Err(self.err(start, "bad character literal")),
            }
        } else {
            let rest = &self.src[self.pos..];
            let Some(sym) = SYMBOLS.iter().find(|s| rest.starts_with(s.as_bytes())) else {
                self.pos += 1;
                return Err(self.err(start, format!("illegal character {:?}", c as char)));
            };
            self.pos += sym.len();
            if OPERATORS.contains(sym) {
                TokenKind::Op(sym)
            } else {
                TokenKind::Punct(sym)
            }
        };
        Ok(self.token(kind, start))
    }

    fn token(&self, kind: TokenKind, start: usize) -> Token {
        Token {
            kind,
            lexeme: String::from_utf8_lossy(&self.src[start..self.pos]).into_owned(),
            span: Span::new(self.file, start, self.pos),
        }
    }
}

/// Tokenize `source`; the result always ends with an `Eof` token.
pub fn lex(source: &[u8], file: FileId) -> Result<Vec<Token>, LexError> {
    let mut lexer = Lexer { src: source, pos: 0, file };
    let mut out = Vec::new();
    loop {
        let tok = lexer.next_token()?;
        let eof = tok.kind == TokenKind::Eof;
        out.push(tok);
        if eof {
            return Ok(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<TokenKind> {
        lex(src.as_bytes(), FileId(0)).unwrap().into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn let_binding() {
        assert_eq!(
            kinds("let x = 1"),
            vec![
                TokenKind::Keyword("let"),
                TokenKind::Ident("x".into()),
                TokenKind::Op("="),
                TokenKind::Int(1),
                TokenKind::Eof
            ]
        );
    }

    #[test]
    fn nested_comments() {
        assert_eq!(kinds("(* a (* b *) c *)1"), vec![TokenKind::Int(1), TokenKind::Eof]);
    }

    #[test]
    fn string_escapes() {
        assert_eq!(kinds("\"ab\\n\""), vec![TokenKind::Str(vec![0x61, 0x62, 0x0A]), TokenKind::Eof]);
        assert_eq!(kinds("\"\\x41\\t\\\\\\\"\\r\""), vec![TokenKind::Str(b"A\t\\\"\r".to_vec()), TokenKind::Eof]);
    }

    #[test]
    fn chars_and_tyvars() {
        assert_eq!(
            kinds("'a' '\\n' 'a"),
            vec![TokenKind::Char(b'a'), TokenKind::Char(b'\n'), TokenKind::TyVar("a".into()), TokenKind::Eof]
        );
    }

    #[test]
    fn longest_match_symbols() {
        assert_eq!(
            kinds("a::b <= c <- d -> e"),
            vec![
                TokenKind::Ident("a".into()),
                TokenKind::Op("::"),
                TokenKind::Ident("b".into()),
                TokenKind::Op("<="),
                TokenKind::Ident("c".into()),
                TokenKind::Op("<-"),
                TokenKind::Ident("d".into()),
                TokenKind::Punct("->"),
                TokenKind::Ident("e".into()),
                TokenKind::Eof
            ]
        );
    }

    #[test]
    fn errors() {
        assert!(lex(b"\"abc", FileId(0)).is_err());
        assert!(lex(b"(* never closed", FileId(0)).is_err());
        assert!(lex(b"99999999999999999999", FileId(0)).is_err());
        let e = lex(b"let # = 1", FileId(0)).unwrap_err();
        assert_eq!(e.span.start, 4);
    }

    #[test]
    fn spans_non_decreasing() {
        let toks = lex(b"let f x = (* c *) x + 1 in f", FileId(0)).unwrap();
        for w in toks.windows(2) {
            assert!(w[0].span.end <= w[1].span.start);
        }
    }
}
