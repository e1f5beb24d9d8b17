//! Resumable lexer over the pending input window of an active session.
//!
//! The window may end mid-token. Unless the stream has been closed, any
//! attempt to read past the window yields [`Stop::NeedMore`] instead of a
//! token or an error, so callers can discard partial work and retry once
//! more bytes arrive.

use super::{diag, is_ident_continue, is_ident_start, is_space, CheckError, ErrorKind};
use crate::proto::Offset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Tok {
    Ident(String),
    Let,
    If,
    Rec,
    Int,
    Str,
    Colon,
    Semi,
    Assign,
    EqEq,
    Plus,
    LBrace,
    RBrace,
    Eof,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Ident(name) => format!("identifier {name}"),
            Tok::Let => "'let'".into(),
            Tok::If => "'if'".into(),
            Tok::Rec => "'rec'".into(),
            Tok::Int => "integer literal".into(),
            Tok::Str => "string literal".into(),
            Tok::Colon => "':'".into(),
            Tok::Semi => "';'".into(),
            Tok::Assign => "'='".into(),
            Tok::EqEq => "'=='".into(),
            Tok::Plus => "'+'".into(),
            Tok::LBrace => "'{'".into(),
            Tok::RBrace => "'}'".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub off: Offset,
}

/// Why a unit parse did not complete.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Stop {
    NeedMore,
    Fail(CheckError),
}

impl From<CheckError> for Stop {
    fn from(e: CheckError) -> Self {
        Stop::Fail(e)
    }
}

pub(crate) type Step<T> = Result<T, Stop>;

/// Leading comment block found before the first significant byte.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PrologueScan {
    /// Absolute end of the comment block, if any comment was seen.
    pub end: Option<Offset>,
}

#[derive(Clone)]
pub(crate) struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    base: Offset,
    eos: bool,
}

impl<'a> Lexer<'a> {
    pub(crate) fn new(src: &'a [u8], base: Offset, eos: bool) -> Self {
        Lexer { src, pos: 0, base, eos }
    }

    /// Bytes of the window consumed so far.
    pub(crate) fn consumed(&self) -> usize {
        self.pos
    }

    fn abs(&self, rel: usize) -> Offset {
        self.base + rel as Offset
    }

    fn at(&self, rel: usize) -> Step<Option<u8>> {
        match self.src.get(rel) {
            Some(b) => Ok(Some(*b)),
            None if self.eos => Ok(None),
            None => Err(Stop::NeedMore),
        }
    }

    /// Skips whitespace and comments; returns the position of the next
    /// significant byte and the end of the last comment seen.
    fn scan_trivia(&self, mut p: usize) -> Step<(usize, Option<usize>)> {
        let mut comment_end = None;
        loop {
            match self.at(p)? {
                Some(b) if is_space(b) => p += 1,
                Some(b'/') => {
                    if self.at(p + 1)? != Some(b'/') {
                        return Ok((p, comment_end));
                    }
                    p += 2;
                    loop {
                        match self.at(p)? {
                            Some(b'\n') => {
                                p += 1;
                                break;
                            }
                            Some(_) => p += 1,
                            None => break,
                        }
                    }
                    comment_end = Some(p);
                }
                _ => return Ok((p, comment_end)),
            }
        }
    }

    /// Scans the leading comment block without consuming the token after it.
    pub(crate) fn scan_prologue(&self) -> Step<PrologueScan> {
        let (_, end) = self.scan_trivia(self.pos)?;
        Ok(PrologueScan { end: end.map(|e| self.abs(e)) })
    }

    pub(crate) fn peek(&self) -> Step<Token> {
        self.clone().next()
    }

    pub(crate) fn next(&mut self) -> Step<Token> {
        let (start, _) = self.scan_trivia(self.pos)?;
        let off = self.abs(start);
        let Some(b) = self.at(start)? else {
            self.pos = start;
            return Ok(Token { tok: Tok::Eof, off });
        };
        let (tok, end) = match b {
            b':' => (Tok::Colon, start + 1),
            b';' => (Tok::Semi, start + 1),
            b'+' => (Tok::Plus, start + 1),
            b'{' => (Tok::LBrace, start + 1),
            b'}' => (Tok::RBrace, start + 1),
            b'=' => {
                if self.at(start + 1)? == Some(b'=') {
                    (Tok::EqEq, start + 2)
                } else {
                    (Tok::Assign, start + 1)
                }
            }
            b'"' => (Tok::Str, self.string_end(start)?),
            b if b.is_ascii_digit() => {
                let mut p = start + 1;
                while matches!(self.at(p)?, Some(d) if d.is_ascii_digit()) {
                    p += 1;
                }
                (Tok::Int, p)
            }
            b if is_ident_start(b) => {
                let mut p = start + 1;
                while matches!(self.at(p)?, Some(c) if is_ident_continue(c)) {
                    p += 1;
                }
                let word = std::str::from_utf8(&self.src[start..p]).expect("ascii identifier");
                let tok = match word {
                    "let" => Tok::Let,
                    "if" => Tok::If,
                    "rec" => Tok::Rec,
                    _ => Tok::Ident(word.to_string()),
                };
                (tok, p)
            }
            other => {
                return Err(CheckError::new(off, ErrorKind::SyntaxError, diag::bad_char(other)).into())
            }
        };
        self.pos = end;
        Ok(Token { tok, off })
    }

    fn string_end(&self, start: usize) -> Step<usize> {
        let unterminated =
            || Stop::Fail(CheckError::new(self.abs(start), ErrorKind::SyntaxError, diag::unterminated_string()));
        let mut p = start + 1;
        loop {
            match self.at(p)? {
                Some(b'"') => return Ok(p + 1),
                Some(b'\\') => match self.at(p + 1)? {
                    Some(b'\n') | None => return Err(unterminated()),
                    Some(_) => p += 2,
                },
                Some(b'\n') | None => return Err(unterminated()),
                Some(_) => p += 1,
            }
        }
    }
}
