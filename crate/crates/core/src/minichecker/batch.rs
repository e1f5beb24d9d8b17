//! Whole-source checking in a single recursive-descent pass.
//!
//! This path shares no parsing code with the incremental session: it
//! tokenizes the complete source up front and descends into blocks
//! recursively. Tests and the acceptance suite compare the two.

use std::collections::HashMap;

use serde::Serialize;

use super::{diag, is_ident_continue, is_ident_start, is_space, Boundary, CheckError, ErrorKind, Ty};
use crate::proto::Offset;

/// Result of checking a complete program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchOutcome {
    /// Every boundary reached, in order. Ends with `eos` when accepted.
    pub boundaries: Vec<(Offset, Boundary)>,
    pub error: Option<CheckError>,
}

impl BatchOutcome {
    pub fn accepted(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum T {
    Word(String),
    Int,
    Str,
    Punct(&'static str),
    Bad(CheckError),
    End,
}

#[derive(Debug, Clone)]
struct Lexeme {
    t: T,
    at: Offset,
}

struct Scan {
    lexemes: Vec<Lexeme>,
    /// End of the leading comment block, if the source starts with comments.
    prologue: Option<Offset>,
}

fn scan(src: &[u8]) -> Scan {
    let mut lexemes = Vec::new();
    let mut prologue = None;
    let mut leading = true;
    let mut i = 0;
    let n = src.len();
    loop {
        // whitespace and comments
        while i < n {
            if is_space(src[i]) {
                i += 1;
            } else if src[i] == b'/' && i + 1 < n && src[i + 1] == b'/' {
                match src[i..].iter().position(|&b| b == b'\n') {
                    Some(nl) => i += nl + 1,
                    None => i = n,
                }
                if leading {
                    prologue = Some(i as Offset);
                }
            } else {
                break;
            }
        }
        leading = false;
        let at = i as Offset;
        if i == n {
            lexemes.push(Lexeme { t: T::End, at });
            break;
        }
        let b = src[i];
        let t = if is_ident_start(b) {
            let start = i;
            while i < n && is_ident_continue(src[i]) {
                i += 1;
            }
            T::Word(String::from_utf8_lossy(&src[start..i]).into_owned())
        } else if b.is_ascii_digit() {
            while i < n && src[i].is_ascii_digit() {
                i += 1;
            }
            T::Int
        } else if b == b'"' {
            let mut j = i + 1;
            let closed = loop {
                if j >= n || src[j] == b'\n' {
                    break false;
                }
                if src[j] == b'"' {
                    break true;
                }
                if src[j] == b'\\' {
                    if j + 1 >= n || src[j + 1] == b'\n' {
                        break false;
                    }
                    j += 2;
                } else {
                    j += 1;
                }
            };
            if !closed {
                T::Bad(CheckError::new(at, ErrorKind::SyntaxError, diag::unterminated_string()))
            } else {
                i = j + 1;
                T::Str
            }
        } else if b == b'=' && i + 1 < n && src[i + 1] == b'=' {
            i += 2;
            T::Punct("==")
        } else {
            let p = match b {
                b':' => Some(":"),
                b';' => Some(";"),
                b'=' => Some("="),
                b'+' => Some("+"),
                b'{' => Some("{"),
                b'}' => Some("}"),
                _ => None,
            };
            match p {
                Some(p) => {
                    i += 1;
                    T::Punct(p)
                }
                None => T::Bad(CheckError::new(at, ErrorKind::SyntaxError, diag::bad_char(b))),
            }
        };
        let stop = matches!(t, T::Bad(_));
        lexemes.push(Lexeme { t, at });
        if stop {
            break;
        }
    }
    Scan { lexemes, prologue }
}

fn describe(t: &T) -> String {
    match t {
        T::Word(w) if matches!(w.as_str(), "let" | "if" | "rec") => format!("'{w}'"),
        T::Word(w) => format!("identifier {w}"),
        T::Int => "integer literal".into(),
        T::Str => "string literal".into(),
        T::Punct(p) => format!("'{p}'"),
        T::Bad(_) => "invalid token".into(),
        T::End => "end of input".into(),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Entry {
    Var(Ty),
    Record,
}

struct Checker {
    lexemes: Vec<Lexeme>,
    pos: usize,
    scopes: Vec<HashMap<String, Entry>>,
    boundaries: Vec<(Offset, Boundary)>,
}

type R<T> = Result<T, CheckError>;

impl Checker {
    fn peek(&self) -> R<&Lexeme> {
        let lx = &self.lexemes[self.pos];
        match &lx.t {
            T::Bad(e) => Err(e.clone()),
            _ => Ok(lx),
        }
    }

    fn bump(&mut self) -> R<Lexeme> {
        let lx = self.peek()?.clone();
        if lx.t != T::End {
            self.pos += 1;
        }
        Ok(lx)
    }

    fn syntax<X>(lx: &Lexeme, what: &str) -> R<X> {
        Err(CheckError::new(lx.at, ErrorKind::SyntaxError, diag::expected(what, &describe(&lx.t))))
    }

    fn punct(&mut self, p: &'static str) -> R<Offset> {
        let lx = self.bump()?;
        if lx.t == T::Punct(p) {
            Ok(lx.at + p.len() as Offset)
        } else {
            Self::syntax(&lx, &format!("'{p}'"))
        }
    }

    fn name(&mut self) -> R<(String, Offset)> {
        let lx = self.bump()?;
        match lx.t {
            T::Word(ref w) if !is_keyword(w) => Ok((w.clone(), lx.at)),
            _ => Self::syntax(&lx, "identifier"),
        }
    }

    fn ty(&mut self) -> R<Ty> {
        let lx = self.bump()?;
        match lx.t {
            T::Word(ref w) if !is_keyword(w) => Ty::from_name(w)
                .ok_or_else(|| CheckError::new(lx.at, ErrorKind::UnknownType, diag::unknown_type(w))),
            _ => Self::syntax(&lx, "type"),
        }
    }

    fn resolve(&self, name: &str) -> Option<Entry> {
        for scope in self.scopes.iter().rev() {
            if let Some(e) = scope.get(name) {
                return Some(*e);
            }
        }
        None
    }

    fn variable(&self, name: &str, at: Offset) -> R<Ty> {
        match self.resolve(name) {
            Some(Entry::Var(t)) => Ok(t),
            Some(Entry::Record) => {
                Err(CheckError::new(at, ErrorKind::UndeclaredIdentifier, diag::not_a_variable(name)))
            }
            None => Err(CheckError::new(at, ErrorKind::UndeclaredIdentifier, diag::undeclared(name))),
        }
    }

    fn fresh_name(&self, name: &str, at: Offset) -> R<()> {
        if self.scopes.last().unwrap().contains_key(name) {
            Err(CheckError::new(at, ErrorKind::Redeclaration, diag::redeclared(name)))
        } else {
            Ok(())
        }
    }

    /// Statements until `}` (nested) or end of input (top level).
    fn block(&mut self, nested: bool) -> R<()> {
        loop {
            let lx = self.peek()?.clone();
            match &lx.t {
                T::End if nested => {
                    return Err(CheckError::new(lx.at, ErrorKind::SyntaxError, diag::unclosed()))
                }
                T::End => return Ok(()),
                T::Punct("}") if nested => {
                    self.bump()?;
                    self.boundaries.push((lx.at + 1, Boundary::IfClose));
                    return Ok(());
                }
                T::Punct("}") => {
                    return Err(CheckError::new(lx.at, ErrorKind::SyntaxError, diag::stray_close()))
                }
                T::Word(w) if w == "let" => self.let_stmt()?,
                T::Word(w) if w == "if" => self.if_stmt()?,
                T::Word(w) if w == "rec" => self.rec_decl()?,
                T::Word(w) => {
                    let w = w.clone();
                    self.bump()?;
                    self.assign_stmt(&w, lx.at)?
                }
                _ => return Self::syntax(&lx, "statement"),
            }
        }
    }

    fn let_stmt(&mut self) -> R<()> {
        self.bump()?;
        let (name, at) = self.name()?;
        self.fresh_name(&name, at)?;
        self.punct(":")?;
        let declared = self.ty()?;
        self.punct("=")?;
        let (found, eat) = self.expression()?;
        if found != declared {
            return Err(CheckError::new(eat, ErrorKind::TypeMismatch, diag::init_mismatch(declared, found)));
        }
        let end = self.punct(";")?;
        self.scopes.last_mut().unwrap().insert(name, Entry::Var(declared));
        self.boundaries.push((end, Boundary::LetStmt));
        Ok(())
    }

    fn assign_stmt(&mut self, name: &str, at: Offset) -> R<()> {
        let declared = self.variable(name, at)?;
        self.punct("=")?;
        let (found, eat) = self.expression()?;
        if found != declared {
            return Err(CheckError::new(eat, ErrorKind::TypeMismatch, diag::assign_mismatch(declared, found)));
        }
        let end = self.punct(";")?;
        self.boundaries.push((end, Boundary::AssignStmt));
        Ok(())
    }

    fn if_stmt(&mut self) -> R<()> {
        self.bump()?;
        let (cond, at) = self.expression()?;
        if cond != Ty::Bool {
            return Err(CheckError::new(at, ErrorKind::TypeMismatch, diag::cond_mismatch(cond)));
        }
        let end = self.punct("{")?;
        self.boundaries.push((end, Boundary::IfOpen));
        self.scopes.push(HashMap::new());
        self.block(true)?;
        self.scopes.pop();
        Ok(())
    }

    fn rec_decl(&mut self) -> R<()> {
        self.bump()?;
        let (rec, at) = self.name()?;
        self.fresh_name(&rec, at)?;
        self.punct("{")?;
        self.scopes.last_mut().unwrap().insert(rec.clone(), Entry::Record);
        let mut fields: Vec<(String, Offset)> = Vec::new();
        loop {
            let lx = self.bump()?;
            match lx.t {
                T::Punct("}") => {
                    let mut seen = std::collections::HashSet::new();
                    if let Some((f, off)) = fields.iter().find(|(f, _)| !seen.insert(f.as_str())) {
                        return Err(CheckError::new(
                            *off,
                            ErrorKind::DuplicateField,
                            diag::duplicate_field(f, &rec),
                        ));
                    }
                    self.boundaries.push((lx.at + 1, Boundary::RecClose));
                    return Ok(());
                }
                T::End => return Err(CheckError::new(lx.at, ErrorKind::SyntaxError, diag::unclosed())),
                T::Word(ref w) if !is_keyword(w) => {
                    self.punct(":")?;
                    self.ty()?;
                    let end = self.punct(";")?;
                    fields.push((w.clone(), lx.at));
                    self.boundaries.push((end, Boundary::RecField));
                }
                _ => return Self::syntax(&lx, "field or '}'"),
            }
        }
    }

    fn expression(&mut self) -> R<(Ty, Offset)> {
        let (mut left, start) = self.operand_sum()?;
        while self.peek()?.t == T::Punct("==") {
            self.bump()?;
            let (right, at) = self.operand_sum()?;
            if left != right {
                return Err(CheckError::new(at, ErrorKind::TypeMismatch, diag::eq_mismatch(left, right)));
            }
            left = Ty::Bool;
        }
        Ok((left, start))
    }

    fn operand_sum(&mut self) -> R<(Ty, Offset)> {
        let (left, start) = self.operand()?;
        while self.peek()?.t == T::Punct("+") {
            self.bump()?;
            let (right, at) = self.operand()?;
            let ok = left == right && matches!(left, Ty::Int | Ty::Str);
            if !ok {
                return Err(CheckError::new(at, ErrorKind::TypeMismatch, diag::plus_mismatch(left, right)));
            }
        }
        Ok((left, start))
    }

    fn operand(&mut self) -> R<(Ty, Offset)> {
        let lx = self.bump()?;
        match lx.t {
            T::Int => Ok((Ty::Int, lx.at)),
            T::Str => Ok((Ty::Str, lx.at)),
            T::Word(ref w) if !is_keyword(w) => Ok((self.variable(w, lx.at)?, lx.at)),
            _ => Self::syntax(&lx, "expression"),
        }
    }
}

fn is_keyword(w: &str) -> bool {
    super::KEYWORDS.contains(&w)
}

/// Checks a complete program, returning its boundaries and first error.
pub fn batch_check(source: &str) -> BatchOutcome {
    let Scan { lexemes, prologue } = scan(source.as_bytes());
    let mut c = Checker { lexemes, pos: 0, scopes: vec![HashMap::new()], boundaries: Vec::new() };
    if let Some(end) = prologue {
        c.boundaries.push((end, Boundary::Prologue));
    }
    let result = c.block(false);
    let mut boundaries = c.boundaries;
    let error = match result {
        Ok(()) => {
            boundaries.push((source.len() as Offset, Boundary::Eos));
            None
        }
        Err(e) => Some(e),
    };
    BatchOutcome { boundaries, error }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_program_is_accepted() {
        let out = batch_check("");
        assert!(out.accepted());
        assert_eq!(out.boundaries, vec![(0, Boundary::Eos)]);
    }

    #[test]
    fn redeclaration_at_second_name() {
        let src = "let x: int = 1;\nlet x: str = \"a\";";
        let out = batch_check(src);
        let err = out.error.unwrap();
        assert_eq!(err.kind, ErrorKind::Redeclaration);
        assert_eq!(err.off, 20);
        assert_eq!(out.boundaries, vec![(15, Boundary::LetStmt)]);
    }

    #[test]
    fn duplicate_field_after_both_field_boundaries() {
        let out = batch_check("rec R { a: int; a: str; }");
        assert_eq!(out.boundaries, vec![(15, Boundary::RecField), (23, Boundary::RecField)]);
        let err = out.error.unwrap();
        assert_eq!((err.off, err.kind), (16, ErrorKind::DuplicateField));
    }

    #[test]
    fn shadowing_in_inner_scope_is_allowed() {
        let out = batch_check("let c: bool = 1 == 1;\nif c { let c: int = 2; c = c + 1; }\n");
        assert!(out.accepted(), "{:?}", out.error);
        let cats: Vec<_> = out.boundaries.iter().map(|b| b.1).collect();
        assert_eq!(
            cats,
            vec![
                Boundary::LetStmt,
                Boundary::IfOpen,
                Boundary::LetStmt,
                Boundary::AssignStmt,
                Boundary::IfClose,
                Boundary::Eos
            ]
        );
    }

    #[test]
    fn type_errors() {
        let e = batch_check("let b: bool = 1 + \"x\";").error.unwrap();
        assert_eq!((e.off, e.kind), (18, ErrorKind::TypeMismatch));
        let e = batch_check("let b: bool = 1 == 1; let c: bool = b + b;").error.unwrap();
        assert_eq!((e.off, e.kind), (40, ErrorKind::TypeMismatch));
        let e = batch_check("if 1 { }").error.unwrap();
        assert_eq!((e.off, e.kind), (3, ErrorKind::TypeMismatch));
        let e = batch_check("let q: float = 1;").error.unwrap();
        assert_eq!((e.off, e.kind), (7, ErrorKind::UnknownType));
    }

    #[test]
    fn syntax_errors() {
        let e = batch_check("let x: int = 1").error.unwrap();
        assert_eq!((e.off, e.kind), (14, ErrorKind::SyntaxError));
        let e = batch_check("}").error.unwrap();
        assert_eq!((e.off, e.kind), (0, ErrorKind::SyntaxError));
        let e = batch_check("let x: int = 1; @").error.unwrap();
        assert_eq!((e.off, e.kind), (16, ErrorKind::SyntaxError));
        let e = batch_check("let let: int = 1;").error.unwrap();
        assert_eq!((e.off, e.kind), (4, ErrorKind::SyntaxError));
    }

    #[test]
    fn record_name_is_not_a_value() {
        let e = batch_check("rec P { x: int; }\nlet y: int = P;").error.unwrap();
        assert_eq!(e.kind, ErrorKind::UndeclaredIdentifier);
    }

    #[test]
    fn comment_only_program() {
        let out = batch_check("// just a comment");
        assert_eq!(out.boundaries, vec![(17, Boundary::Prologue), (17, Boundary::Eos)]);
    }
}
