//! Reference incremental checker for MiniLang.
//!
//! MiniLang is a small block-scoped, statically typed statement language:
//!
//! ```text
//! let <id>: <type> = <expr>;
//! <id> = <expr>;
//! if <expr> { <stmts> }
//! rec <Id> { <field>: <type>; ... }
//! // line comment
//! ```
//!
//! with types `int`, `str` and `bool`, and expressions built from integer and
//! string literals, identifiers, `+` (int+int, str+str) and `==` (equal
//! operand types, yields bool).
//!
//! Two independent implementations live here. [`ActiveSession`] consumes
//! input incrementally, blocks when a construct is incomplete, and snapshots
//! itself at safe boundaries. [`batch_check`] parses a complete source in one
//! recursive-descent pass and serves as the oracle for the streaming path.

mod batch;
mod host;
mod lexer;
pub mod server;
mod session;
pub mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::proto::{Msg, Offset};

pub use batch::{batch_check, BatchOutcome};
pub use host::{checkpoint_chan, parse_chan, CheckerHost, HostError};
pub use session::{ActiveSession, CheckerState, CheckpointPolicy, SessionEvent};

/// Fallback checkpoint interval when no tuned value is configured.
pub const DEFAULT_INTERVAL: u64 = 256;

/// Kind of safe boundary reported in a progress event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Prologue,
    LetStmt,
    AssignStmt,
    IfOpen,
    IfClose,
    RecField,
    RecClose,
    Eos,
}

impl Boundary {
    pub fn as_str(self) -> &'static str {
        match self {
            Boundary::Prologue => "prologue",
            Boundary::LetStmt => "let_stmt",
            Boundary::AssignStmt => "assign_stmt",
            Boundary::IfOpen => "if_open",
            Boundary::IfClose => "if_close",
            Boundary::RecField => "rec_field",
            Boundary::RecClose => "rec_close",
            Boundary::Eos => "eos",
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    SyntaxError,
    UndeclaredIdentifier,
    TypeMismatch,
    Redeclaration,
    UnknownType,
    DuplicateField,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::SyntaxError => "syntax_error",
            ErrorKind::UndeclaredIdentifier => "undeclared_identifier",
            ErrorKind::TypeMismatch => "type_mismatch",
            ErrorKind::Redeclaration => "redeclaration",
            ErrorKind::UnknownType => "unknown_type",
            ErrorKind::DuplicateField => "duplicate_field",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A language error: offset of the offending token's first byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckError {
    pub off: Offset,
    pub kind: ErrorKind,
    pub diag: String,
}

impl CheckError {
    pub(crate) fn new(off: Offset, kind: ErrorKind, diag: impl Into<String>) -> Self {
        CheckError { off, kind, diag: diag.into() }
    }

    pub fn to_msg(&self) -> Msg {
        Msg::error(self.off, self.kind.as_str(), self.diag.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ty {
    Int,
    Str,
    Bool,
}

impl Ty {
    pub(crate) fn from_name(name: &str) -> Option<Ty> {
        match name {
            "int" => Some(Ty::Int),
            "str" => Some(Ty::Str),
            "bool" => Some(Ty::Bool),
            _ => None,
        }
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ty::Int => "int",
            Ty::Str => "str",
            Ty::Bool => "bool",
        })
    }
}

/// What a name in scope refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binding {
    Var(Ty),
    Record,
}

pub(crate) const KEYWORDS: [&str; 3] = ["let", "if", "rec"];

pub(crate) fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

pub(crate) fn is_ident_continue(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

pub(crate) fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n')
}

// Diagnostic texts shared by both implementations so their output reads the same.
pub(crate) mod diag {
    use super::Ty;

    pub fn undeclared(name: &str) -> String {
        format!("use of undeclared identifier {name}")
    }

    pub fn not_a_variable(name: &str) -> String {
        format!("{name} names a record, not a variable")
    }

    pub fn redeclared(name: &str) -> String {
        format!("redeclaration of {name} in the same scope")
    }

    pub fn unknown_type(name: &str) -> String {
        format!("unknown type {name}")
    }

    pub fn init_mismatch(declared: Ty, found: Ty) -> String {
        format!("cannot initialize a {declared} variable with a {found} value")
    }

    pub fn assign_mismatch(declared: Ty, found: Ty) -> String {
        format!("cannot assign a {found} value to a {declared} variable")
    }

    pub fn cond_mismatch(found: Ty) -> String {
        format!("condition must be bool, found {found}")
    }

    pub fn plus_mismatch(left: Ty, right: Ty) -> String {
        format!("invalid operands to +: {left} and {right}")
    }

    pub fn eq_mismatch(left: Ty, right: Ty) -> String {
        format!("cannot compare {left} with {right}")
    }

    pub fn duplicate_field(field: &str, record: &str) -> String {
        format!("duplicate field {field} in record {record}")
    }

    pub fn expected(what: &str, found: &str) -> String {
        format!("expected {what}, found {found}")
    }

    pub fn unclosed() -> String {
        "unclosed block at end of input".to_string()
    }

    pub fn stray_close() -> String {
        "unmatched }".to_string()
    }

    pub fn bad_char(b: u8) -> String {
        if b.is_ascii_graphic() {
            format!("unexpected character '{}'", b as char)
        } else {
            format!("unexpected byte 0x{b:02x}")
        }
    }

    pub fn unterminated_string() -> String {
        "unterminated string literal".to_string()
    }
}
