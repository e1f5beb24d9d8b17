//! Active checker sessions: incremental, unit-at-a-time checking.
//!
//! Input is consumed one *unit* at a time: a statement, a block opener or
//! closer, a record field, the leading comment block, or end of input. A unit
//! is parsed against an immutable view of the state and yields an effect that
//! is applied only once the whole unit is available. When the pending window
//! ends inside a unit the partial parse is discarded and the session waits;
//! the state therefore always sits exactly on the last completed unit.

use std::collections::HashMap;

use super::lexer::{Lexer, Step, Stop, Tok, Token};
use super::{diag, Binding, Boundary, CheckError, ErrorKind, Ty, DEFAULT_INTERVAL};
use crate::proto::{Offset, SessionId};

/// When an active session materializes checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointPolicy {
    /// Minimum accepted-byte advance between checkpoints. Must be positive.
    pub interval: u64,
    /// Checkpoint right after the first progress event.
    pub prologue: bool,
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        CheckpointPolicy { interval: DEFAULT_INTERVAL, prologue: true }
    }
}

impl CheckpointPolicy {
    pub fn new(interval: u64, prologue: bool) -> Self {
        assert!(interval > 0, "checkpoint interval must be positive");
        CheckpointPolicy { interval, prologue }
    }

    /// Whether a checkpoint is due at `accepted` given the previous one.
    pub fn due(&self, accepted: Offset, last: Option<Offset>) -> bool {
        match last {
            Some(l) if l >= accepted => false,
            Some(l) => accepted - l >= self.interval,
            None => self.prologue || accepted >= self.interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Construct {
    If,
    Rec { name: String, fields: Vec<(String, Offset)> },
}

/// Complete checker state. Cloning it yields an independent snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckerState {
    /// Absolute offset of `pending[0]`; everything before it is consumed.
    cursor: Offset,
    pending: Vec<u8>,
    scopes: Vec<HashMap<String, Binding>>,
    constructs: Vec<Construct>,
    in_prologue: bool,
    last_accepted: Offset,
    last_checkpoint: Option<Offset>,
    checkpoints: u64,
    eos: bool,
    halted: bool,
}

impl Default for CheckerState {
    fn default() -> Self {
        CheckerState {
            cursor: 0,
            pending: Vec::new(),
            scopes: vec![HashMap::new()],
            constructs: Vec::new(),
            in_prologue: true,
            last_accepted: 0,
            last_checkpoint: None,
            checkpoints: 0,
            eos: false,
            halted: false,
        }
    }
}

impl CheckerState {
    pub fn last_accepted(&self) -> Offset {
        self.last_accepted
    }

    pub fn cursor(&self) -> Offset {
        self.cursor
    }

    /// Total bytes received so far.
    pub fn buffered_len(&self) -> Offset {
        self.cursor + self.pending.len() as Offset
    }

    pub fn depth(&self) -> usize {
        self.constructs.len()
    }

    pub fn checkpoints_taken(&self) -> u64 {
        self.checkpoints
    }

    /// True once the session has reported an error or end of stream.
    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// State as it stood at the last accepted offset, without pending input
    /// and with the input stream still open.
    fn snapshot(&self) -> CheckerState {
        debug_assert_eq!(self.cursor, self.last_accepted);
        CheckerState { pending: Vec::new(), eos: false, ..self.clone() }
    }

    fn lookup(&self, name: &str) -> Option<Binding> {
        self.scopes.iter().rev().find_map(|s| s.get(name).copied())
    }

    fn declared_here(&self, name: &str) -> bool {
        self.scopes.last().is_some_and(|s| s.contains_key(name))
    }

    fn apply(&mut self, effect: Effect) {
        match effect {
            Effect::None => {}
            Effect::Declare(name, b) => {
                self.scopes.last_mut().expect("scope").insert(name, b);
            }
            Effect::OpenIf => {
                self.constructs.push(Construct::If);
                self.scopes.push(HashMap::new());
            }
            Effect::OpenRec(name) => {
                self.scopes.last_mut().expect("scope").insert(name.clone(), Binding::Record);
                self.constructs.push(Construct::Rec { name, fields: Vec::new() });
                self.scopes.push(HashMap::new());
            }
            Effect::Field(name, off) => match self.constructs.last_mut() {
                Some(Construct::Rec { fields, .. }) => fields.push((name, off)),
                _ => unreachable!("field outside record"),
            },
            Effect::Close => {
                self.constructs.pop();
                self.scopes.pop();
            }
        }
    }
}

/// A unit's effect on the state, applied only once the unit is complete.
#[derive(Debug)]
enum Effect {
    None,
    Declare(String, Binding),
    OpenIf,
    OpenRec(String),
    Field(String, Offset),
    Close,
}

struct Unit {
    effect: Effect,
    boundary: Option<Boundary>,
}

/// Events produced by an active session, in stream order.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    Progress { off: Offset, cat: Boundary },
    Error(CheckError),
    /// A snapshot taken at `off`, immediately after the progress event there.
    Checkpoint { off: Offset, state: Box<CheckerState> },
}

/// One active checker session.
#[derive(Debug, Clone)]
pub struct ActiveSession {
    id: SessionId,
    parent: Option<SessionId>,
    chan: String,
    policy: CheckpointPolicy,
    state: CheckerState,
}

impl ActiveSession {
    pub fn new(id: SessionId, policy: CheckpointPolicy) -> Self {
        ActiveSession {
            id,
            parent: None,
            chan: String::new(),
            policy,
            state: CheckerState::default(),
        }
    }

    pub(crate) fn from_snapshot(
        id: SessionId,
        parent: SessionId,
        chan: String,
        policy: CheckpointPolicy,
        state: CheckerState,
    ) -> Self {
        ActiveSession { id, parent: Some(parent), chan, policy, state }
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn parent(&self) -> Option<SessionId> {
        self.parent
    }

    pub fn chan(&self) -> &str {
        &self.chan
    }

    pub fn state(&self) -> &CheckerState {
        &self.state
    }

    pub fn is_halted(&self) -> bool {
        self.state.halted
    }

    /// Appends `delta` and checks every unit that is now complete. With
    /// `eos`, the input is closed and end-of-stream validation runs.
    pub fn submit(&mut self, delta: &[u8], eos: bool) -> Vec<SessionEvent> {
        let mut events = Vec::new();
        if self.state.halted || self.state.eos {
            return events;
        }
        self.state.pending.extend_from_slice(delta);
        self.state.eos = eos;
        self.pump(&mut events);
        events
    }

    fn pump(&mut self, events: &mut Vec<SessionEvent>) {
        let st = &mut self.state;
        while !st.halted {
            let lx = Lexer::new(&st.pending, st.cursor, st.eos);
            if st.in_prologue {
                match lx.scan_prologue() {
                    Err(_) => return,
                    Ok(scan) => {
                        st.in_prologue = false;
                        if let Some(end) = scan.end {
                            let used = (end - st.cursor) as usize;
                            st.pending.drain(..used);
                            st.cursor = end;
                            Self::accept(st, &self.policy, end, Boundary::Prologue, events);
                        }
                        continue;
                    }
                }
            }
            let mut lx = lx;
            let step = match st.constructs.last() {
                Some(Construct::Rec { .. }) => record_unit(&mut lx, st),
                _ => statement_unit(&mut lx, st),
            };
            match step {
                Err(Stop::NeedMore) => return,
                Err(Stop::Fail(err)) => {
                    st.halted = true;
                    events.push(SessionEvent::Error(err));
                }
                Ok(unit) => {
                    let used = lx.consumed();
                    st.pending.drain(..used);
                    st.cursor += used as Offset;
                    st.apply(unit.effect);
                    match unit.boundary {
                        Some(Boundary::Eos) => {
                            st.halted = true;
                            st.last_accepted = st.cursor;
                            events.push(SessionEvent::Progress { off: st.cursor, cat: Boundary::Eos });
                        }
                        Some(cat) => {
                            let off = st.cursor;
                            Self::accept(st, &self.policy, off, cat, events);
                        }
                        None => {}
                    }
                }
            }
        }
    }

    fn accept(
        st: &mut CheckerState,
        policy: &CheckpointPolicy,
        off: Offset,
        cat: Boundary,
        events: &mut Vec<SessionEvent>,
    ) {
        st.last_accepted = off;
        events.push(SessionEvent::Progress { off, cat });
        if policy.due(off, st.last_checkpoint) {
            st.last_checkpoint = Some(off);
            st.checkpoints += 1;
            events.push(SessionEvent::Checkpoint { off, state: Box::new(st.snapshot()) });
        }
    }
}

fn fail<T>(off: Offset, kind: ErrorKind, diag: String) -> Step<T> {
    Err(Stop::Fail(CheckError::new(off, kind, diag)))
}

fn unexpected<T>(tok: &Token, what: &str) -> Step<T> {
    fail(tok.off, ErrorKind::SyntaxError, diag::expected(what, &tok.tok.describe()))
}

fn expect(lx: &mut Lexer<'_>, want: Tok, what: &str) -> Step<Token> {
    let t = lx.next()?;
    if t.tok == want {
        Ok(t)
    } else {
        unexpected(&t, what)
    }
}

fn ident(lx: &mut Lexer<'_>) -> Step<(String, Offset)> {
    let t = lx.next()?;
    match t.tok {
        Tok::Ident(name) => Ok((name, t.off)),
        _ => unexpected(&t, "identifier"),
    }
}

fn type_name(lx: &mut Lexer<'_>) -> Step<Ty> {
    let t = lx.next()?;
    match &t.tok {
        Tok::Ident(name) => match Ty::from_name(name) {
            Some(ty) => Ok(ty),
            None => fail(t.off, ErrorKind::UnknownType, diag::unknown_type(name)),
        },
        _ => unexpected(&t, "type"),
    }
}

fn statement_unit(lx: &mut Lexer<'_>, st: &CheckerState) -> Step<Unit> {
    let t = lx.next()?;
    match t.tok {
        Tok::Eof => {
            if st.constructs.is_empty() {
                Ok(Unit { effect: Effect::None, boundary: Some(Boundary::Eos) })
            } else {
                fail(t.off, ErrorKind::SyntaxError, diag::unclosed())
            }
        }
        Tok::Let => {
            let (name, name_off) = ident(lx)?;
            if st.declared_here(&name) {
                return fail(name_off, ErrorKind::Redeclaration, diag::redeclared(&name));
            }
            expect(lx, Tok::Colon, "':'")?;
            let declared = type_name(lx)?;
            expect(lx, Tok::Assign, "'='")?;
            let (found, at) = expr(lx, st)?;
            if found != declared {
                return fail(at, ErrorKind::TypeMismatch, diag::init_mismatch(declared, found));
            }
            expect(lx, Tok::Semi, "';'")?;
            Ok(Unit {
                effect: Effect::Declare(name, Binding::Var(declared)),
                boundary: Some(Boundary::LetStmt),
            })
        }
        Tok::Ident(name) => {
            let declared = match st.lookup(&name) {
                Some(Binding::Var(ty)) => ty,
                Some(Binding::Record) => {
                    return fail(t.off, ErrorKind::UndeclaredIdentifier, diag::not_a_variable(&name))
                }
                None => return fail(t.off, ErrorKind::UndeclaredIdentifier, diag::undeclared(&name)),
            };
            expect(lx, Tok::Assign, "'='")?;
            let (found, at) = expr(lx, st)?;
            if found != declared {
                return fail(at, ErrorKind::TypeMismatch, diag::assign_mismatch(declared, found));
            }
            expect(lx, Tok::Semi, "';'")?;
            Ok(Unit { effect: Effect::None, boundary: Some(Boundary::AssignStmt) })
        }
        Tok::If => {
            let (found, at) = expr(lx, st)?;
            if found != Ty::Bool {
                return fail(at, ErrorKind::TypeMismatch, diag::cond_mismatch(found));
            }
            expect(lx, Tok::LBrace, "'{'")?;
            Ok(Unit { effect: Effect::OpenIf, boundary: Some(Boundary::IfOpen) })
        }
        Tok::Rec => {
            let (name, name_off) = ident(lx)?;
            if st.declared_here(&name) {
                return fail(name_off, ErrorKind::Redeclaration, diag::redeclared(&name));
            }
            expect(lx, Tok::LBrace, "'{'")?;
            Ok(Unit { effect: Effect::OpenRec(name), boundary: None })
        }
        Tok::RBrace if !st.constructs.is_empty() => {
            Ok(Unit { effect: Effect::Close, boundary: Some(Boundary::IfClose) })
        }
        Tok::RBrace => fail(t.off, ErrorKind::SyntaxError, diag::stray_close()),
        _ => unexpected(&t, "statement"),
    }
}

fn record_unit(lx: &mut Lexer<'_>, st: &CheckerState) -> Step<Unit> {
    let Some(Construct::Rec { name: rec_name, fields }) = st.constructs.last() else {
        unreachable!("record unit outside record");
    };
    let t = lx.next()?;
    match t.tok {
        Tok::Ident(name) => {
            expect(lx, Tok::Colon, "':'")?;
            type_name(lx)?;
            expect(lx, Tok::Semi, "';'")?;
            Ok(Unit { effect: Effect::Field(name, t.off), boundary: Some(Boundary::RecField) })
        }
        Tok::RBrace => {
            // Duplicate fields are only diagnosed once the record is complete.
            for (i, (field, off)) in fields.iter().enumerate() {
                if fields[..i].iter().any(|(f, _)| f == field) {
                    return fail(*off, ErrorKind::DuplicateField, diag::duplicate_field(field, rec_name));
                }
            }
            Ok(Unit { effect: Effect::Close, boundary: Some(Boundary::RecClose) })
        }
        Tok::Eof => fail(t.off, ErrorKind::SyntaxError, diag::unclosed()),
        _ => unexpected(&t, "field or '}'"),
    }
}

fn expr(lx: &mut Lexer<'_>, st: &CheckerState) -> Step<(Ty, Offset)> {
    let (mut ty, start) = sum(lx, st)?;
    while lx.peek()?.tok == Tok::EqEq {
        lx.next()?;
        let (rhs, at) = sum(lx, st)?;
        if rhs != ty {
            return fail(at, ErrorKind::TypeMismatch, diag::eq_mismatch(ty, rhs));
        }
        ty = Ty::Bool;
    }
    Ok((ty, start))
}

fn sum(lx: &mut Lexer<'_>, st: &CheckerState) -> Step<(Ty, Offset)> {
    let (ty, start) = primary(lx, st)?;
    while lx.peek()?.tok == Tok::Plus {
        lx.next()?;
        let (rhs, at) = primary(lx, st)?;
        if rhs != ty || ty == Ty::Bool {
            return fail(at, ErrorKind::TypeMismatch, diag::plus_mismatch(ty, rhs));
        }
    }
    Ok((ty, start))
}

fn primary(lx: &mut Lexer<'_>, st: &CheckerState) -> Step<(Ty, Offset)> {
    let t = lx.next()?;
    match &t.tok {
        Tok::Int => Ok((Ty::Int, t.off)),
        Tok::Str => Ok((Ty::Str, t.off)),
        Tok::Ident(name) => match st.lookup(name) {
            Some(Binding::Var(ty)) => Ok((ty, t.off)),
            Some(Binding::Record) => {
                fail(t.off, ErrorKind::UndeclaredIdentifier, diag::not_a_variable(name))
            }
            None => fail(t.off, ErrorKind::UndeclaredIdentifier, diag::undeclared(name)),
        },
        _ => unexpected(&t, "expression"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session() -> ActiveSession {
        ActiveSession::new(SessionId(1), CheckpointPolicy::new(1 << 30, false))
    }

    fn progress(events: &[SessionEvent]) -> Vec<(Offset, Boundary)> {
        events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::Progress { off, cat } => Some((*off, *cat)),
                _ => None,
            })
            .collect()
    }

    fn first_error(events: &[SessionEvent]) -> Option<&CheckError> {
        events.iter().find_map(|e| match e {
            SessionEvent::Error(err) => Some(err),
            _ => None,
        })
    }

    #[test]
    fn let_statement_reports_progress_at_semicolon() {
        let mut s = session();
        let ev = s.submit(b"let x: int = 1;", false);
        assert_eq!(progress(&ev), vec![(15, Boundary::LetStmt)]);
    }

    #[test]
    fn undeclared_assignment_target() {
        let mut s = session();
        let ev = s.submit(b"y = 1;", false);
        let err = first_error(&ev).unwrap();
        assert_eq!((err.off, err.kind), (0, ErrorKind::UndeclaredIdentifier));
        assert!(err.diag.contains('y'));
    }

    #[test]
    fn literal_type_mismatch_points_at_literal() {
        let mut s = session();
        let ev = s.submit(b"let s: str = 1;", false);
        let err = first_error(&ev).unwrap();
        assert_eq!((err.off, err.kind), (13, ErrorKind::TypeMismatch));
    }

    #[test]
    fn block_scoped_name_is_out_of_scope_after_close() {
        let mut s = session();
        let src = "let c: bool = 1 == 1;\nif c { let a: int = 1; }\nlet x: int = 0;\nx = a;";
        let ev = s.submit(src.as_bytes(), false);
        let err = first_error(&ev).unwrap();
        assert_eq!(err.kind, ErrorKind::UndeclaredIdentifier);
        assert_eq!(err.off as usize, src.rfind('a').unwrap());
    }

    #[test]
    fn incomplete_input_blocks_without_error() {
        let mut s = session();
        let ev = s.submit(b"let x: int = 1", false);
        assert!(ev.is_empty());
        let ev = s.submit(b";", false);
        assert_eq!(progress(&ev), vec![(15, Boundary::LetStmt)]);
    }

    #[test]
    fn eos_reports_unclosed_block() {
        let mut s = session();
        s.submit(b"let c: bool = 1 == 1; if c {", false);
        let ev = s.submit(b"", true);
        let err = first_error(&ev).unwrap();
        assert_eq!((err.off, err.kind), (28, ErrorKind::SyntaxError));
    }

    #[test]
    fn eos_after_complete_program() {
        let mut s = session();
        let ev = s.submit(b"let x: int = 1;\n", true);
        assert_eq!(progress(&ev), vec![(15, Boundary::LetStmt), (16, Boundary::Eos)]);
        assert!(s.is_halted());
    }

    #[test]
    fn duplicate_field_is_retroactive() {
        let mut s = session();
        let ev = s.submit(b"rec R { a: int; a: str; }", false);
        assert_eq!(progress(&ev), vec![(15, Boundary::RecField), (23, Boundary::RecField)]);
        let err = first_error(&ev).unwrap();
        assert_eq!((err.off, err.kind), (16, ErrorKind::DuplicateField));
        assert!(err.off < 23);
    }

    #[test]
    fn halts_after_first_error() {
        let mut s = session();
        let ev = s.submit(b"y = 1; z = 2;", false);
        assert_eq!(ev.len(), 1);
        assert!(s.submit(b"let a: int = 1;", false).is_empty());
    }

    #[test]
    fn prologue_boundary_precedes_first_statement() {
        let mut s = session();
        let ev = s.submit(b"// header\n\nlet x: int = 1;", false);
        assert_eq!(progress(&ev), vec![(10, Boundary::Prologue), (26, Boundary::LetStmt)]);
    }

    #[test]
    fn checkpoint_policy_interval_rule() {
        let p = CheckpointPolicy::new(200, true);
        assert!(p.due(15, None));
        assert!(p.due(240, Some(15)));
        assert!(!p.due(200, Some(15)));
        assert!(!p.due(240, Some(240)));
        let p = CheckpointPolicy::new(200, false);
        assert!(!p.due(15, None));
        assert!(p.due(200, None));
    }

    #[test]
    fn snapshot_is_isolated_from_later_input() {
        let mut s = ActiveSession::new(SessionId(1), CheckpointPolicy::new(10, true));
        let ev = s.submit(b"let x: int = 1;", false);
        let snap = ev
            .iter()
            .find_map(|e| match e {
                SessionEvent::Checkpoint { state, .. } => Some(state.clone()),
                _ => None,
            })
            .unwrap();
        let before = (*snap).clone();
        s.submit(&b"let y: int = 2;".repeat(40), false);
        assert_eq!(*snap, before);
        assert_eq!(snap.last_accepted(), 15);
    }
}
