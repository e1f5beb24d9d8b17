#![allow(dead_code)]

use std::ops::Range;

use hydra_core::minichecker::{ActiveSession, CheckError, CheckerState, CheckpointPolicy, SessionEvent};
use hydra_core::{Offset, SessionId};

/// Everything a session reported for one program under one chunking.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamed {
    pub events: Vec<SessionEvent>,
}

impl Streamed {
    pub fn boundaries(&self) -> Vec<(Offset, hydra_core::minichecker::Boundary)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::Progress { off, cat } => Some((*off, *cat)),
                _ => None,
            })
            .collect()
    }

    pub fn error(&self) -> Option<CheckError> {
        self.events.iter().find_map(|e| match e {
            SessionEvent::Error(err) => Some(err.clone()),
            _ => None,
        })
    }

    pub fn checkpoints(&self) -> Vec<(usize, Offset, CheckerState)> {
        self.events
            .iter()
            .enumerate()
            .filter_map(|(i, e)| match e {
                SessionEvent::Checkpoint { off, state } => Some((i, *off, (**state).clone())),
                _ => None,
            })
            .collect()
    }
}

pub fn stream(src: &[u8], chunks: &[Range<usize>], policy: CheckpointPolicy) -> Streamed {
    let mut s = ActiveSession::new(SessionId(1), policy);
    let mut events = Vec::new();
    for r in chunks {
        events.extend(s.submit(&src[r.clone()], false));
    }
    events.extend(s.submit(b"", true));
    Streamed { events }
}
