//! Standalone listen mode over a Unix domain socket.
//!
//! Each accepted connection is one channel. Its first frame fixes its role:
//! a `submit` starts a fresh active session (announced with `init`), while
//! `resume{chan}` starts an active session from the named checkpoint. Events
//! of the session, including `chkpt` announcements for the snapshots it
//! takes, are written back on the same connection. Checkpoints outlive the
//! connection that produced them and are dropped when the server exits.

use std::io::{BufReader, BufWriter};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::Arc;
use std::thread;

use super::host::{parse_chan, CheckerHost};
use crate::proto::{read_msg, write_msg, Msg, ProtoError, SessionId};

/// Binds `path` and serves connections until the listener fails.
pub fn listen(path: &Path, host: Arc<CheckerHost>) -> std::io::Result<()> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let listener = UnixListener::bind(path)?;
    log::info!("listening on {}", path.display());
    serve(listener, host)
}

/// Serves every incoming connection on its own thread.
pub fn serve(listener: UnixListener, host: Arc<CheckerHost>) -> std::io::Result<()> {
    for conn in listener.incoming() {
        let conn = conn?;
        let host = Arc::clone(&host);
        thread::spawn(move || {
            if let Err(e) = handle(conn, &host) {
                log::warn!("connection closed: {e}");
            }
        });
    }
    Ok(())
}

fn protocol_error(diag: impl Into<String>) -> Msg {
    Msg::error(0, "protocol_error", diag)
}

/// Runs one channel to completion.
pub fn handle(conn: UnixStream, host: &CheckerHost) -> Result<(), ProtoError> {
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut writer = BufWriter::new(conn);
    let first = match read_msg(&mut reader) {
        Ok(Some(m)) => m,
        Ok(None) => return Ok(()),
        Err(e) => {
            write_msg(&mut writer, &protocol_error(e.to_string()))?;
            return Err(e);
        }
    };
    let (id, pending) = match first {
        Msg::Submit { delta, eos } => {
            let (id, init) = host.open();
            write_msg(&mut writer, &init)?;
            (id, Some((delta, eos)))
        }
        Msg::Resume { chan } => match parse_chan(&chan).and_then(|cid| host.resume(cid, &chan)) {
            Ok((id, init)) => {
                write_msg(&mut writer, &init)?;
                (id, None)
            }
            Err(e) => {
                write_msg(&mut writer, &protocol_error(e.to_string()))?;
                return Ok(());
            }
        },
        other => {
            let diag = format!("unexpected {} as first frame", other.kind());
            write_msg(&mut writer, &protocol_error(diag.clone()))?;
            return Err(ProtoError::Protocol(diag));
        }
    };
    let result = pump(id, pending, &mut reader, &mut writer, host);
    host.destroy(id);
    result
}

fn pump(
    id: SessionId,
    mut pending: Option<(String, bool)>,
    reader: &mut BufReader<UnixStream>,
    writer: &mut BufWriter<UnixStream>,
    host: &CheckerHost,
) -> Result<(), ProtoError> {
    loop {
        let (delta, eos) = match pending.take() {
            Some(p) => p,
            None => match read_msg(reader) {
                Ok(Some(Msg::Submit { delta, eos })) => (delta, eos),
                Ok(Some(other)) => {
                    let diag = format!("unexpected {} on an active channel", other.kind());
                    write_msg(writer, &protocol_error(diag.clone()))?;
                    return Err(ProtoError::Protocol(diag));
                }
                Ok(None) => return Ok(()),
                Err(e) => {
                    let _ = write_msg(writer, &protocol_error(e.to_string()));
                    return Err(e);
                }
            },
        };
        let msgs = host
            .submit(id, delta.as_bytes(), eos)
            .map_err(|e| ProtoError::Protocol(e.to_string()))?;
        for m in &msgs {
            write_msg(writer, m)?;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minichecker::{checkpoint_chan, CheckpointPolicy};

    fn start() -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checker.sock");
        let listener = UnixListener::bind(&path).unwrap();
        let host = Arc::new(CheckerHost::new(CheckpointPolicy::new(16, true)));
        thread::spawn(move || serve(listener, host));
        (dir, path)
    }

    fn recv(s: &mut UnixStream) -> Msg {
        read_msg(s).unwrap().unwrap()
    }

    #[test]
    fn submit_then_resume_over_socket() {
        let (_dir, path) = start();
        let mut a = UnixStream::connect(&path).unwrap();
        write_msg(&mut a, &Msg::submit("let x: int = 1;")).unwrap();
        let Msg::Init { id, pid: None } = recv(&mut a) else { panic!("expected init") };
        assert_eq!(recv(&mut a), Msg::progress(15, "let_stmt"));
        let Msg::Chkpt { off: 15, id: cid, pid } = recv(&mut a) else { panic!("expected chkpt") };
        assert_eq!(pid, id);

        let mut b = UnixStream::connect(&path).unwrap();
        write_msg(&mut b, &Msg::Resume { chan: checkpoint_chan(cid) }).unwrap();
        let Msg::Init { pid, .. } = recv(&mut b) else { panic!("expected init") };
        assert_eq!(pid, Some(cid));
        write_msg(&mut b, &Msg::submit("x = 2;")).unwrap();
        assert_eq!(recv(&mut b), Msg::progress(21, "assign_stmt"));
        write_msg(&mut b, &Msg::end_of_stream()).unwrap();
        assert_eq!(recv(&mut b), Msg::progress(21, "eos"));
    }

    #[test]
    fn unknown_checkpoint_is_a_protocol_error() {
        let (_dir, path) = start();
        let mut c = UnixStream::connect(&path).unwrap();
        write_msg(&mut c, &Msg::Resume { chan: "chkpt:777".into() }).unwrap();
        match recv(&mut c) {
            Msg::Error { cat, .. } => assert_eq!(cat, "protocol_error"),
            other => panic!("{other:?}"),
        }
    }
}
