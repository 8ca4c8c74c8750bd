//! Framing: a 4-byte big-endian length followed by one canonical-JSON
//! [`Message`]. The frame kind travels in the `frame` header.

use std::io::{self, Read, Write};

use crate::message::Message;

pub const WORKER_REGISTER: &str = "worker-register";
pub const HEARTBEAT: &str = "heartbeat";
pub const TASK_ASSIGN: &str = "task-assign";
pub const STEP_REPORT: &str = "step-report";
pub const TRAJECTORY_COMPLETE: &str = "trajectory-complete";
pub const POLICY_SYNC: &str = "policy-sync";
pub const SHUTDOWN: &str = "shutdown";
pub const SUBMIT_GROUP: &str = "submit-group";
pub const GROUP_RESULT: &str = "group-result";
/// Remote policy request; answered with an `ActionModel` message.
pub const DECIDE: &str = "decide";

pub const HEADER_ATTEMPT: &str = "attempt";
pub const HEADER_POLICY_VERSION: &str = "policy_version";

/// Refuse frames above this size rather than allocate on a corrupt length.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let body = msg.to_json().into_bytes();
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Writes one frame in a single `write_all` so concurrent writers holding
/// the stream lock never interleave partial frames.
pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode_frame(msg))?;
    w.flush()
}

/// Reads one frame. `Ok(None)` is a clean end of stream at a frame boundary;
/// a stream that ends inside a frame is an error.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Message>> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame header")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    let text = std::str::from_utf8(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    Message::from_json(text)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("bad frame body: {e}")))
}
