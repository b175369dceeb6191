use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::han::PolicyOutput;
use crate::sim::{Fingers, RegionKind, TaskId};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on one message body.
pub const MAX_MESSAGE_BYTES: usize = 16 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVerb {
    Start,
    Reset,
    Save,
    Discard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    pub session: u64,
    /// Scene seed of the current episode.
    pub seed: u64,
    /// Steps taken in the current episode.
    pub step: u64,
    pub recording: bool,
    pub height: usize,
    pub width: usize,
    /// Base64 PNG of the RGB render.
    pub rgb_png: String,
    pub x_ee: [f64; 3],
    pub grip: Fingers,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<PolicyOutput>,
}

impl FrameMessage {
    pub fn decode_rgb(&self) -> Result<Vec<u8>> {
        let png = STANDARD
            .decode(&self.rgb_png)
            .map_err(|e| Error::Format(format!("frame rgb is not base64: {e}")))?;
        let (h, w, rgb) = crate::imageio::decode_rgb(&png)?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::Format(format!(
                "frame PNG is {h}x{w}, message says {}x{}",
                self.height, self.width
            )));
        }
        Ok(rgb)
    }
}

pub fn encode_png_base64(png: &[u8]) -> String {
    STANDARD.encode(png)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol: u32,
        session: u64,
        task: TaskId,
        region: RegionKind,
        max_step: f64,
    },
    Frame(FrameMessage),
    Ack {
        verb: ControlVerb,
    },
    Saved {
        path: String,
        frames: usize,
        forced: bool,
    },
    Paused {
        idle_seconds: f64,
    },
    Error {
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Action {
        delta: [f64; 3],
        grip: Fingers,
    },
    Control {
        verb: ControlVerb,
        #[serde(default)]
        force: bool,
    },
}

/// Writes a 4-byte big-endian length followed by the JSON body.
pub fn write_message<T: Serialize>(w: &mut impl Write, msg: &T) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_MESSAGE_BYTES {
        return Err(Error::Format(format!(
            "message of {} bytes exceeds the limit",
            body.len()
        )));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Outcome of waiting for one message.
#[derive(Debug)]
pub enum Incoming {
    Message(Vec<u8>),
    /// The read timed out before any byte of a new message arrived.
    Idle,
    Closed,
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// Fills `buf`, retrying timeouts once at least one byte has arrived.
/// Returns `Ok(false)` on a timeout or EOF before the first byte.
fn fill(r: &mut impl Read, buf: &mut [u8], idle_ok: bool) -> io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 && idle_ok => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if is_timeout(&e) && got == 0 && idle_ok => return Err(e),
            Err(e) if is_timeout(&e) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// Reads one length-prefixed body.
pub fn read_raw(r: &mut impl Read) -> Result<Incoming> {
    let mut len = [0u8; 4];
    match fill(r, &mut len, true) {
        Ok(true) => {}
        Ok(false) => return Ok(Incoming::Closed),
        Err(e) if is_timeout(&e) => return Ok(Incoming::Idle),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_MESSAGE_BYTES {
        return Err(Error::Format(format!("message of {n} bytes exceeds the limit")));
    }
    let mut body = vec![0u8; n];
    fill(r, &mut body, false)?;
    Ok(Incoming::Message(body))
}

/// Blocking read of one typed message; `None` when the peer closed.
pub fn read_message<T: for<'de> Deserialize<'de>>(r: &mut impl Read) -> Result<Option<T>> {
    loop {
        match read_raw(r)? {
            Incoming::Message(b) => return Ok(Some(serde_json::from_slice(&b)?)),
            Incoming::Closed => return Ok(None),
            Incoming::Idle => {}
        }
    }
}
