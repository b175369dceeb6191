//! Lockstep teleoperation over length-prefixed JSON on TCP.
//!
//! The server renders a frame, waits for exactly one action, steps the
//! simulator and renders the next frame. Field names are frozen in
//! `docs/teleop-protocol-v1.md`.

mod client;
mod protocol;
mod server;

pub use client::{replay_expert, Client};
pub use protocol::{
    encode_png_base64, read_message, read_raw, write_message, ClientMessage, ControlVerb, FrameMessage, Incoming,
    ServerMessage, MAX_MESSAGE_BYTES, PROTOCOL_VERSION,
};
pub use server::{Server, TeleopConfig, DEFAULT_IDLE_TIMEOUT, OUT_DIR_ENV};
