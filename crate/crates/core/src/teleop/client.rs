use std::net::{TcpStream, ToSocketAddrs};

use crate::error::{Error, Result};
use crate::sim::{reset, step, success, Fingers, RegionKind, ScriptedExpert, TaskId, TaskSpec};

use super::protocol::{read_message, write_message, ClientMessage, ControlVerb, FrameMessage, ServerMessage};

/// Blocking protocol client.
pub struct Client {
    stream: TcpStream,
    pub session: u64,
    pub task: TaskId,
    pub region: RegionKind,
    pub max_step: f64,
}

impl Client {
    /// Connects and consumes the greeting.
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        match read_message(&mut stream)? {
            Some(ServerMessage::Hello {
                protocol,
                session,
                task,
                region,
                max_step,
            }) => {
                if protocol != super::PROTOCOL_VERSION {
                    return Err(Error::Format(format!("server speaks protocol {protocol}")));
                }
                Ok(Self {
                    stream,
                    session,
                    task,
                    region,
                    max_step,
                })
            }
            other => Err(Error::Format(format!("expected hello, got {other:?}"))),
        }
    }

    pub fn send(&mut self, msg: &ClientMessage) -> Result<()> {
        write_message(&mut self.stream, msg)
    }

    /// Writes raw bytes as one message body.
    pub fn send_raw(&mut self, body: &[u8]) -> Result<()> {
        use std::io::Write;
        self.stream.write_all(&(body.len() as u32).to_be_bytes())?;
        self.stream.write_all(body)?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<ServerMessage> {
        read_message(&mut self.stream)?.ok_or_else(|| Error::Format("server closed the connection".into()))
    }

    /// Receives until the next frame, returning it with whatever came before.
    pub fn recv_frame(&mut self) -> Result<(FrameMessage, Vec<ServerMessage>)> {
        let mut other = Vec::new();
        loop {
            match self.recv()? {
                ServerMessage::Frame(f) => return Ok((f, other)),
                m => other.push(m),
            }
        }
    }

    pub fn action(&mut self, delta: [f64; 3], grip: Fingers) -> Result<FrameMessage> {
        self.send(&ClientMessage::Action { delta, grip })?;
        let (f, other) = self.recv_frame()?;
        if let Some(ServerMessage::Error { message }) = other.into_iter().next() {
            return Err(Error::Usage(message));
        }
        Ok(f)
    }

    pub fn control(&mut self, verb: ControlVerb, force: bool) -> Result<()> {
        self.send(&ClientMessage::Control { verb, force })
    }
}

/// Drives one episode with `expert` over the wire: mirrors the server's
/// scene locally from the frame seed, sends the expert's actions, then
/// saves. `frame` is the latest frame received. Returns the saved frame
/// count and the next episode's first frame.
pub fn replay_expert(
    client: &mut Client,
    frame: FrameMessage,
    expert: &mut ScriptedExpert,
) -> Result<(usize, FrameMessage)> {
    let spec = TaskSpec::new(client.task);
    let mut scene = reset(&spec, client.region, frame.seed)?;
    client.control(ControlVerb::Start, false)?;
    let (mut frame, _) = client.recv_frame()?;
    let mut n = 0;
    while !success(&scene) {
        if n >= spec.max_steps {
            return Err(Error::ExpertFailure(format!(
                "no success within {} steps",
                spec.max_steps
            )));
        }
        let a = expert.act(&scene)?;
        step(&mut scene, &a);
        frame = client.action(a.delta, a.grip)?;
        n += 1;
        if frame.x_ee.map(f64::to_bits) != scene.gripper.position().map(f64::to_bits) {
            return Err(Error::Format(format!(
                "server diverged from the local scene at step {n}"
            )));
        }
    }
    if !frame.success {
        return Err(Error::Format("server does not report success".into()));
    }
    client.control(ControlVerb::Save, false)?;
    let (next, before) = client.recv_frame()?;
    for m in before {
        match m {
            ServerMessage::Saved { frames, .. } => return Ok((frames, next)),
            ServerMessage::Error { message } => return Err(Error::Usage(message)),
            _ => {}
        }
    }
    Err(Error::Format("save was not acknowledged".into()))
}
