use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::han::{Observation, Policy};
use crate::imageio::encode_rgb;
use crate::sim::{reset, step, success, Action, RegionKind, Renderer, Scene, TaskId, TaskSpec};
use crate::train::{Dataset, DatasetHeader, Demonstration, Frame, Source};

use super::protocol::{
    encode_png_base64, read_raw, write_message, ClientMessage, ControlVerb, FrameMessage, Incoming, ServerMessage,
    PROTOCOL_VERSION,
};

/// Environment variable naming the default directory for recorded datasets.
pub const OUT_DIR_ENV: &str = "HAN_OUT_DIR";

/// Silence after which a session is reported paused.
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone)]
pub struct TeleopConfig {
    pub task: TaskId,
    pub region: RegionKind,
    /// Dataset file that saved episodes are appended to.
    pub out: PathBuf,
    /// Seed of the first episode; every reset takes the next one.
    pub seed: u64,
    pub camera: CameraModel,
    pub idle_timeout: Duration,
    /// Policy whose forward pass is streamed as the frame overlay.
    pub overlay: Option<Arc<Policy<f32>>>,
    /// Stored in the header when the dataset file is created.
    pub metadata: serde_json::Value,
}

impl TeleopConfig {
    pub fn new(task: TaskId, out: PathBuf) -> Self {
        Self {
            task,
            region: RegionKind::Interpolation,
            out,
            seed: 0,
            camera: CameraModel::front_view(60, 80),
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            overlay: None,
            metadata: serde_json::Value::Null,
        }
    }

    /// `<dir>/<task>_human.han` with `dir` from `HAN_OUT_DIR`, else the
    /// working directory.
    pub fn default_out(task: TaskId) -> PathBuf {
        let dir = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        dir.join(format!("{task}_human.han"))
    }
}

pub struct Server {
    listener: TcpListener,
    config: Arc<TeleopConfig>,
    next_seed: Arc<AtomicU64>,
    next_session: AtomicU64,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: TeleopConfig) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self {
            listener,
            next_seed: Arc::new(AtomicU64::new(config.seed)),
            config: Arc::new(config),
            next_session: AtomicU64::new(0),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves one connection on the calling thread.
    pub fn serve_one(&self) -> Result<()> {
        let (stream, _) = self.listener.accept()?;
        self.session(stream).run()
    }

    /// Accepts connections forever, one thread per session.
    pub fn serve(&self) -> Result<()> {
        for stream in self.listener.incoming() {
            let session = self.session(stream?);
            std::thread::spawn(move || {
                let id = session.id;
                if let Err(e) = session.run() {
                    eprintln!("session {id}: {e}");
                }
            });
        }
        Ok(())
    }

    fn session(&self, stream: TcpStream) -> Session {
        Session {
            id: self.next_session.fetch_add(1, Ordering::SeqCst),
            stream,
            config: Arc::clone(&self.config),
            seeds: Arc::clone(&self.next_seed),
        }
    }
}

struct Episode {
    seed: u64,
    initial: Scene,
    scene: Scene,
    obs: Observation,
    recording: bool,
    frames: Vec<Frame>,
}

struct Session {
    id: u64,
    stream: TcpStream,
    config: Arc<TeleopConfig>,
    seeds: Arc<AtomicU64>,
}

impl Session {
    fn send(&mut self, msg: &ServerMessage) -> Result<()> {
        write_message(&mut self.stream, msg)
    }

    fn fresh_episode(&self, spec: &TaskSpec, renderer: &Renderer) -> Result<Episode> {
        let seed = self.seeds.fetch_add(1, Ordering::SeqCst);
        let scene = reset(spec, self.config.region, seed)?;
        Ok(Episode {
            seed,
            initial: scene.clone(),
            obs: Observation::capture(&scene, renderer),
            scene,
            recording: false,
            frames: Vec::new(),
        })
    }

    fn frame(&self, ep: &Episode) -> Result<ServerMessage> {
        let cam = &self.config.camera;
        let overlay = match &self.config.overlay {
            Some(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(ep.seed ^ ep.scene.step);
                Some(p.forward(&ep.obs, &mut rng)?)
            }
            None => None,
        };
        Ok(ServerMessage::Frame(FrameMessage {
            session: self.id,
            seed: ep.seed,
            step: ep.scene.step,
            recording: ep.recording,
            height: cam.height,
            width: cam.width,
            rgb_png: encode_png_base64(&encode_rgb(cam.height, cam.width, &ep.obs.rgb)?),
            x_ee: ep.scene.gripper.position(),
            grip: ep.scene.gripper.fingers,
            success: success(&ep.scene),
            overlay,
        }))
    }

    fn run(mut self) -> Result<()> {
        let spec = TaskSpec::new(self.config.task);
        let renderer = Renderer::new(self.config.camera);
        let header = DatasetHeader {
            metadata: self.config.metadata.clone(),
            ..DatasetHeader::new(self.config.task, self.config.camera)?
        };
        self.stream.set_nodelay(true)?;
        self.stream.set_read_timeout(Some(self.config.idle_timeout))?;
        self.send(&ServerMessage::Hello {
            protocol: PROTOCOL_VERSION,
            session: self.id,
            task: self.config.task,
            region: self.config.region,
            max_step: spec.limits.max_step,
        })?;
        let mut ep = self.fresh_episode(&spec, &renderer)?;
        let f = self.frame(&ep)?;
        self.send(&f)?;
        let mut last_seen = Instant::now();
        let mut paused = false;
        loop {
            let body = match read_raw(&mut self.stream)? {
                Incoming::Message(b) => b,
                Incoming::Closed => return Ok(()),
                Incoming::Idle => {
                    if !paused {
                        paused = true;
                        let idle_seconds = last_seen.elapsed().as_secs_f64();
                        self.send(&ServerMessage::Paused { idle_seconds })?;
                    }
                    continue;
                }
            };
            last_seen = Instant::now();
            paused = false;
            let msg: ClientMessage = match serde_json::from_slice(&body) {
                Ok(m) => m,
                Err(e) => {
                    self.send(&ServerMessage::Error {
                        message: format!("malformed message: {e}"),
                    })?;
                    continue;
                }
            };
            match msg {
                ClientMessage::Action { delta, grip } => {
                    if !ep.recording {
                        self.send(&ServerMessage::Error {
                            message: "send a start control before actions".into(),
                        })?;
                        continue;
                    }
                    if delta.iter().any(|d| !d.is_finite()) {
                        self.send(&ServerMessage::Error {
                            message: format!("action delta {delta:?} is not finite"),
                        })?;
                        continue;
                    }
                    if ep.frames.len() >= spec.max_steps {
                        self.send(&ServerMessage::Error {
                            message: format!("episode reached {} steps; save or discard it", spec.max_steps),
                        })?;
                        continue;
                    }
                    let action = Action::new(delta, grip);
                    ep.frames.push(Frame::capture(&ep.obs, &action));
                    step(&mut ep.scene, &action);
                    ep.obs = Observation::capture(&ep.scene, &renderer);
                    let f = self.frame(&ep)?;
                    self.send(&f)?;
                }
                ClientMessage::Control { verb, force } => match verb {
                    ControlVerb::Start => {
                        if !ep.recording {
                            ep.recording = true;
                            ep.initial = ep.scene.clone();
                            ep.frames.clear();
                        }
                        self.send(&ServerMessage::Ack { verb })?;
                        let f = self.frame(&ep)?;
                        self.send(&f)?;
                    }
                    ControlVerb::Reset | ControlVerb::Discard => {
                        ep = self.fresh_episode(&spec, &renderer)?;
                        self.send(&ServerMessage::Ack { verb })?;
                        let f = self.frame(&ep)?;
                        self.send(&f)?;
                    }
                    ControlVerb::Save => {
                        let ok = success(&ep.scene);
                        if !ok && !force {
                            self.send(&ServerMessage::Error {
                                message: "episode has not succeeded; not saved (send save with force to keep it)"
                                    .into(),
                            })?;
                            continue;
                        }
                        let demo = Demonstration {
                            task: self.config.task,
                            region: self.config.region,
                            source: Source::Human,
                            seed: ep.seed,
                            initial: ep.initial.clone(),
                            frames: std::mem::take(&mut ep.frames),
                        };
                        if let Err(e) = demo
                            .validate()
                            .and_then(|_| Dataset::append(&self.config.out, &header, &demo))
                        {
                            ep.frames = demo.frames;
                            let message = match e {
                                Error::Io(e) => format!("could not write {}: {e}", self.config.out.display()),
                                e => format!("not saved: {e}"),
                            };
                            self.send(&ServerMessage::Error { message })?;
                            continue;
                        }
                        self.send(&ServerMessage::Saved {
                            path: self.config.out.display().to_string(),
                            frames: demo.frames.len(),
                            forced: !ok,
                        })?;
                        ep = self.fresh_episode(&spec, &renderer)?;
                        let f = self.frame(&ep)?;
                        self.send(&f)?;
                    }
                },
            }
        }
    }
}
