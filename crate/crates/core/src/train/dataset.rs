use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, usage_err, Error, Result};
use crate::geometry::CameraModel;
use crate::han::Observation;
use crate::imageio::{decode_depth, decode_rgb, encode_depth, encode_rgb};
use crate::sim::{
    reset, step, success, Action, Fingers, RegionKind, Renderer, Scene, ScriptedExpert, TaskId, TaskSpec,
};

pub const DATASET_MAGIC: &[u8; 8] = b"HANDATA1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    Human,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Expert => "expert",
            Source::Human => "human",
        })
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Source::Expert),
            "human" => Ok(Source::Human),
            _ => Err(config_err!("unknown source {s:?}; valid sources: expert, human")),
        }
    }
}

/// One recorded timestep: what the robot saw and the action it executed.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: Vec<u8>,
    pub depth: Vec<f32>,
    pub x_ee: [f64; 3],
    pub fingers: Fingers,
    pub object_positions: Vec<[f64; 3]>,
    /// `(dx, dy, dz, grip)` with grip `+1` closed / `-1` open.
    pub action: [f64; 4],
}

impl Frame {
    pub fn capture(obs: &Observation, action: &Action) -> Self {
        Self {
            rgb: obs.rgb.clone(),
            depth: obs.depth.clone(),
            x_ee: obs.x_ee.to_array(),
            fingers: obs.fingers,
            object_positions: obs.object_positions.clone().unwrap_or_default(),
            action: action.to_vec4(),
        }
    }

    pub fn observation(&self, camera: &CameraModel) -> Observation {
        Observation {
            rgb: self.rgb.clone(),
            depth: self.depth.clone(),
            camera: *camera,
            x_ee: crate::geometry::Point3::robot(self.x_ee[0], self.x_ee[1], self.x_ee[2]),
            fingers: self.fingers,
            object_positions: Some(self.object_positions.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub task: TaskId,
    pub region: RegionKind,
    pub source: Source,
    pub seed: u64,
    /// Scene before the first action.
    pub initial: Scene,
    pub frames: Vec<Frame>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Shape checks that need no simulator: length and finite actions.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Format(format!(
                "demonstration has {} frames, need >= 2",
                self.frames.len()
            )));
        }
        if let Some(i) = self.frames.iter().position(|f| f.action.iter().any(|a| !a.is_finite())) {
            return Err(Error::Format(format!("frame {i} has a non-finite action")));
        }
        Ok(())
    }

    /// Re-steps the simulator from the initial scene with the stored
    /// actions. Every stored `x_ee` must match bit for bit and the episode
    /// must end in success.
    pub fn replay(&self) -> Result<Scene> {
        self.validate()?;
        let mut scene = self.initial.clone();
        for (i, f) in self.frames.iter().enumerate() {
            let x = scene.gripper.position();
            if x.map(f64::to_bits) != f.x_ee.map(f64::to_bits) || scene.gripper.fingers != f.fingers {
                return Err(Error::Format(format!(
                    "replay diverged at frame {i}: simulator x_ee {x:?}, stored {:?}",
                    f.x_ee
                )));
            }
            let objs: Vec<[f64; 3]> = scene.objects.iter().map(|o| o.center()).collect();
            if objs
                .iter()
                .flatten()
                .map(|v| v.to_bits())
                .ne(f.object_positions.iter().flatten().map(|v| v.to_bits()))
            {
                return Err(Error::Format(format!(
                    "replay diverged at frame {i}: object positions differ"
                )));
            }
            step(&mut scene, &Action::from_vec4(f.action));
        }
        if !success(&scene) {
            return Err(Error::Format("replayed episode does not end in success".into()));
        }
        Ok(scene)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub task: TaskId,
    pub camera: CameraModel,
    /// Hash of task definition and camera; datasets with equal fingerprints
    /// can be merged.
    pub fingerprint: String,
    /// Free-form provenance (command-line flags and the like).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl DatasetHeader {
    pub fn new(task: TaskId, camera: CameraModel) -> Result<Self> {
        let spec = TaskSpec::new(task);
        let canon = serde_json::to_vec(&serde_json::json!({
            "version": DATASET_VERSION,
            "task": spec,
            "camera": camera,
        }))?;
        let fingerprint = hex::encode(&Sha256::digest(&canon)[..8]);
        Ok(Self {
            version: DATASET_VERSION,
            task,
            camera,
            fingerprint,
            metadata: serde_json::Value::Null,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub demos: Vec<Demonstration>,
}

#[derive(Serialize, Deserialize)]
struct FrameMeta {
    x_ee: [f64; 3],
    fingers: Fingers,
    objects: Vec<[f64; 3]>,
    action: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    task: TaskId,
    region: RegionKind,
    source: Source,
    seed: u64,
    initial: Scene,
    frames: Vec<FrameMeta>,
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn take_blob<'a>(buf: &mut &'a [u8]) -> Result<&'a [u8]> {
    if buf.len() < 4 {
        return Err(Error::Format("truncated record".into()));
    }
    let n = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if buf.len() < 4 + n {
        return Err(Error::Format("truncated record".into()));
    }
    let blob = &buf[4..4 + n];
    *buf = &buf[4 + n..];
    Ok(blob)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Serialized record: meta JSON then PNG rgb and 16-bit depth per frame.
pub fn encode_record(demo: &Demonstration, camera: &CameraModel) -> Result<Vec<u8>> {
    let (h, w) = (camera.height, camera.width);
    let meta = RecordMeta {
        task: demo.task,
        region: demo.region,
        source: demo.source,
        seed: demo.seed,
        initial: demo.initial.clone(),
        frames: demo
            .frames
            .iter()
            .map(|f| FrameMeta {
                x_ee: f.x_ee,
                fingers: f.fingers,
                objects: f.object_positions.clone(),
                action: f.action,
            })
            .collect(),
    };
    let mut out = Vec::new();
    put_blob(&mut out, &serde_json::to_vec(&meta)?);
    for f in &demo.frames {
        put_blob(&mut out, &encode_rgb(h, w, &f.rgb)?);
        put_blob(&mut out, &encode_depth(h, w, &f.depth)?);
    }
    Ok(out)
}

pub fn decode_record(mut buf: &[u8], camera: &CameraModel) -> Result<Demonstration> {
    let meta: RecordMeta = serde_json::from_slice(take_blob(&mut buf)?)?;
    let mut frames = Vec::with_capacity(meta.frames.len());
    for fm in meta.frames {
        let (h, w, rgb) = decode_rgb(take_blob(&mut buf)?)?;
        let (hd, wd, depth) = decode_depth(take_blob(&mut buf)?)?;
        if (h, w) != (camera.height, camera.width) || (hd, wd) != (h, w) {
            return Err(Error::Format(format!(
                "frame is {h}x{w}, dataset camera is {}x{}",
                camera.height, camera.width
            )));
        }
        frames.push(Frame {
            rgb,
            depth,
            x_ee: fm.x_ee,
            fingers: fm.fingers,
            object_positions: fm.objects,
            action: fm.action,
        });
    }
    if !buf.is_empty() {
        return Err(Error::Format("trailing bytes in record".into()));
    }
    Ok(Demonstration {
        task: meta.task,
        region: meta.region,
        source: meta.source,
        seed: meta.seed,
        initial: meta.initial,
        frames,
    })
}

fn write_header(w: &mut impl Write, header: &DatasetHeader) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<DatasetHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a demonstration dataset (bad magic)".into()));
    }
    let n = read_u32(r)? as usize;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json)?;
    let header: DatasetHeader = serde_json::from_slice(&json)?;
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", header.version)));
    }
    header.camera.validate()?;
    Ok(header)
}

impl Dataset {
    pub fn new(header: DatasetHeader) -> Self {
        Self {
            header,
            demos: Vec::new(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.demos.iter().map(|d| d.len()).sum()
    }

    /// `(demo, frame)` index of every frame.
    pub fn frame_index(&self) -> Vec<(usize, usize)> {
        self.demos
            .iter()
            .enumerate()
            .flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j)))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, &self.header)?;
        for d in &self.demos {
            let rec = encode_record(d, &self.header.camera)?;
            w.write_all(&(rec.len() as u64).to_le_bytes())?;
            w.write_all(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let header = read_header(&mut r)?;
        let mut demos = Vec::new();
        loop {
            let mut len = [0u8; 8];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut rec = vec![0u8; u64::from_le_bytes(len) as usize];
            r.read_exact(&mut rec)
                .map_err(|_| Error::Format("truncated dataset record".into()))?;
            let demo = decode_record(&rec, &header.camera)?;
            if demo.task != header.task {
                return Err(Error::Format(format!(
                    "{} record in a {} dataset",
                    demo.task, header.task
                )));
            }
            demos.push(demo);
        }
        Ok(Self { header, demos })
    }

    /// Appends one record under an exclusive file lock, creating the file
    /// with `header` if needed. An existing file must have the same
    /// fingerprint.
    pub fn append(path: impl AsRef<Path>, header: &DatasetHeader, demo: &Demonstration) -> Result<()> {
        let path = path.as_ref();
        let mut f = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        f.lock()?;
        let result = (|| {
            if f.metadata()?.len() == 0 {
                write_header(&mut f, header)?;
            } else {
                let existing = read_header(&mut BufReader::new(File::open(path)?))?;
                if existing.fingerprint != header.fingerprint {
                    return Err(usage_err!(
                        "dataset {} has fingerprint {}, demo is for {}",
                        path.display(),
                        existing.fingerprint,
                        header.fingerprint
                    ));
                }
            }
            let rec = encode_record(demo, &header.camera)?;
            let mut buf = Vec::with_capacity(rec.len() + 8);
            buf.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            buf.extend_from_slice(&rec);
            f.write_all(&buf)?;
            f.flush()?;
            Ok(())
        })();
        f.unlock()?;
        result
    }

    /// Replays every demonstration; see [`Demonstration::replay`].
    pub fn validate_replay(&self) -> Result<()> {
        for (i, d) in self.demos.iter().enumerate() {
            d.replay().map_err(|e| Error::Format(format!("demo {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Runs `expert` from `scene`, recording rendered frames and executed
/// actions. Returns the demo only if the episode succeeds.
pub fn record_expert_episode(
    scene: Scene,
    region: RegionKind,
    expert: &mut ScriptedExpert,
    renderer: &Renderer,
    max_steps: usize,
) -> Result<Option<Demonstration>> {
    let mut demo = Demonstration {
        task: scene.task,
        region,
        source: Source::Expert,
        seed: scene.seed,
        initial: scene.clone(),
        frames: Vec::new(),
    };
    let mut scene = scene;
    while demo.frames.len() < max_steps && !success(&scene) {
        let obs = Observation::capture(&scene, renderer);
        let action = expert.act(&scene)?;
        demo.frames.push(Frame::capture(&obs, &action));
        step(&mut scene, &action);
    }
    Ok((success(&scene) && demo.frames.len() >= 2).then_some(demo))
}

/// Collects `n` successful noisy-expert demonstrations. Failed episodes are
/// discarded and replaced; more than half failing aborts.
pub fn collect_demos(
    task: TaskId,
    region: RegionKind,
    n: usize,
    source: Source,
    seed: u64,
    camera: CameraModel,
) -> Result<Dataset> {
    if source == Source::Human {
        return Err(usage_err!(
            "human demonstrations are recorded through the teleoperation server (teleop-serve)"
        ));
    }
    let spec = TaskSpec::new(task);
    let renderer = Renderer::new(camera);
    let mut ds = Dataset::new(DatasetHeader::new(task, camera)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut attempts, mut failures) = (0usize, 0usize);
    let mut errors = Vec::new();
    while ds.demos.len() < n {
        attempts += 1;
        let scene = reset(&spec, region, rng.random())?;
        let mut expert = ScriptedExpert::noisy(rng.random());
        match record_expert_episode(scene, region, &mut expert, &renderer, spec.max_steps) {
            Ok(Some(d)) => ds.demos.push(d),
            Ok(None) => failures += 1,
            Err(e) => {
                failures += 1;
                if errors.len() < 5 {
                    errors.push(e.to_string());
                }
            }
        }
        if attempts >= 10 && 2 * failures > attempts {
            return Err(Error::ExpertFailure(format!(
                "{failures} of {attempts} {task}/{region} episodes failed; first errors: {errors:?}"
            )));
        }
    }
    Ok(ds)
}
