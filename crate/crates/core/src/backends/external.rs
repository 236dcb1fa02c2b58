//! Client side of the JSON-lines subprocess protocol.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::protocol::{
    AffordanceResult, EmbeddingResult, GraspResult, Hello, ImageArgs, MaskResult, OneShotArgs, Request, Response,
    SegmentResult, TextArgs, ViewArgs, ViewContext,
};
use super::{
    AffordanceOneShot, AffordancePrediction, AffordanceSegmenter, BackendError, ClassScores, Classifier, Concurrency,
    CropView, GraspProposer, ImageEmbedder, Kind, OneShotQuery, PairEmbedder, ProcessSpec, SceneInput, Segmenter,
    TextEmbedder,
};
use crate::geometry::GraspRect;
use crate::maskops::{BinaryMask, MaskWire};
use crate::raster::RgbImage;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

type Reply = Result<Response, BackendError>;

#[derive(Default)]
struct Shared {
    pending: HashMap<u64, Sender<Reply>>,
    abandoned: HashSet<u64>,
    /// Set once the stream is unusable; later calls fail with this.
    broken: Option<Broken>,
}

#[derive(Clone)]
enum Broken {
    Exit(String),
    Protocol(String),
}

impl Broken {
    fn error(&self) -> BackendError {
        match self {
            Broken::Exit(m) => BackendError::ProcessExit(m.clone()),
            Broken::Protocol(m) => BackendError::Protocol(m.clone()),
        }
    }
}

impl Shared {
    fn fail_all(&mut self, why: Broken) {
        for (_, tx) in self.pending.drain() {
            let _ = tx.send(Err(why.error()));
        }
        self.broken.get_or_insert(why);
    }
}

/// A running model server. Requests are matched to responses by id; with
/// [`Concurrency::SerializeCalls`] one request is in flight at a time.
pub struct ExternalProcess {
    command: String,
    child: Mutex<Child>,
    stdin: Mutex<Option<ChildStdin>>,
    shared: Arc<Mutex<Shared>>,
    next_id: AtomicU64,
    serial: Option<Mutex<()>>,
    timeout: Duration,
    hello: Hello,
    labels: Mutex<Option<Vec<String>>>,
    scratch: tempfile::TempDir,
    file_counter: AtomicU64,
    reader: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for ExternalProcess {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalProcess")
            .field("command", &self.command)
            .field("hello", &self.hello)
            .finish()
    }
}

impl ExternalProcess {
    /// Launches the process and performs the hello handshake. Fails when the
    /// server does not offer every kind listed in `spec`.
    pub fn spawn(spec: &ProcessSpec) -> Result<Self, BackendError> {
        let (program, args) = spec
            .command
            .split_first()
            .ok_or_else(|| BackendError::Config("empty process command".into()))?;
        let command = spec.command.join(" ");
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| BackendError::Spawn {
                command: command.clone(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let shared = Arc::new(Mutex::new(Shared::default()));
        let reader_shared = shared.clone();
        let reader = std::thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            loop {
                let line = match lines.next() {
                    Some(Ok(line)) => line,
                    Some(Err(e)) => {
                        reader_shared
                            .lock()
                            .expect("lock")
                            .fail_all(Broken::Exit(e.to_string()));
                        return;
                    }
                    None => {
                        reader_shared
                            .lock()
                            .expect("lock")
                            .fail_all(Broken::Exit("end of output stream".into()));
                        return;
                    }
                };
                if line.trim().is_empty() {
                    continue;
                }
                let mut s = reader_shared.lock().expect("lock");
                match serde_json::from_str::<Response>(&line) {
                    Err(e) => s.fail_all(Broken::Protocol(format!("malformed frame: {e}"))),
                    Ok(resp) => {
                        if let Some(tx) = s.pending.remove(&resp.id) {
                            let _ = tx.send(Ok(resp));
                        } else if !s.abandoned.remove(&resp.id) {
                            s.fail_all(Broken::Protocol(format!("response with unexpected id {}", resp.id)));
                        }
                    }
                }
            }
        });
        let mut proc = ExternalProcess {
            command,
            child: Mutex::new(child),
            stdin: Mutex::new(Some(stdin)),
            shared,
            next_id: AtomicU64::new(0),
            serial: (spec.concurrency == Concurrency::SerializeCalls).then(|| Mutex::new(())),
            timeout: Duration::from_millis(spec.timeout_ms),
            hello: Hello {
                kinds: Vec::new(),
                concurrent: false,
                labels: None,
            },
            labels: Mutex::new(None),
            scratch: tempfile::tempdir().map_err(|e| BackendError::Config(format!("scratch dir: {e}")))?,
            file_counter: AtomicU64::new(0),
            reader: Some(reader),
        };
        let hello: Hello = proc.call("hello", Value::Null)?;
        if let Some(missing) = spec.kinds.iter().find(|k| !hello.kinds.contains(k)) {
            return Err(BackendError::Protocol(format!(
                "{} does not offer {missing}",
                proc.command
            )));
        }
        *proc.labels.get_mut().expect("lock") = hello.labels.clone();
        proc.hello = hello;
        Ok(proc)
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    pub fn set_labels(&self, labels: Vec<String>) {
        *self.labels.lock().expect("lock") = Some(labels);
    }

    /// Sends one request and waits for its response.
    pub fn call_raw(&self, op: &str, args: Value) -> Result<Option<Value>, BackendError> {
        let _turn = self.serial.as_ref().map(|m| m.lock().expect("lock"));
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        {
            let mut s = self.shared.lock().expect("lock");
            if let Some(b) = &s.broken {
                return Err(b.error());
            }
            s.pending.insert(id, tx);
        }
        let frame = serde_json::to_string(&Request {
            id,
            op: op.to_string(),
            args,
        })
        .expect("request serializes");
        let written = {
            let mut stdin = self.stdin.lock().expect("lock");
            match stdin.as_mut() {
                Some(w) => writeln!(w, "{frame}").and_then(|_| w.flush()),
                None => Err(std::io::Error::other("stdin closed")),
            }
        };
        if let Err(e) = written {
            self.shared.lock().expect("lock").pending.remove(&id);
            return Err(BackendError::ProcessExit(e.to_string()));
        }
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(resp)) if resp.ok => Ok(resp.result),
            Ok(Ok(resp)) => Err(BackendError::Remote(
                resp.error.unwrap_or_else(|| "unspecified error".into()),
            )),
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => {
                let mut s = self.shared.lock().expect("lock");
                if s.pending.remove(&id).is_some() {
                    s.abandoned.insert(id);
                    return Err(BackendError::Timeout {
                        op: op.to_string(),
                        ms: self.timeout.as_millis() as u64,
                    });
                }
                drop(s);
                // the reply raced the deadline
                match rx.try_recv() {
                    Ok(Ok(resp)) if resp.ok => Ok(resp.result),
                    Ok(Ok(resp)) => Err(BackendError::Remote(resp.error.unwrap_or_default())),
                    Ok(Err(e)) => Err(e),
                    Err(_) => Err(BackendError::ProcessExit("reply channel closed".into())),
                }
            }
            Err(RecvTimeoutError::Disconnected) => Err(BackendError::ProcessExit("reply channel closed".into())),
        }
    }

    pub fn call<T: DeserializeOwned>(&self, op: &str, args: impl Serialize) -> Result<T, BackendError> {
        let args = serde_json::to_value(args).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let result = self.call_raw(op, args)?.unwrap_or(Value::Null);
        serde_json::from_value(result).map_err(|e| BackendError::Protocol(format!("bad {op} result: {e}")))
    }

    fn write_image(&self, image: &RgbImage) -> Result<PathBuf, BackendError> {
        let n = self.file_counter.fetch_add(1, Ordering::SeqCst);
        let path = self.scratch.path().join(format!("img-{n}.png"));
        image.save_png(&path)?;
        Ok(path)
    }

    fn view_args(&self, view: &CropView<'_>) -> Result<(ViewArgs, PathBuf), BackendError> {
        let path = self.write_image(view.image)?;
        Ok((
            ViewArgs {
                image: path.to_string_lossy().into_owned(),
                context: context(view),
            },
            path,
        ))
    }

    fn with_view<T: DeserializeOwned>(&self, op: &str, view: &CropView<'_>) -> Result<T, BackendError> {
        let (args, path) = self.view_args(view)?;
        let out = self.call(op, args);
        let _ = std::fs::remove_file(path);
        out
    }

    fn with_scene<T: DeserializeOwned>(&self, op: &str, scene: &SceneInput) -> Result<T, BackendError> {
        let (path, temp) = match &scene.path {
            Some(p) => (p.clone(), false),
            None => (self.write_image(&scene.image)?, true),
        };
        let out = self.call(
            op,
            ImageArgs {
                image: path.to_string_lossy().into_owned(),
                width: scene.image.width(),
                height: scene.image.height(),
                scene_id: scene.scene_id,
            },
        );
        if temp {
            let _ = std::fs::remove_file(path);
        }
        out
    }
}

fn context(view: &CropView<'_>) -> ViewContext {
    let b = view.transform.bbox;
    ViewContext {
        origin: view.origin.clone(),
        bbox: [b.x0, b.y0, b.x1, b.y1],
        side: view.transform.side,
    }
}

impl Drop for ExternalProcess {
    fn drop(&mut self) {
        self.stdin.get_mut().expect("lock").take();
        if let Ok(child) = self.child.get_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

fn expect_kind(p: &ExternalProcess, kind: Kind) -> Result<(), BackendError> {
    if p.hello.kinds.contains(&kind) {
        Ok(())
    } else {
        Err(BackendError::NotConfigured(kind))
    }
}

impl Segmenter for ExternalProcess {
    fn segment(&self, scene: &SceneInput) -> Result<Vec<BinaryMask>, BackendError> {
        expect_kind(self, Kind::Segmenter)?;
        let r: SegmentResult = self.with_scene("segment", scene)?;
        let frame = Some((scene.image.width(), scene.image.height()));
        r.masks
            .iter()
            .map(|m| m.decode(frame).map_err(BackendError::from))
            .collect()
    }
}

impl ImageEmbedder for ExternalProcess {
    fn embed_image(&self, view: &CropView<'_>) -> Result<Vec<f64>, BackendError> {
        expect_kind(self, Kind::ImageEmbedder)?;
        Ok(self.with_view::<EmbeddingResult>("embed_image", view)?.embedding)
    }
}

impl PairEmbedder for ExternalProcess {
    fn embed_pair(&self, view: &CropView<'_>) -> Result<Vec<f64>, BackendError> {
        expect_kind(self, Kind::PairEmbedder)?;
        Ok(self.with_view::<EmbeddingResult>("embed_pair", view)?.embedding)
    }
}

impl TextEmbedder for ExternalProcess {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        expect_kind(self, Kind::TextEmbedder)?;
        let r: EmbeddingResult = self.call("embed_text", TextArgs { text: text.to_string() })?;
        Ok(r.embedding)
    }
}

impl Classifier for ExternalProcess {
    fn labels(&self) -> Option<Vec<String>> {
        self.labels.lock().expect("lock").clone()
    }

    fn classify(&self, view: &CropView<'_>) -> Result<ClassScores, BackendError> {
        expect_kind(self, Kind::Classifier)?;
        let r: ClassScores = self.with_view("classify", view)?;
        if r.labels.len() != r.logits.len() {
            return Err(BackendError::Protocol(format!(
                "{} labels but {} logits",
                r.labels.len(),
                r.logits.len()
            )));
        }
        Ok(r)
    }
}

impl AffordanceOneShot for ExternalProcess {
    fn predict_region(&self, q: &OneShotQuery<'_>) -> Result<BinaryMask, BackendError> {
        expect_kind(self, Kind::AffordanceOneShot)?;
        let scene = self.write_image(q.scene.image)?;
        let reference = self.write_image(q.reference_image)?;
        let out = self.call::<MaskResult>(
            "affordance_oneshot",
            OneShotArgs {
                scene_image: scene.to_string_lossy().into_owned(),
                reference_image: reference.to_string_lossy().into_owned(),
                reference_region: MaskWire::bits(q.reference_region),
                context: context(&q.scene),
                task: q.rule.clone(),
            },
        );
        let _ = std::fs::remove_file(scene);
        let _ = std::fs::remove_file(reference);
        let frame = (q.scene.image.width(), q.scene.image.height());
        Ok(out?.mask.decode(Some(frame))?)
    }
}

impl AffordanceSegmenter for ExternalProcess {
    fn segment_affordances(&self, view: &CropView<'_>) -> Result<Vec<AffordancePrediction>, BackendError> {
        expect_kind(self, Kind::AffordanceSegmenter)?;
        let r: AffordanceResult = self.with_view("affordance_segment", view)?;
        let frame = Some((view.image.width(), view.image.height()));
        r.predictions
            .into_iter()
            .map(|p| {
                Ok(AffordancePrediction {
                    label: p.label,
                    confidence: p.confidence,
                    mask: p.mask.decode(frame)?,
                })
            })
            .collect()
    }
}

impl GraspProposer for ExternalProcess {
    fn propose(&self, scene: &SceneInput) -> Result<Vec<GraspRect>, BackendError> {
        expect_kind(self, Kind::GraspProposer)?;
        let r: GraspResult = self.with_scene("propose_grasps", scene)?;
        for g in &r.grasps {
            g.validate()
                .map_err(|e| BackendError::Protocol(format!("invalid grasp from backend: {e}")))?;
        }
        Ok(r.grasps)
    }
}
