//! Newline-delimited JSON request/reply protocol.
//!
//! Every request line is an object `{"kind", "revision", "payload"}` and gets
//! exactly one reply line of kind `ack`, `preview` or `error` carrying the
//! request's `revision`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Session, SessionConfig};
use crate::arap::HandleSet;
use crate::error::{Error, Result};
use crate::graph::GraphExport;
use crate::render::Camera;

/// Handle file entry: `{"node": i, "target": [x, y, z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandleSpec {
    pub node: usize,
    pub target: [f64; 3],
}

pub fn handles_from_specs(specs: &[HandleSpec]) -> Result<HandleSet> {
    HandleSet::new(specs.iter().map(|h| (h.node, Vector3::from(h.target))).collect())
}

pub fn parse_handle_file(text: &str) -> Result<HandleSet> {
    let specs: Vec<HandleSpec> = serde_json::from_str(text)?;
    handles_from_specs(&specs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Message {
    pub kind: String,
    #[serde(default)]
    pub revision: u64,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyKind {
    Ack,
    Preview,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub kind: ReplyKind,
    pub revision: u64,
    pub payload: Value,
}

impl Reply {
    fn ack(revision: u64, payload: Value) -> Self {
        Reply {
            kind: ReplyKind::Ack,
            revision,
            payload,
        }
    }

    pub fn error(revision: u64, message: impl Into<String>) -> Self {
        Reply {
            kind: ReplyKind::Error,
            revision,
            payload: json!({ "message": message.into() }),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("reply serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Load { path: String, config: Option<SessionConfig> },
    Build { nodes: Option<usize>, seed: Option<usize> },
    SetHandles(Vec<HandleSpec>),
    Drag { node: usize, target: [f64; 3] },
    Solve,
    PreviewRequest,
    RenderRequest { camera: Value, out: String },
    Export { path: String },
    Reset,
}

#[derive(Deserialize)]
struct LoadPayload {
    path: String,
    #[serde(default)]
    config: Option<SessionConfig>,
}

#[derive(Deserialize)]
struct BuildPayload {
    #[serde(default)]
    nodes: Option<usize>,
    #[serde(default)]
    seed: Option<usize>,
}

#[derive(Deserialize)]
struct HandlesPayload {
    handles: Vec<HandleSpec>,
}

#[derive(Deserialize)]
struct RenderPayload {
    camera: Value,
    out: String,
}

#[derive(Deserialize)]
struct PathPayload {
    path: String,
}

fn payload<T: serde::de::DeserializeOwned>(kind: &str, value: Value) -> Result<T> {
    let value = if value.is_null() { json!({}) } else { value };
    serde_json::from_value(value).map_err(|e| Error::Protocol(format!("bad `{kind}` payload: {e}")))
}

impl Command {
    pub fn parse(kind: &str, value: Value) -> Result<Self> {
        Ok(match kind {
            "load" => {
                let p: LoadPayload = payload(kind, value)?;
                Command::Load {
                    path: p.path,
                    config: p.config,
                }
            }
            "build" => {
                let p: BuildPayload = payload(kind, value)?;
                Command::Build {
                    nodes: p.nodes,
                    seed: p.seed,
                }
            }
            "set_handles" => Command::SetHandles(payload::<HandlesPayload>(kind, value)?.handles),
            "drag" => {
                let h: HandleSpec = payload(kind, value)?;
                Command::Drag {
                    node: h.node,
                    target: h.target,
                }
            }
            "solve" => Command::Solve,
            "preview_request" => Command::PreviewRequest,
            "render_request" => {
                let p: RenderPayload = payload(kind, value)?;
                Command::RenderRequest {
                    camera: p.camera,
                    out: p.out,
                }
            }
            "export" => Command::Export {
                path: payload::<PathPayload>(kind, value)?.path,
            },
            "reset" => Command::Reset,
            "ack" | "preview" | "error" => {
                return Err(Error::Protocol(format!("`{kind}` is a reply kind, not a request")))
            }
            other => return Err(Error::Protocol(format!("unknown message kind `{other}`"))),
        })
    }
}

/// A parsed request line. Unparseable lines still yield a request whose
/// command is the parse error, so they get an error reply.
#[derive(Debug, Clone)]
pub struct Request {
    pub revision: u64,
    pub command: std::result::Result<Command, String>,
}

impl Request {
    pub fn parse_line(line: &str) -> Self {
        match serde_json::from_str::<Message>(line) {
            Ok(msg) => Request {
                revision: msg.revision,
                command: Command::parse(&msg.kind, msg.payload).map_err(|e| e.to_string()),
            },
            Err(e) => {
                let revision = serde_json::from_str::<Value>(line)
                    .ok()
                    .and_then(|v| v.get("revision").and_then(Value::as_u64))
                    .unwrap_or(0);
                Request {
                    revision,
                    command: Err(format!("protocol error: malformed message: {e}")),
                }
            }
        }
    }

    fn drag_node(&self) -> Option<usize> {
        match self.command {
            Ok(Command::Drag { node, .. }) => Some(node),
            _ => None,
        }
    }
}

/// Owns the session of one connection and executes commands in order.
pub struct Host {
    defaults: SessionConfig,
    session: Option<Session>,
    revision: u64,
}

impl Host {
    pub fn new(defaults: SessionConfig) -> Self {
        Self {
            defaults,
            session: None,
            revision: 0,
        }
    }

    pub fn with_session(session: Session) -> Self {
        let revision = session.revision();
        Self {
            defaults: session.config().clone(),
            session: Some(session),
            revision,
        }
    }

    pub fn session(&self) -> Option<&Session> {
        self.session.as_ref()
    }

    pub fn session_mut(&mut self) -> Result<&mut Session> {
        self.session
            .as_mut()
            .ok_or_else(|| Error::Protocol("no cloud loaded; send `load` first".into()))
    }

    fn install(&mut self, mut session: Session) -> Value {
        self.revision += 1;
        session.set_revision(self.revision);
        let info = json!({
            "session_revision": self.revision,
            "primitive_count": session.cloud().len(),
            "graph": GraphExport::from(session.graph()),
        });
        self.session = Some(session);
        info
    }

    fn sync_revision(&mut self) {
        if let Some(s) = &self.session {
            self.revision = s.revision();
        }
    }

    pub fn execute(&mut self, revision: u64, command: Command) -> Reply {
        let result = self.run(revision, command);
        self.sync_revision();
        result.unwrap_or_else(|e| Reply::error(revision, e.to_string()))
    }

    fn run(&mut self, revision: u64, command: Command) -> Result<Reply> {
        let preview = |p: super::Preview| Reply {
            kind: ReplyKind::Preview,
            revision,
            payload: serde_json::to_value(p).expect("preview serializes"),
        };
        match command {
            Command::Load { path, config } => {
                let config = config.unwrap_or_else(|| self.defaults.clone());
                let session = Session::open(&path, config)?;
                Ok(Reply::ack(revision, self.install(session)))
            }
            Command::Build { nodes, seed } => {
                let current = self.session_mut()?;
                let mut config = current.config().clone();
                if let Some(n) = nodes {
                    config.graph.node_count = n;
                }
                if let Some(s) = seed {
                    config.graph.seed_index = s;
                }
                let session = Session::new(current.cloud().clone(), config)?;
                Ok(Reply::ack(revision, self.install(session)))
            }
            Command::SetHandles(specs) => {
                let handles = handles_from_specs(&specs)?;
                let s = self.session_mut()?;
                s.set_handles(handles)?;
                Ok(Reply::ack(revision, json!({ "session_revision": s.revision() })))
            }
            Command::Drag { node, target } => {
                let s = self.session_mut()?;
                Ok(preview(s.handle_drag(node, target.into())?))
            }
            Command::Solve => {
                let s = self.session_mut()?;
                let (_, warnings) = s.deformed_cloud()?;
                let state = s.state();
                Ok(Reply::ack(
                    revision,
                    json!({
                        "session_revision": s.revision(),
                        "energy": state.energy,
                        "iterations_run": state.iterations_run,
                        "warnings": warnings,
                    }),
                ))
            }
            Command::PreviewRequest => {
                let s = self.session_mut()?;
                s.solve_proxy()?;
                Ok(preview(s.preview()))
            }
            Command::RenderRequest { camera, out } => {
                let camera = Camera::from_json(&camera.to_string())?;
                let s = self.session_mut()?;
                let path = s.commit_and_render(&camera, &out)?;
                Ok(Reply::ack(
                    revision,
                    json!({ "session_revision": s.revision(), "path": path }),
                ))
            }
            Command::Export { path } => {
                let s = self.session_mut()?;
                let path = s.export(&path)?;
                Ok(Reply::ack(
                    revision,
                    json!({ "session_revision": s.revision(), "path": path }),
                ))
            }
            Command::Reset => {
                let s = self.session_mut()?;
                s.reset();
                Ok(Reply::ack(revision, json!({ "session_revision": s.revision() })))
            }
        }
    }

    /// Executes a batch of queued requests in order. A drag followed later in
    /// the batch by another drag of the same node, with only drags in
    /// between, is applied as a target update without solving and
    /// acknowledged as coalesced.
    pub fn process_batch(&mut self, batch: Vec<Request>) -> Vec<Reply> {
        let mut replies = Vec::with_capacity(batch.len());
        for (k, request) in batch.iter().enumerate() {
            let superseded = request.drag_node().is_some_and(|node| {
                batch[k + 1..]
                    .iter()
                    .map_while(|later| later.drag_node())
                    .any(|later| later == node)
            });
            let reply = match (&request.command, superseded) {
                (Err(message), _) => Reply::error(request.revision, message.clone()),
                (Ok(Command::Drag { node, target }), true) => {
                    let applied = self
                        .session_mut()
                        .and_then(|s| s.set_target(*node, Vector3::from(*target)).map(|_| s.revision()));
                    match applied {
                        Ok(session_revision) => Reply::ack(
                            request.revision,
                            json!({ "session_revision": session_revision, "coalesced": true }),
                        ),
                        Err(e) => Reply::error(request.revision, e.to_string()),
                    }
                }
                (Ok(command), _) => self.execute(request.revision, command.clone()),
            };
            self.sync_revision();
            replies.push(reply);
        }
        replies
    }

    /// Parses and executes a single line.
    pub fn handle_line(&mut self, line: &str) -> Reply {
        self.process_batch(vec![Request::parse_line(line)])
            .pop()
            .expect("one reply per request")
    }
}
