//! Session store and HTTP API for the live click-and-refine loop.
//!
//! Images and checkpoints are stored on disk under the hex SHA-256 of their
//! bytes. Mutating calls on a session run one at a time; a second one
//! arriving meanwhile is rejected with `busy`. Reads use the view published
//! after the last mutation and never wait for a running refine.

mod http;
mod session;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::disca::WeightPolicy;
use crate::error::{Error, Result};
use crate::experiment::RefineMode;
use crate::model::SegmentationModel;
use crate::raster::{decode_image, RasterImage};

pub use http::{router, serve, ErrorCode};
pub use session::{
    ClickInput, InitialPredictionPolicy, QueryStrategy, RefineOutcome, Session, SessionConfig, SessionView,
    UndoOutcome, SNAPSHOT_LIMIT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    Image,
    Checkpoint,
}

/// Result of registering an image or checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registered {
    pub id: String,
    pub kind: AssetKind,
    pub bytes: usize,
    /// Height, width and channels for images; classes for checkpoints.
    pub summary: serde_json::Value,
}

pub struct SessionHandle {
    lane: Mutex<Session>,
    view: RwLock<Arc<SessionView>>,
    busy: AtomicBool,
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl SessionHandle {
    fn new(session: Session) -> Self {
        let view = Arc::new(session.view());
        Self {
            lane: Mutex::new(session),
            view: RwLock::new(view),
            busy: AtomicBool::new(false),
        }
    }

    pub fn view(&self) -> Arc<SessionView> {
        Arc::clone(&self.view.read().expect("view lock"))
    }

    /// Runs a mutation, or fails with `Busy` if another one is running.
    pub fn mutate<T>(&self, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        if self.busy.swap(true, Ordering::AcqRel) {
            return Err(Error::Busy("another mutating call is running on this session".into()));
        }
        let _guard = BusyGuard(&self.busy);
        let mut session = self.lane.lock().unwrap_or_else(|e| e.into_inner());
        let out = f(&mut session);
        *self.view.write().expect("view lock") = Arc::new(session.view());
        out
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::Acquire)
    }
}

/// Registered assets and live sessions.
pub struct Store {
    root: PathBuf,
    images: RwLock<HashMap<String, Arc<RasterImage>>>,
    checkpoints: RwLock<HashMap<String, Arc<Checkpoint>>>,
    /// Latest weights per checkpoint for sessions under the sequential policy.
    chains: Mutex<HashMap<String, SegmentationModel>>,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    next_session: AtomicU64,
}

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in ["images", "checkpoints"] {
            let p = root.join(dir);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self {
            root,
            images: RwLock::default(),
            checkpoints: RwLock::default(),
            chains: Mutex::default(),
            sessions: RwLock::default(),
            next_session: AtomicU64::new(1),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_asset(&self, dir: &str, id: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(dir).join(id);
        if !path.exists() {
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn register_image(&self, bytes: &[u8]) -> Result<Registered> {
        let image = decode_image(bytes)?;
        let id = content_id(bytes);
        self.write_asset("images", &id, bytes)?;
        let summary = serde_json::json!({
            "height": image.height(),
            "width": image.width(),
            "channels": image.channels(),
        });
        self.images.write().expect("image lock").insert(id.clone(), Arc::new(image));
        Ok(Registered {
            id,
            kind: AssetKind::Image,
            bytes: bytes.len(),
            summary,
        })
    }

    pub fn register_checkpoint(&self, bytes: &[u8]) -> Result<Registered> {
        let checkpoint = Checkpoint::from_bytes(bytes)?;
        let id = content_id(bytes);
        self.write_asset("checkpoints", &id, bytes)?;
        let summary = serde_json::json!({
            "classes": checkpoint.model.classes(),
            "image_channels": checkpoint.model.config().image_channels,
            "param_count": checkpoint.model.param_count(),
            "confidnet": checkpoint.confidnet.is_some(),
        });
        self.checkpoints
            .write()
            .expect("checkpoint lock")
            .insert(id.clone(), Arc::new(checkpoint));
        Ok(Registered {
            id,
            kind: AssetKind::Checkpoint,
            bytes: bytes.len(),
            summary,
        })
    }

    fn read_asset(&self, dir: &str, id: &str, what: &str) -> Result<Vec<u8>> {
        if !valid_id(id) {
            return Err(Error::NotFound(format!("{what} {id}")));
        }
        let path = self.root.join(dir).join(id);
        std::fs::read(&path).map_err(|_| Error::NotFound(format!("{what} {id}")))
    }

    pub fn image(&self, id: &str) -> Result<Arc<RasterImage>> {
        if let Some(img) = self.images.read().expect("image lock").get(id) {
            return Ok(Arc::clone(img));
        }
        let img = Arc::new(decode_image(&self.read_asset("images", id, "image")?)?);
        self.images.write().expect("image lock").insert(id.to_string(), Arc::clone(&img));
        Ok(img)
    }

    pub fn checkpoint(&self, id: &str) -> Result<Arc<Checkpoint>> {
        if let Some(c) = self.checkpoints.read().expect("checkpoint lock").get(id) {
            return Ok(Arc::clone(c));
        }
        let c = Arc::new(Checkpoint::from_bytes(&self.read_asset("checkpoints", id, "checkpoint")?)?);
        self.checkpoints
            .write()
            .expect("checkpoint lock")
            .insert(id.to_string(), Arc::clone(&c));
        Ok(c)
    }

    pub fn create_session(&self, config: SessionConfig) -> Result<Arc<SessionHandle>> {
        let checkpoint = self.checkpoint(&config.checkpoint_id)?;
        let image = self.image(&config.image_id)?;
        let model = match config.weight_policy {
            WeightPolicy::ResetPerImage => checkpoint.model.clone(),
            WeightPolicy::Sequential => self
                .chains
                .lock()
                .expect("chain lock")
                .get(&config.checkpoint_id)
                .cloned()
                .unwrap_or_else(|| checkpoint.model.clone()),
        };
        let id = format!("s{}", self.next_session.fetch_add(1, Ordering::Relaxed));
        let session = Session::new(id.clone(), config, image, &checkpoint, model)?;
        let handle = Arc::new(SessionHandle::new(session));
        self.sessions
            .write()
            .expect("session lock")
            .insert(id, Arc::clone(&handle));
        Ok(handle)
    }

    pub fn session(&self, id: &str) -> Result<Arc<SessionHandle>> {
        self.sessions
            .read()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    /// Refines a session; sequential sessions also advance their chain.
    pub fn refine(&self, handle: &SessionHandle, mode: RefineMode) -> Result<RefineOutcome> {
        handle.mutate(|s| {
            let out = s.refine(mode)?;
            if mode == RefineMode::Disca && s.config().weight_policy == WeightPolicy::Sequential {
                self.chains
                    .lock()
                    .expect("chain lock")
                    .insert(s.config().checkpoint_id.clone(), s.model().clone());
            }
            Ok(out)
        })
    }
}
