//! One image, one model copy, one click history.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{acquire, entropy, AcquisitionMethod, AcquisitionSettings, McDropoutConfig, OdinConfig, UncertaintyMap};
use crate::annotation::{AnnotationTensor, ClickAnnotation, EncodingConfig, EncodingKind, Origin};
use crate::checkpoint::Checkpoint;
use crate::disca::{encode_for_refinement, refine, DiscaConfig, RefineRequest, WeightPolicy};
use crate::error::{Error, Result};
use crate::experiment::RefineMode;
use crate::model::SegmentationModel;
use crate::prediction::PredictionMap;
use crate::query::{score_patches, PatchQuery, PatchStatus};
use crate::raster::RasterImage;
use crate::tiling::{TileGrid, Window};

/// Parameter snapshots kept for undo.
pub const SNAPSHOT_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPredictionPolicy {
    /// The recall target stays the prediction computed at session start.
    #[default]
    Frozen,
    /// The recall target becomes the latest prediction after each retraining.
    Refresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub checkpoint_id: String,
    pub image_id: String,
    #[serde(default)]
    pub encoding: Option<EncodingConfig>,
    #[serde(default)]
    pub disca: DiscaConfig,
    #[serde(default)]
    pub weight_policy: WeightPolicy,
    #[serde(default)]
    pub initial_prediction: InitialPredictionPolicy,
    #[serde(default = "default_tile")]
    pub tile_size: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default)]
    pub mc_dropout: McDropoutConfig,
    #[serde(default)]
    pub odin: OdinConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_tile() -> usize {
    64
}

fn default_overlap() -> usize {
    16
}

impl SessionConfig {
    pub fn new(checkpoint_id: impl Into<String>, image_id: impl Into<String>) -> Self {
        Self {
            checkpoint_id: checkpoint_id.into(),
            image_id: image_id.into(),
            encoding: None,
            disca: DiscaConfig::default(),
            weight_policy: WeightPolicy::default(),
            initial_prediction: InitialPredictionPolicy::default(),
            tile_size: default_tile(),
            overlap: default_overlap(),
            mc_dropout: McDropoutConfig::default(),
            odin: OdinConfig::default(),
            seed: 0,
        }
    }

    /// Short digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// A click as sent by a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickInput {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub mode: RefineMode,
    pub clicks_applied: usize,
    /// Windows the network was retrained on, in order.
    pub retrained_windows: Vec<Window>,
    /// Loss per SGD step, one list per retrained window.
    pub losses: Vec<Vec<f64>>,
    pub snapshot_depth: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UndoOutcome {
    pub undone: bool,
    pub restored_parameters: bool,
    pub total_clicks: usize,
    pub snapshot_depth: usize,
}

#[derive(Debug, Clone)]
struct Snapshot {
    params: Vec<f32>,
    prediction: PredictionMap,
    p0: PredictionMap,
    applied: usize,
    refined_before: usize,
    refined_after: usize,
}

/// Mutable session state. Every mutation goes through `&mut self`; the
/// service serializes those per session.
#[derive(Debug)]
pub struct Session {
    id: String,
    config: SessionConfig,
    config_hash: String,
    image: Arc<RasterImage>,
    settings: AcquisitionSettings,
    start_model: SegmentationModel,
    model: SegmentationModel,
    encoding: EncodingConfig,
    grid: TileGrid,
    p0: PredictionMap,
    start_p0: PredictionMap,
    current: PredictionMap,
    clicks: Vec<ClickAnnotation>,
    applied: usize,
    refined: usize,
    snapshots: VecDeque<Snapshot>,
    annotated: Vec<bool>,
    rng: ChaCha8Rng,
}

impl Session {
    /// `model` is the starting weights chosen by the caller's weight policy.
    pub fn new(
        id: impl Into<String>,
        config: SessionConfig,
        image: Arc<RasterImage>,
        checkpoint: &Checkpoint,
        model: SegmentationModel,
    ) -> Result<Self> {
        config.disca.validate()?;
        let encoding = config.encoding.unwrap_or(model.config().encoding);
        encoding.validate()?;
        if encoding.kind == EncodingKind::ConnectedGroundtruth {
            return Err(Error::InvalidArgument(
                "connected_groundtruth needs ground truth, which a live session does not have".into(),
            ));
        }
        if image.channels() != model.config().image_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, checkpoint expects {}",
                image.channels(),
                model.config().image_channels
            )));
        }
        let grid = TileGrid::new(image.height(), image.width(), config.tile_size, config.overlap)?;
        let empty = AnnotationTensor::zeros(model.classes(), image.height(), image.width());
        let p0 = model.predict_tiled(&image, &empty, &grid)?.freeze();
        let settings = AcquisitionSettings {
            mc_dropout: config.mc_dropout.clone(),
            odin: config.odin.clone(),
            confidnet: checkpoint.confidnet.clone(),
        };
        Ok(Self {
            id: id.into(),
            config_hash: config.hash(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            annotated: vec![false; grid.len()],
            settings,
            start_model: model.clone(),
            model,
            encoding,
            grid,
            current: p0.clone(),
            start_p0: p0.clone(),
            p0,
            image,
            clicks: Vec::new(),
            applied: 0,
            refined: 0,
            snapshots: VecDeque::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn model(&self) -> &SegmentationModel {
        &self.model
    }

    pub fn prediction(&self) -> &PredictionMap {
        &self.current
    }

    pub fn initial_prediction(&self) -> &PredictionMap {
        &self.p0
    }

    pub fn clicks(&self) -> &[ClickAnnotation] {
        &self.clicks
    }

    pub fn clicks_applied(&self) -> usize {
        self.applied
    }

    pub fn snapshot_depth(&self) -> usize {
        self.snapshots.len()
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    /// Digest of everything a mutation could change.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model.param_hash().as_bytes());
        for v in self.current.probabilities().iter().chain(self.p0.probabilities().iter()) {
            h.update(v.to_le_bytes());
        }
        for c in &self.clicks {
            h.update(serde_json::to_vec(c).expect("click serializes"));
        }
        h.update((self.applied as u64).to_le_bytes());
        h.update((self.refined as u64).to_le_bytes());
        h.update((self.snapshots.len() as u64).to_le_bytes());
        h.update(self.annotated.iter().map(|&a| u8::from(a)).collect::<Vec<_>>());
        hex::encode(h.finalize())
    }

    /// Appends clicks after validating all of them; returns the pending count.
    pub fn submit_clicks(&mut self, clicks: &[ClickInput]) -> Result<usize> {
        let classes = self.model.classes();
        let parsed: Vec<ClickAnnotation> = clicks
            .iter()
            .map(|c| ClickAnnotation::new(c.row, c.col, c.class_id, Origin::Human))
            .collect();
        for c in &parsed {
            c.check(self.image.height(), self.image.width(), classes)?;
        }
        for c in &parsed {
            for (i, w) in self.grid.windows().enumerate() {
                if w.contains(c.row, c.col) {
                    self.annotated[i] = true;
                }
            }
        }
        self.clicks.extend(parsed);
        Ok(self.clicks.len() - self.applied)
    }

    fn annotations(&self, clicks: &[ClickAnnotation]) -> Result<AnnotationTensor> {
        encode_for_refinement(clicks, &self.encoding, &self.image, self.model.classes(), &self.p0, None)
    }

    fn predict(&self, clicks: &[ClickAnnotation]) -> Result<PredictionMap> {
        let ann = self.annotations(clicks)?;
        self.model.predict_tiled(&self.image, &ann, &self.grid)
    }

    pub fn refine(&mut self, mode: RefineMode) -> Result<RefineOutcome> {
        let start = Instant::now();
        let mut retrained_windows = Vec::new();
        let mut losses = Vec::new();
        if mode == RefineMode::Disca && self.refined < self.clicks.len() {
            // Grid windows holding the new clicks, in click order.
            for c in &self.clicks[self.refined..] {
                if let Some(w) = self.grid.windows().find(|w| w.contains(c.row, c.col)) {
                    if !retrained_windows.contains(&w) {
                        retrained_windows.push(w);
                    }
                }
            }
            let snapshot = Snapshot {
                params: self.model.params().to_vec(),
                prediction: self.current.clone(),
                p0: self.p0.clone(),
                applied: self.applied,
                refined_before: self.refined,
                refined_after: self.clicks.len(),
            };
            for window in &retrained_windows {
                let crop = self.image.crop(window);
                let p0 = self.p0.crop(window);
                let local: Vec<ClickAnnotation> = self.clicks.iter().filter_map(|c| c.relative_to(window)).collect();
                let request = RefineRequest {
                    image: &crop,
                    clicks: &local,
                    p0: &p0,
                    labels: None,
                };
                match refine(&mut self.model, &request, &self.config.disca, &self.encoding, &mut self.rng) {
                    Ok((_, report)) => losses.push(report.losses),
                    Err(e) => {
                        self.model.set_params(&snapshot.params)?;
                        return Err(e);
                    }
                }
            }
            if self.snapshots.len() == SNAPSHOT_LIMIT {
                self.snapshots.pop_front();
            }
            self.snapshots.push_back(snapshot);
            self.refined = self.clicks.len();
        }
        self.current = self.predict(&self.clicks)?;
        self.applied = self.clicks.len();
        if mode == RefineMode::Disca && self.config.initial_prediction == InitialPredictionPolicy::Refresh {
            self.p0 = self.current.clone().freeze();
        }
        Ok(RefineOutcome {
            mode,
            clicks_applied: self.applied,
            retrained_windows,
            losses,
            snapshot_depth: self.snapshots.len(),
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    /// Removes the last click. If a retraining consumed it, the parameters
    /// and prediction from before that retraining come back.
    pub fn undo_last(&mut self) -> Result<UndoOutcome> {
        let Some(last) = self.clicks.len().checked_sub(1) else {
            return Ok(UndoOutcome {
                undone: false,
                restored_parameters: false,
                total_clicks: 0,
                snapshot_depth: self.snapshots.len(),
            });
        };
        let mut restored = false;
        if last < self.refined {
            let snap = match self.snapshots.back() {
                Some(s) if s.refined_before <= last && last < s.refined_after => {
                    self.snapshots.pop_back().expect("checked above")
                }
                _ => {
                    return Err(Error::NotUndoable(format!(
                        "click {last} was used by a retraining older than the last {SNAPSHOT_LIMIT}"
                    )))
                }
            };
            self.clicks.pop();
            self.model.set_params(&snap.params)?;
            self.current = snap.prediction;
            self.p0 = snap.p0;
            self.applied = snap.applied;
            self.refined = snap.refined_before;
            restored = true;
        } else {
            self.clicks.pop();
            if last < self.applied {
                self.current = self.predict(&self.clicks)?;
                self.applied = self.clicks.len();
            }
        }
        self.recount_annotated();
        Ok(UndoOutcome {
            undone: true,
            restored_parameters: restored,
            total_clicks: self.clicks.len(),
            snapshot_depth: self.snapshots.len(),
        })
    }

    fn recount_annotated(&mut self) {
        let annotated: Vec<bool> = self
            .grid
            .windows()
            .map(|w| self.clicks.iter().any(|c| w.contains(c.row, c.col)))
            .collect();
        self.annotated = annotated;
    }

    /// Back to the state right after creation.
    pub fn reset(&mut self) -> Result<()> {
        self.model.set_params(self.start_model.params())?;
        self.p0 = self.start_p0.clone();
        self.current = self.start_p0.clone();
        self.clicks.clear();
        self.applied = 0;
        self.refined = 0;
        self.snapshots.clear();
        self.annotated.iter_mut().for_each(|a| *a = false);
        self.rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        Ok(())
    }

    /// Read-only copy for concurrent readers.
    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            config_hash: self.config_hash.clone(),
            checkpoint_id: self.config.checkpoint_id.clone(),
            image_id: self.config.image_id.clone(),
            image: Arc::clone(&self.image),
            model: Arc::new(self.model.clone()),
            prediction: Arc::new(self.current.clone()),
            p0: Arc::new(self.p0.clone()),
            encoding: self.encoding,
            settings: self.settings.clone(),
            grid: self.grid.clone(),
            clicks: self.clicks.clone(),
            applied: self.applied,
            annotated: self.annotated.clone(),
            snapshot_depth: self.snapshots.len(),
            state_hash: self.state_hash(),
            seed: self.config.seed,
        }
    }
}

/// Immutable snapshot of a session, published after every mutation.
#[derive(Debug, Clone)]
pub struct SessionView {
    pub session_id: String,
    pub config_hash: String,
    pub checkpoint_id: String,
    pub image_id: String,
    pub image: Arc<RasterImage>,
    pub model: Arc<SegmentationModel>,
    pub prediction: Arc<PredictionMap>,
    pub p0: Arc<PredictionMap>,
    pub encoding: EncodingConfig,
    pub settings: AcquisitionSettings,
    pub grid: TileGrid,
    pub clicks: Vec<ClickAnnotation>,
    pub applied: usize,
    pub annotated: Vec<bool>,
    pub snapshot_depth: usize,
    pub state_hash: String,
    pub seed: u64,
}

/// Ordering used by [`SessionView::queries`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryStrategy {
    Random,
    Active(AcquisitionMethod),
}

impl std::str::FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            Ok(Self::Random)
        } else {
            s.parse().map(Self::Active)
        }
    }
}

impl SessionView {
    /// Uncertainty of the current prediction given the applied clicks.
    pub fn uncertainty(&self, method: AcquisitionMethod) -> Result<UncertaintyMap> {
        match method {
            AcquisitionMethod::Entropy => Ok(entropy(&self.prediction)),
            AcquisitionMethod::Confidnet if self.settings.confidnet.is_none() => Err(Error::Unavailable(
                "checkpoint carries no confidence head".into(),
            )),
            _ => {
                let ann = encode_for_refinement(
                    &self.clicks[..self.applied],
                    &self.encoding,
                    &self.image,
                    self.model.classes(),
                    &self.p0,
                    None,
                )?;
                acquire(method, &self.model, &self.image, &ann, &self.settings)
            }
        }
    }

    /// Top `k` pending patches.
    pub fn queries(&self, strategy: QueryStrategy, k: usize) -> Result<Vec<PatchQuery>> {
        let ranked = match strategy {
            QueryStrategy::Active(method) => score_patches(&self.uncertainty(method)?, &self.grid)?,
            QueryStrategy::Random => {
                let mut order: Vec<usize> = (0..self.grid.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
                order
                    .into_iter()
                    .enumerate()
                    .map(|(i, index)| PatchQuery {
                        index,
                        window: self.grid.tiles[index].window,
                        score: 0.0,
                        rank: i + 1,
                        status: PatchStatus::Pending,
                    })
                    .collect()
            }
        };
        Ok(ranked
            .into_iter()
            .filter(|q| !self.annotated[q.index])
            .take(k)
            .collect())
    }
}
