//! Patch-grid queries: per-patch uncertainty, ranking, and the order in
//! which a campaign visits patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionMethod, UncertaintyMap};
use crate::agent::error_components;
use crate::error::{Error, Result};
use crate::prediction::PredictionMap;
use crate::raster::LabelMask;
use crate::tiling::{TileGrid, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchStatus {
    Pending,
    Annotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchQuery {
    /// Row-major index of the window in its grid.
    pub index: usize,
    pub window: Window,
    pub score: f64,
    /// 1-based rank by descending score.
    pub rank: usize,
    pub status: PatchStatus,
}

/// Mean uncertainty per window, ranked by descending score with ties going
/// to the lower window index. Returned in rank order.
pub fn score_patches(uncertainty: &UncertaintyMap, grid: &TileGrid) -> Result<Vec<PatchQuery>> {
    if uncertainty.scores.dim() != (grid.image_height, grid.image_width) {
        return Err(Error::Shape(format!(
            "uncertainty map {:?} does not cover the {}x{} grid",
            uncertainty.scores.dim(),
            grid.image_height,
            grid.image_width
        )));
    }
    let mut queries: Vec<PatchQuery> = grid
        .windows()
        .enumerate()
        .map(|(index, window)| {
            let patch = uncertainty.scores.slice(ndarray::s![window.rows(), window.cols()]);
            PatchQuery {
                index,
                window,
                score: patch.sum() / window.area() as f64,
                rank: 0,
                status: PatchStatus::Pending,
            }
        })
        .collect();
    queries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    for (i, q) in queries.iter_mut().enumerate() {
        q.rank = i + 1;
    }
    Ok(queries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    Active,
    WholeImageOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default)]
    pub acquisition_method: Option<AcquisitionMethod>,
    #[serde(default)]
    pub seed: u64,
    /// Re-score patches after every step even without retraining.
    #[serde(default)]
    pub refresh_without_retraining: bool,
}

impl StrategyConfig {
    pub fn random(seed: u64) -> Self {
        Self {
            kind: StrategyKind::Random,
            acquisition_method: None,
            seed,
            refresh_without_retraining: false,
        }
    }

    pub fn active(method: AcquisitionMethod, seed: u64) -> Self {
        Self {
            kind: StrategyKind::Active,
            acquisition_method: Some(method),
            seed,
            refresh_without_retraining: false,
        }
    }

    pub fn whole_image_oracle(seed: u64) -> Self {
        Self {
            kind: StrategyKind::WholeImageOracle,
            acquisition_method: None,
            seed,
            refresh_without_retraining: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.acquisition_method) {
            (StrategyKind::Active, None) => Err(Error::Config("active strategy needs an acquisition method".into())),
            (StrategyKind::Random | StrategyKind::WholeImageOracle, Some(_)) => Err(Error::Config(
                "acquisition method only applies to the active strategy".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match (self.kind, self.acquisition_method) {
            (StrategyKind::Active, Some(m)) => format!("active_{}", m.name()),
            (StrategyKind::Random, _) => "random".into(),
            (StrategyKind::WholeImageOracle, _) => "whole_image_oracle".into(),
            (StrategyKind::Active, None) => "active".into(),
        }
    }
}

/// Where the next click should be searched for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum QueryTarget {
    Patch(PatchQuery),
    /// Interior point of the largest error over the whole image.
    Point {
        row: usize,
        col: usize,
        component_size: usize,
    },
}

/// Per-click search-space bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchLedger {
    pub queries: usize,
    /// Pixels an annotator must inspect, summed over queries.
    pub pixels: u64,
}

impl SearchLedger {
    pub fn per_query(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.pixels as f64 / self.queries as f64
        }
    }
}

/// Visiting order bookkeeping for one campaign.
#[derive(Debug, Clone)]
pub struct CampaignState {
    grid: TileGrid,
    annotated: Vec<bool>,
    ranking: Option<Vec<PatchQuery>>,
    rng: ChaCha8Rng,
    /// Points already handed out by the whole-image oracle.
    pointed: Vec<(usize, usize)>,
    pub ledger: SearchLedger,
}

impl CampaignState {
    pub fn new(grid: TileGrid, seed: u64) -> Self {
        Self {
            annotated: vec![false; grid.len()],
            grid,
            ranking: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pointed: Vec::new(),
            ledger: SearchLedger::default(),
        }
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn pending(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| !self.annotated[i]).collect()
    }

    pub fn is_annotated(&self, index: usize) -> bool {
        self.annotated[index]
    }

    /// Installs fresh patch scores for the active strategy.
    pub fn set_ranking(&mut self, ranking: Vec<PatchQuery>) {
        self.ranking = Some(ranking);
    }

    pub fn has_ranking(&self) -> bool {
        self.ranking.is_some()
    }

    /// Pending queries in rank order, statuses filled in.
    pub fn ranked(&self) -> Vec<PatchQuery> {
        self.ranking
            .iter()
            .flatten()
            .map(|q| PatchQuery {
                status: if self.annotated[q.index] {
                    PatchStatus::Annotated
                } else {
                    PatchStatus::Pending
                },
                ..q.clone()
            })
            .collect()
    }

    pub fn mark_annotated(&mut self, index: usize) {
        self.annotated[index] = true;
    }

    fn window_query(&self, index: usize) -> PatchQuery {
        PatchQuery {
            index,
            window: self.grid.tiles[index].window,
            score: 0.0,
            rank: 0,
            status: PatchStatus::Pending,
        }
    }

    /// Chooses the next target and records its search cost. Patch targets
    /// are marked annotated.
    pub fn next_query(
        &mut self,
        strategy: &StrategyConfig,
        prediction: Option<&PredictionMap>,
        labels: Option<&LabelMask>,
    ) -> Result<QueryTarget> {
        strategy.validate()?;
        let target = match strategy.kind {
            StrategyKind::Random => {
                let pending = self.pending();
                if pending.is_empty() {
                    return Err(Error::Exhausted);
                }
                let index = pending[self.rng.gen_range(0..pending.len())];
                QueryTarget::Patch(self.window_query(index))
            }
            StrategyKind::Active => {
                let ranking = self
                    .ranking
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("active strategy queried before scoring".into()))?;
                let q = ranking
                    .iter()
                    .find(|q| !self.annotated[q.index])
                    .cloned()
                    .ok_or(Error::Exhausted)?;
                QueryTarget::Patch(q)
            }
            StrategyKind::WholeImageOracle => {
                let (prediction, labels) = prediction.zip(labels).ok_or_else(|| {
                    Error::InvalidArgument("whole-image oracle needs the prediction and labels".into())
                })?;
                // A component the annotator already clicked without fixing
                // it is passed over for the next largest one.
                let components = error_components(prediction, labels)?;
                let fresh = components
                    .iter()
                    .position(|c| !self.pointed.iter().any(|p| c.pixels.contains(p)))
                    .unwrap_or(0);
                let largest = components.into_iter().nth(fresh).ok_or(Error::Exhausted)?;
                self.pointed.push(largest.interior);
                QueryTarget::Point {
                    row: largest.interior.0,
                    col: largest.interior.1,
                    component_size: largest.size(),
                }
            }
        };
        self.ledger.queries += 1;
        match &target {
            QueryTarget::Patch(q) => {
                self.ledger.pixels += q.window.area() as u64;
                self.annotated[q.index] = true;
            }
            QueryTarget::Point { .. } => {
                self.ledger.pixels += (self.grid.image_height * self.grid.image_width) as u64;
            }
        }
        Ok(target)
    }

    /// Window of the grid cell containing a pixel (first in row-major order).
    pub fn window_containing(&self, row: usize, col: usize) -> Option<Window> {
        self.grid.windows().find(|w| w.contains(row, col))
    }
}
