//! Simulated annotation campaigns and the studies built on them.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{acquire, entropy, AcquisitionMethod, AcquisitionSettings, UncertaintyMap};
use crate::agent::{error_mask, sample_click, AgentConfig, AgentStrategy, ClickOutcome};
use crate::annotation::{AnnotationTensor, ClickAnnotation, EncodingConfig};
use crate::disca::{encode_for_refinement, refine, DiscaConfig, RefineRequest, SessionWeights, WeightPolicy};
use crate::error::{Error, Result};
use crate::metrics::{iou, pixel_accuracy, IouScore};
use crate::model::SegmentationModel;
use crate::prediction::PredictionMap;
use crate::query::{score_patches, CampaignState, QueryTarget, SearchLedger, StrategyConfig};
use crate::raster::{LabelMask, RasterImage};
use crate::tiling::{TileGrid, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Forward pass with encoded clicks, parameters untouched.
    AcOnly,
    /// Retrain on the clicks, then predict with them.
    Disca,
}

impl RefineMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::AcOnly => "ac_only",
            Self::Disca => "disca",
        }
    }
}

impl std::str::FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ac_only" => Ok(Self::AcOnly),
            "disca" => Ok(Self::Disca),
            other => Err(Error::InvalidArgument(format!("unknown refine mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub strategy: StrategyConfig,
    pub mode: RefineMode,
    pub agent: AgentConfig,
    /// Queries per image: patches for patch strategies, clicks for the
    /// whole-image oracle.
    pub budget: usize,
    #[serde(default = "DiscaConfig::toy")]
    pub disca: DiscaConfig,
    #[serde(default)]
    pub encoding: Option<EncodingConfig>,
    #[serde(default = "default_tile")]
    pub tile_size: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default = "default_clicks_per_patch")]
    pub clicks_per_patch: usize,
    #[serde(default)]
    pub weights: WeightPolicy,
    #[serde(default)]
    pub mc_dropout: crate::acquisition::McDropoutConfig,
    #[serde(default)]
    pub odin: crate::acquisition::OdinConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_tile() -> usize {
    64
}

fn default_overlap() -> usize {
    16
}

fn default_clicks_per_patch() -> usize {
    1
}

impl CampaignConfig {
    pub fn new(strategy: StrategyConfig, mode: RefineMode, budget: usize) -> Self {
        Self {
            strategy,
            mode,
            agent: AgentConfig::default(),
            budget,
            disca: DiscaConfig::toy(),
            encoding: None,
            tile_size: default_tile(),
            overlap: default_overlap(),
            clicks_per_patch: 1,
            weights: WeightPolicy::ResetPerImage,
            mc_dropout: Default::default(),
            odin: Default::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.agent.validate()?;
        self.disca.validate()?;
        if self.clicks_per_patch == 0 {
            return Err(Error::Config("clicks_per_patch must be >= 1".into()));
        }
        if self.tile_size <= self.overlap {
            return Err(Error::Config("tile_size must exceed overlap".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Wall time per phase of one step, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub query: f64,
    pub annotate: f64,
    pub refine: f64,
    pub measure: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.query + self.annotate + self.refine + self.measure
    }
}

/// One query of a single-image campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub strategy: String,
    pub window: Option<Window>,
    pub clicks: Vec<ClickAnnotation>,
    /// Candidate-set size of each agent decision.
    pub candidates: Vec<usize>,
    pub search_pixels: u64,
    pub iou_before: f64,
    pub iou_after: f64,
    pub per_class_iou_after: Vec<Option<f64>>,
    pub patch_iou_before: Option<f64>,
    pub patch_iou_after: Option<f64>,
    pub wall_time: PhaseTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCampaign {
    pub image: usize,
    pub initial: IouScore,
    pub steps: Vec<StepRecord>,
    pub ledger: SearchLedger,
}

/// Dataset-level point of the IoU-versus-budget curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRecord {
    pub budget: usize,
    pub mean_iou: f64,
    /// Mean over images of each class IoU, `None` when no image has it.
    pub per_class_iou: Vec<Option<f64>>,
    pub wall_time: PhaseTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub config: CampaignConfig,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub records: Vec<BudgetRecord>,
    pub images: Vec<ImageCampaign>,
}

impl CampaignResult {
    pub fn curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_iou).collect()
    }

    pub fn initial_iou(&self) -> f64 {
        self.records[0].mean_iou
    }

    pub fn final_iou(&self) -> f64 {
        self.records.last().expect("initial record").mean_iou
    }

    /// Mean of the IoU curve over budgets 0..=budget.
    pub fn area_under_curve(&self) -> f64 {
        let c = self.curve();
        c.iter().sum::<f64>() / c.len() as f64
    }

    /// Copy with every wall time zeroed.
    pub fn without_timings(&self) -> CampaignResult {
        let mut out = self.clone();
        for r in &mut out.records {
            r.wall_time = PhaseTimes::default();
        }
        for img in &mut out.images {
            for s in &mut img.steps {
                s.wall_time = PhaseTimes::default();
            }
        }
        out
    }

    /// Hash of everything except wall times.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.without_timings()).expect("result serializes");
        hex::encode(Sha256::digest(json))
    }

    /// One JSON object per step.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        let config_hash = self.config.hash();
        for img in &self.images {
            for s in &img.steps {
                let mut v = serde_json::to_value(s)?;
                v["image"] = img.image.into();
                v["mode"] = self.config.mode.name().into();
                v["seed"] = self.seed.into();
                v["config_hash"] = config_hash[..16].into();
                writeln!(out, "{v}").map_err(|e| Error::io(Path::new("<campaign log>"), e))?;
            }
        }
        Ok(())
    }
}

fn mean_per_class(scores: &[IouScore]) -> Vec<Option<f64>> {
    let n = scores.first().map_or(0, |s| s.per_class.len());
    (0..n)
        .map(|k| {
            let vals: Vec<f64> = scores.iter().filter_map(|s| s.per_class[k]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

fn encoding_for(cfg: &CampaignConfig, model: &SegmentationModel) -> EncodingConfig {
    cfg.encoding.unwrap_or(model.config().encoding)
}

/// Working state of one image's campaign.
struct ImageRun<'a> {
    image: &'a RasterImage,
    labels: &'a LabelMask,
    grid: TileGrid,
    p0: PredictionMap,
    current: PredictionMap,
    clicks: Vec<ClickAnnotation>,
}

impl ImageRun<'_> {
    fn clicks_in(&self, window: &Window) -> Vec<ClickAnnotation> {
        self.clicks.iter().filter_map(|c| c.relative_to(window)).collect()
    }
}

fn whole_window(image: &RasterImage) -> Window {
    Window::new(0, 0, image.height(), image.width())
}

fn all_annotations(
    model: &SegmentationModel,
    run: &ImageRun<'_>,
    encoding: &EncodingConfig,
) -> Result<AnnotationTensor> {
    encode_for_refinement(&run.clicks, encoding, run.image, model.classes(), &run.p0, Some(run.labels))
}

fn uncertainty(
    method: AcquisitionMethod,
    model: &SegmentationModel,
    run: &ImageRun<'_>,
    encoding: &EncodingConfig,
    settings: &AcquisitionSettings,
) -> Result<UncertaintyMap> {
    match method {
        AcquisitionMethod::Entropy => Ok(entropy(&run.current)),
        _ => {
            let ann = all_annotations(model, run, encoding)?;
            acquire(method, model, run.image, &ann, settings)
        }
    }
}

/// Applies the clicks gathered for `window`, updating the model (DISCA) and
/// the running prediction.
fn apply_refinement(
    model: &mut SegmentationModel,
    run: &mut ImageRun<'_>,
    window: Window,
    cfg: &CampaignConfig,
    encoding: &EncodingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    match cfg.mode {
        RefineMode::AcOnly => {
            // Same tiled pass as the initial prediction, so pixels away from
            // the clicks keep their values exactly.
            let ann = all_annotations(model, run, encoding)?;
            run.current = model.predict_tiled(run.image, &ann, &run.grid)?;
        }
        RefineMode::Disca => {
            let crop = run.image.crop(&window);
            let p0 = run.p0.crop(&window);
            let labels = run.labels.crop(&window);
            let local = run.clicks_in(&window);
            let request = RefineRequest {
                image: &crop,
                clicks: &local,
                p0: &p0,
                labels: Some(&labels),
            };
            refine(model, &request, &cfg.disca, encoding, rng)?;
            let ann = all_annotations(model, run, encoding)?;
            run.current = model.predict_tiled(run.image, &ann, &run.grid)?;
        }
    }
    Ok(())
}

fn patch_iou(prediction: &PredictionMap, labels: &LabelMask, window: &Window) -> Result<f64> {
    Ok(iou(&prediction.crop(window), &labels.crop(window))?.mean)
}

/// Runs the query, annotate, refine, measure loop on one image.
fn run_image(
    model: &mut SegmentationModel,
    index: usize,
    image: &RasterImage,
    labels: &LabelMask,
    cfg: &CampaignConfig,
    settings: &AcquisitionSettings,
) -> Result<ImageCampaign> {
    let encoding = encoding_for(cfg, model);
    let grid = TileGrid::new(image.height(), image.width(), cfg.tile_size, cfg.overlap)?;
    let empty = AnnotationTensor::zeros(model.classes(), image.height(), image.width());
    let p0 = model.predict_tiled(image, &empty, &grid)?.freeze();
    let initial = iou(&p0, labels)?;
    let mut run = ImageRun {
        image,
        labels,
        grid: grid.clone(),
        current: p0.clone(),
        p0,
        clicks: Vec::new(),
    };
    let image_seed = cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut state = CampaignState::new(grid, cfg.strategy.seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ image_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    let mut agent_rng = ChaCha8Rng::seed_from_u64(cfg.agent.seed ^ image_seed.rotate_left(17));
    let mut steps = Vec::with_capacity(cfg.budget);
    let mut last_map: Option<UncertaintyMap> = None;

    for step in 1..=cfg.budget {
        let mut times = PhaseTimes::default();
        let t = Instant::now();
        let needs_map = cfg.agent.strategy.needs_uncertainty();
        if let Some(method) = cfg.strategy.acquisition_method {
            let refresh = !state.has_ranking()
                || cfg.mode == RefineMode::Disca
                || cfg.strategy.refresh_without_retraining;
            if refresh {
                let map = uncertainty(method, model, &run, &encoding, settings)?;
                state.set_ranking(score_patches(&map, state.grid())?);
                last_map = Some(map);
            }
        } else if needs_map && (last_map.is_none() || cfg.mode == RefineMode::Disca) {
            last_map = Some(entropy(&run.current));
        }
        let target = match state.next_query(&cfg.strategy, Some(&run.current), Some(labels)) {
            Ok(t) => t,
            Err(Error::Exhausted) => break,
            Err(e) => return Err(e.with_context(format!("image {index}, step {step}"))),
        };
        times.query = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let iou_before = iou(&run.current, labels)?.mean;
        let (window, mut clicks, mut candidates) = match &target {
            QueryTarget::Patch(q) => (q.window, Vec::new(), Vec::new()),
            QueryTarget::Point { row, col, component_size } => {
                let class_id = labels.get(*row, *col).expect("error pixels are labelled");
                (
                    whole_window(image),
                    vec![ClickAnnotation::new(*row, *col, class_id, crate::annotation::Origin::Simulated)],
                    vec![*component_size],
                )
            }
        };
        if let QueryTarget::Patch(_) = target {
            for _ in 0..cfg.clicks_per_patch {
                let outcome = sample_click(Some(window), &run.current, labels, last_map.as_ref(), &cfg.agent, &mut agent_rng)?;
                if let ClickOutcome::Click { click, candidates: n, .. } = outcome {
                    clicks.push(click);
                    candidates.push(n);
                }
            }
        }
        times.annotate = t.elapsed().as_secs_f64();
        let patch_before = match target {
            QueryTarget::Patch(_) => Some(patch_iou(&run.current, labels, &window)?),
            QueryTarget::Point { .. } => None,
        };

        let t = Instant::now();
        if !clicks.is_empty() {
            run.clicks.extend(clicks.iter().copied());
            apply_refinement(model, &mut run, window, cfg, &encoding, &mut rng)
                .map_err(|e| e.with_context(format!("image {index}, step {step}")))?;
        }
        times.refine = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let after = iou(&run.current, labels)?;
        let patch_after = match target {
            QueryTarget::Patch(_) => Some(patch_iou(&run.current, labels, &window)?),
            QueryTarget::Point { .. } => None,
        };
        times.measure = t.elapsed().as_secs_f64();
        steps.push(StepRecord {
            step,
            strategy: cfg.strategy.name(),
            window: matches!(target, QueryTarget::Patch(_)).then_some(window),
            clicks,
            candidates,
            search_pixels: window_search_pixels(&target, image),
            iou_before,
            iou_after: after.mean,
            per_class_iou_after: after.per_class,
            patch_iou_before: patch_before,
            patch_iou_after: patch_after,
            wall_time: times,
        });
    }
    Ok(ImageCampaign {
        image: index,
        initial,
        steps,
        ledger: state.ledger.clone(),
    })
}

fn window_search_pixels(target: &QueryTarget, image: &RasterImage) -> u64 {
    match target {
        QueryTarget::Patch(q) => q.window.area() as u64,
        QueryTarget::Point { .. } => (image.height() * image.width()) as u64,
    }
}

/// Runs a campaign on every image and aggregates the IoU-versus-budget
/// curve. Images that run out of queries keep their last IoU.
pub fn run_campaign(
    model: &SegmentationModel,
    dataset: &[(RasterImage, LabelMask)],
    cfg: &CampaignConfig,
    settings: &AcquisitionSettings,
) -> Result<CampaignResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("campaign dataset is empty".into()));
    }
    let mut weights = SessionWeights::new(model.clone(), cfg.weights);
    let mut images = Vec::with_capacity(dataset.len());
    for (i, (image, labels)) in dataset.iter().enumerate() {
        let m = weights.begin_image();
        images.push(run_image(m, i, image, labels, cfg, settings)?);
    }
    let mut records = Vec::with_capacity(cfg.budget + 1);
    for budget in 0..=cfg.budget {
        let mut scores = Vec::with_capacity(images.len());
        let mut time = PhaseTimes::default();
        let mut any = budget == 0;
        for img in &images {
            if budget == 0 {
                scores.push(img.initial.clone());
                continue;
            }
            let step = img.steps.get(budget - 1);
            any |= step.is_some();
            if let Some(s) = step {
                time.query += s.wall_time.query;
                time.annotate += s.wall_time.annotate;
                time.refine += s.wall_time.refine;
                time.measure += s.wall_time.measure;
            }
            scores.push(match img.steps.get(budget - 1).or(img.steps.last()) {
                Some(s) => IouScore {
                    mean: s.iou_after,
                    per_class: s.per_class_iou_after.clone(),
                },
                None => img.initial.clone(),
            });
        }
        if !any {
            break;
        }
        records.push(BudgetRecord {
            budget,
            mean_iou: scores.iter().map(|s| s.mean).sum::<f64>() / scores.len() as f64,
            per_class_iou: mean_per_class(&scores),
            wall_time: time,
        });
    }
    Ok(CampaignResult {
        config: cfg.clone(),
        seed: cfg.seed,
        checkpoint_hash: model.param_hash(),
        records,
        images,
    })
}

/// One arm of the refinement ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub mode: RefineMode,
    pub ac_enabled: bool,
    pub regularization_enabled: bool,
    pub lambda: f64,
}

impl AblationArm {
    fn new(name: &str, mode: RefineMode, ac: bool, reg: bool, lambda: f64) -> Self {
        Self {
            name: name.into(),
            mode,
            ac_enabled: ac,
            regularization_enabled: reg,
            lambda,
        }
    }

    /// Clicks as input channels only.
    pub fn ac() -> Self {
        Self::new("ac", RefineMode::AcOnly, true, false, 0.0)
    }

    /// Retraining with the annotation channels always zeroed, no recall term.
    pub fn wtp() -> Self {
        Self::new("wtp", RefineMode::Disca, false, false, 0.0)
    }

    pub fn wtp_reg() -> Self {
        Self::new("wtp_reg", RefineMode::Disca, false, true, 1.0)
    }

    pub fn ac_wtp() -> Self {
        Self::new("ac_wtp", RefineMode::Disca, true, false, 0.0)
    }

    pub fn disca(lambda: f64) -> Self {
        Self::new(&format!("disca_lambda_{lambda}"), RefineMode::Disca, true, true, lambda)
    }

    pub fn standard() -> Vec<Self> {
        vec![Self::ac(), Self::wtp(), Self::wtp_reg(), Self::ac_wtp(), Self::disca(1.0), Self::disca(10.0)]
    }

    pub fn apply(&self, base: &CampaignConfig) -> CampaignConfig {
        let mut cfg = base.clone();
        cfg.mode = self.mode;
        cfg.disca.ac_enabled = self.ac_enabled;
        cfg.disca.regularization_enabled = self.regularization_enabled;
        cfg.disca.lambda = self.lambda;
        cfg
    }
}

/// Runs every arm under the same seeds.
pub fn run_ablation(
    model: &SegmentationModel,
    dataset: &[(RasterImage, LabelMask)],
    base: &CampaignConfig,
    arms: &[AblationArm],
    settings: &AcquisitionSettings,
) -> Result<Vec<(AblationArm, CampaignResult)>> {
    arms.iter()
        .map(|arm| Ok((arm.clone(), run_campaign(model, dataset, &arm.apply(base), settings)?)))
        .collect()
}

/// Crop sampling shared by the crop studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropStudyConfig {
    pub crops: usize,
    pub crop_size: usize,
    pub agent: AgentConfig,
    pub disca: DiscaConfig,
    pub seed: u64,
}

impl Default for CropStudyConfig {
    fn default() -> Self {
        Self {
            crops: 100,
            crop_size: 64,
            agent: AgentConfig::default(),
            disca: DiscaConfig::toy(),
            seed: 0,
        }
    }
}

/// Uniform crop over valid top-left corners of a uniformly chosen image.
fn sample_crop(dataset: &[(RasterImage, LabelMask)], size: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Window)> {
    let i = rng.gen_range(0..dataset.len());
    let (img, _) = &dataset[i];
    if img.height() < size || img.width() < size {
        return Err(Error::InvalidArgument(format!(
            "crop size {size} exceeds image {}x{}",
            img.height(),
            img.width()
        )));
    }
    let row = rng.gen_range(0..=img.height() - size);
    let col = rng.gen_range(0..=img.width() - size);
    Ok((i, Window::new(row, col, size, size)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub image: usize,
    pub window: Window,
    /// Size of the error component the click landed in.
    pub error_size: usize,
    pub initial_accuracy: f64,
    pub initial_iou: f64,
    pub ac_gain: f64,
    pub disca_gain: f64,
    pub best: RefineMode,
}

/// Compares the IoU gain of one click under AC and under DISCA, crop by
/// crop. Crops without errors, or where the agent declines to click, are
/// skipped.
pub fn size_vs_method_study(
    model: &SegmentationModel,
    dataset: &[(RasterImage, LabelMask)],
    cfg: &CropStudyConfig,
) -> Result<Vec<CropRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoding = model.config().encoding;
    let mut out = Vec::new();
    for _ in 0..cfg.crops {
        let (i, window) = sample_crop(dataset, cfg.crop_size, &mut rng)?;
        let image = dataset[i].0.crop(&window);
        let labels = dataset[i].1.crop(&window);
        let p0 = model.predict_image_only(&image)?.freeze();
        if error_mask(&p0, &labels)?.iter().all(|e| !e) {
            continue;
        }
        let entropy_map = entropy(&p0);
        let outcome = sample_click(None, &p0, &labels, Some(&entropy_map), &cfg.agent, &mut rng)?;
        let ClickOutcome::Click { click, component_size, .. } = outcome else {
            continue;
        };
        let clicks = [click];
        let initial_iou = iou(&p0, &labels)?.mean;
        let ann = encode_for_refinement(&clicks, &encoding, &image, model.classes(), &p0, Some(&labels))?;
        let ac_iou = iou(&model.forward(&image, &ann)?, &labels)?.mean;
        let mut tuned = model.clone();
        let request = RefineRequest {
            image: &image,
            clicks: &clicks,
            p0: &p0,
            labels: Some(&labels),
        };
        let (refined, _) = refine(&mut tuned, &request, &cfg.disca, &encoding, &mut rng)?;
        let disca_iou = iou(&refined, &labels)?.mean;
        let (ac_gain, disca_gain) = (ac_iou - initial_iou, disca_iou - initial_iou);
        out.push(CropRecord {
            image: i,
            window,
            error_size: component_size.unwrap_or(0),
            initial_accuracy: pixel_accuracy(&p0, &labels)?,
            initial_iou,
            ac_gain,
            disca_gain,
            best: if disca_gain > ac_gain { RefineMode::Disca } else { RefineMode::AcOnly },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub image: usize,
    pub window: Window,
    pub strategy: AgentStrategy,
    pub clicked: bool,
    pub initial_iou: f64,
    pub gain: f64,
}

/// One click per crop for each agent strategy, all strategies seeing the
/// same crops; the uncertainty map is the entropy of the initial
/// prediction.
pub fn guidance_study(
    model: &SegmentationModel,
    dataset: &[(RasterImage, LabelMask)],
    cfg: &CropStudyConfig,
    strategies: &[AgentStrategy],
    mode: RefineMode,
) -> Result<Vec<GuidanceRecord>> {
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoding = model.config().encoding;
    let mut out = Vec::new();
    for crop in 0..cfg.crops {
        let (i, window) = sample_crop(dataset, cfg.crop_size, &mut crop_rng)?;
        let image = dataset[i].0.crop(&window);
        let labels = dataset[i].1.crop(&window);
        let p0 = model.predict_image_only(&image)?.freeze();
        let initial_iou = iou(&p0, &labels)?.mean;
        let map = entropy(&p0);
        for &strategy in strategies {
            let agent = AgentConfig {
                strategy,
                ..cfg.agent.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((crop as u64) << 8) ^ strategy as u64);
            let outcome = sample_click(None, &p0, &labels, Some(&map), &agent, &mut rng)?;
            let gain = match outcome.click() {
                None => 0.0,
                Some(click) => {
                    let clicks = [click];
                    let after = match mode {
                        RefineMode::AcOnly => {
                            let ann = encode_for_refinement(&clicks, &encoding, &image, model.classes(), &p0, Some(&labels))?;
                            model.forward(&image, &ann)?
                        }
                        RefineMode::Disca => {
                            let mut tuned = model.clone();
                            let request = RefineRequest {
                                image: &image,
                                clicks: &clicks,
                                p0: &p0,
                                labels: Some(&labels),
                            };
                            refine(&mut tuned, &request, &cfg.disca, &encoding, &mut rng)?.0
                        }
                    };
                    iou(&after, &labels)?.mean - initial_iou
                }
            };
            out.push(GuidanceRecord {
                image: i,
                window,
                strategy,
                clicked: outcome.click().is_some(),
                initial_iou,
                gain,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub image: usize,
    /// Image-only IoU of the checkpoint on this image.
    pub checkpoint_iou: f64,
    /// Image-only IoU of the carried-over model before any click here.
    pub initial_iou: f64,
    pub final_iou: f64,
}

/// Refines image after image with DISCA under the given weight policy.
pub fn sequential_study(
    model: &SegmentationModel,
    sequence: &[(RasterImage, LabelMask)],
    base: &CampaignConfig,
    policy: WeightPolicy,
    settings: &AcquisitionSettings,
) -> Result<Vec<SequenceRecord>> {
    let mut cfg = base.clone();
    cfg.mode = RefineMode::Disca;
    cfg.validate()?;
    let mut weights = SessionWeights::new(model.clone(), policy);
    let mut out = Vec::with_capacity(sequence.len());
    for (i, (image, labels)) in sequence.iter().enumerate() {
        let grid = TileGrid::new(image.height(), image.width(), cfg.tile_size, cfg.overlap)?;
        let empty = AnnotationTensor::zeros(model.classes(), image.height(), image.width());
        let checkpoint_iou = iou(&model.predict_tiled(image, &empty, &grid)?, labels)?.mean;
        let m = weights.begin_image();
        let campaign = run_image(m, i, image, labels, &cfg, settings)?;
        out.push(SequenceRecord {
            image: i,
            checkpoint_iou,
            initial_iou: campaign.initial.mean,
            final_iou: campaign.steps.last().map_or(campaign.initial.mean, |s| s.iou_after),
        });
    }
    Ok(out)
}
