//! Per-pixel uncertainty: softmax entropy, MC Dropout variance, ODIN and a
//! learned confidence head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use image::{ImageBuffer, Luma};
use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationTensor;
use crate::error::{Error, Result};
use crate::model::{DropoutMode, SegmentationModel, SPATIAL_MULTIPLE};
use crate::nn::{relu_backward, relu_inplace, softmax_channels, Adam, Conv2d, ConvCache, ConvTCache, ConvTranspose2x2, ParamAllocator};
use crate::prediction::PredictionMap;
use crate::raster::{LabelMask, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionMethod {
    Entropy,
    McDropout,
    Odin,
    Confidnet,
}

impl AcquisitionMethod {
    pub const ALL: [AcquisitionMethod; 4] = [Self::Entropy, Self::McDropout, Self::Odin, Self::Confidnet];

    pub fn name(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::McDropout => "mc_dropout",
            Self::Odin => "odin",
            Self::Confidnet => "confidnet",
        }
    }
}

impl fmt::Display for AcquisitionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcquisitionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown acquisition method {s:?}")))
    }
}

/// Per-pixel scores, higher meaning more uncertain.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub scores: Array2<f64>,
    pub method: AcquisitionMethod,
    /// Seconds spent producing the map.
    pub wall_time: f64,
}

/// Sidecar written next to an exported map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySidecar {
    pub method: AcquisitionMethod,
    pub wall_time: f64,
    /// Score mapped to the brightest grey level.
    pub scale_max: f64,
    pub config: serde_json::Value,
}

impl UncertaintyMap {
    pub fn mean(&self) -> f64 {
        self.scores.mean().unwrap_or(0.0)
    }

    /// Writes a 16-bit grey PNG scaled to the map's maximum, and a JSON
    /// sidecar with the same stem.
    pub fn export(&self, path: &Path, config: serde_json::Value) -> Result<()> {
        let max = self.scores.iter().cloned().fold(0.0f64, f64::max);
        let (h, w) = self.scores.dim();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let v = self.scores[[y as usize, x as usize]];
            let level = if max > 0.0 { v / max * 65535.0 } else { 0.0 };
            Luma([level.round().clamp(0.0, 65535.0) as u16])
        });
        img.save(path)?;
        let sidecar = UncertaintySidecar {
            method: self.method,
            wall_time: self.wall_time,
            scale_max: max,
            config,
        };
        let side = path.with_extension("json");
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub fn entropy(prediction: &PredictionMap) -> UncertaintyMap {
    let start = Instant::now();
    let p = prediction.probabilities();
    let (n, h, w) = p.dim();
    let mut buf = vec![0.0; n];
    let scores = Array2::from_shape_fn((h, w), |(y, x)| {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = f64::from(p[[k, y, x]]);
        }
        entropy_of(&buf)
    });
    UncertaintyMap {
        scores,
        method: AcquisitionMethod::Entropy,
        wall_time: start.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McDropoutConfig {
    pub passes: usize,
    pub dropout_rate: f32,
    pub seed: u64,
}

impl Default for McDropoutConfig {
    fn default() -> Self {
        Self {
            passes: 5,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

/// Population variance across passes of each class probability, summed
/// over classes.
pub fn variance_across(passes: &[Array3<f32>]) -> Array2<f64> {
    let (n, h, w) = passes[0].dim();
    let count = passes.len() as f64;
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..n)
            .map(|k| {
                let mean = passes.iter().map(|p| f64::from(p[[k, y, x]])).sum::<f64>() / count;
                passes.iter().map(|p| (f64::from(p[[k, y, x]]) - mean).powi(2)).sum::<f64>() / count
            })
            .sum()
    })
}

pub fn mc_dropout(
    model: &SegmentationModel,
    image: &RasterImage,
    annotations: &AnnotationTensor,
    config: &McDropoutConfig,
) -> Result<UncertaintyMap> {
    if config.passes < 2 {
        return Err(Error::InvalidArgument(format!(
            "MC Dropout needs at least 2 passes, got {}",
            config.passes
        )));
    }
    if !(0.0..1.0).contains(&config.dropout_rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", config.dropout_rate)));
    }
    let start = Instant::now();
    let input = model.input_tensor(image, annotations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let passes: Vec<Array3<f32>> = (0..config.passes)
        .map(|_| {
            let mode = if config.dropout_rate > 0.0 {
                DropoutMode::On {
                    rate: config.dropout_rate,
                    rng: &mut rng,
                }
            } else {
                DropoutMode::Off
            };
            model.run(&input, mode).probabilities()
        })
        .collect();
    Ok(UncertaintyMap {
        scores: variance_across(&passes),
        method: AcquisitionMethod::McDropout,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdinConfig {
    pub epsilon: f32,
    pub temperature: f32,
    /// Step the input up the loss gradient instead of down it.
    pub ascend_loss: bool,
}

impl Default for OdinConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0 / 255.0,
            temperature: 100.0,
            ascend_loss: false,
        }
    }
}

/// Perturbs the image channels by `epsilon * sign(grad)` of the tempered
/// cross-entropy against the clean argmax, then scores one minus the
/// largest tempered probability.
pub fn odin(
    model: &SegmentationModel,
    image: &RasterImage,
    annotations: &AnnotationTensor,
    config: &OdinConfig,
) -> Result<UncertaintyMap> {
    if !(config.epsilon >= 0.0) || !(config.temperature >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ODIN needs epsilon >= 0 and temperature >= 1, got {} and {}",
            config.epsilon, config.temperature
        )));
    }
    let start = Instant::now();
    let mut input = model.input_tensor(image, annotations)?;
    let t = config.temperature;
    let trace = model.run(&input, DropoutMode::Off);
    if config.epsilon > 0.0 {
        let tempered = softmax_channels(&trace.logits, t);
        let (n, h, w) = tempered.dim();
        let mut dlogits = tempered;
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for k in 1..n {
                    if trace.logits[[k, y, x]] > trace.logits[[best, y, x]] {
                        best = k;
                    }
                }
                dlogits[[best, y, x]] -= 1.0;
            }
        }
        dlogits.mapv_inplace(|g| g / t);
        let dx = model
            .backward(&trace, &dlogits, None, true)
            .expect("input gradient requested");
        let direction = if config.ascend_loss { 1.0 } else { -1.0 };
        let c = image.channels();
        input
            .slice_mut(s![..c, .., ..])
            .zip_mut_with(&dx.slice(s![..c, .., ..]), |v, &g| {
                if g != 0.0 {
                    *v += direction * config.epsilon * g.signum();
                }
            });
    }
    let logits = if config.epsilon > 0.0 {
        model.run(&input, DropoutMode::Off).logits
    } else {
        trace.logits
    };
    let probs = softmax_channels(&logits, t);
    let (n, h, w) = probs.dim();
    let scores = Array2::from_shape_fn((h, w), |(y, x)| {
        let max = (0..n).map(|k| probs[[k, y, x]]).fold(f32::MIN, f32::max);
        1.0 - f64::from(max)
    });
    Ok(UncertaintyMap {
        scores,
        method: AcquisitionMethod::Odin,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Output widths of the confidence head after its transposed convolution.
pub const CONFIDNET_WIDTHS: [usize; 5] = [32, 120, 64, 32, 1];

/// Auxiliary confidence regressor on the model's bottleneck features: a
/// 2x2 transposed convolution then four 3x3 convolutions, a sigmoid, and a
/// nearest upsampling back to the input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidNetHead {
    up: ConvTranspose2x2,
    convs: [Conv2d; 4],
    params: Vec<f32>,
    in_channels: usize,
    /// Lineage of the model the head was trained for.
    pub model_lineage: String,
}

struct HeadTrace {
    up: (ConvTCache, Array3<f32>),
    convs: Vec<(ConvCache, Array3<f32>)>,
    /// Sigmoid output at the head's own resolution.
    confidence: Array3<f32>,
}

impl ConfidNetHead {
    /// Fresh head for `model`, with the last layer zeroed so it starts at a
    /// constant 0.5.
    pub fn new(model: &SegmentationModel, seed: u64) -> Self {
        let in_channels = model.config().widths[2];
        let (up, convs, len) = Self::layout(in_channels);
        let mut params = vec![0.0; len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        up.init(&mut params, &mut rng);
        for c in &convs[..3] {
            c.init(&mut params, &mut rng);
        }
        convs[3].zero(&mut params);
        Self {
            up,
            convs,
            params,
            in_channels,
            model_lineage: model.lineage().to_string(),
        }
    }

    pub fn from_parts(in_channels: usize, params: Vec<f32>, model_lineage: String) -> Result<Self> {
        let (up, convs, len) = Self::layout(in_channels);
        if params.len() != len {
            return Err(Error::Checkpoint(format!(
                "confidence head expects {len} parameters, found {}",
                params.len()
            )));
        }
        Ok(Self {
            up,
            convs,
            params,
            in_channels,
            model_lineage,
        })
    }

    fn layout(in_channels: usize) -> (ConvTranspose2x2, [Conv2d; 4], usize) {
        let w = CONFIDNET_WIDTHS;
        let mut a = ParamAllocator::default();
        let up = ConvTranspose2x2::new(&mut a, in_channels, w[0]);
        let convs = [
            Conv2d::new(&mut a, w[0], w[1], 3, 1),
            Conv2d::new(&mut a, w[1], w[2], 3, 1),
            Conv2d::new(&mut a, w[2], w[3], 3, 1),
            Conv2d::new(&mut a, w[3], w[4], 3, 1),
        ];
        (up, convs, a.len())
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    fn check_model(&self, model: &SegmentationModel) -> Result<()> {
        if model.lineage() != self.model_lineage || model.config().widths[2] != self.in_channels {
            return Err(Error::Checkpoint(format!(
                "confidence head belongs to model {}, not {}",
                short(&self.model_lineage),
                short(model.lineage())
            )));
        }
        Ok(())
    }

    fn run(&self, features: &Array3<f32>) -> HeadTrace {
        let p = &self.params;
        let (mut u, cache) = self.up.forward(p, features);
        relu_inplace(&mut u);
        let up = (cache, u);
        let mut convs = Vec::with_capacity(4);
        let mut x = up.1.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (mut y, cache) = conv.forward(p, &x);
            if i < 3 {
                relu_inplace(&mut y);
            }
            convs.push((cache, y.clone()));
            x = y;
        }
        let confidence = x.mapv(|z| 1.0 / (1.0 + (-z).exp()));
        HeadTrace { up, convs, confidence }
    }

    /// Accumulates parameter gradients given the gradient with respect to
    /// the sigmoid output.
    fn backward(&self, trace: &HeadTrace, dconf: &Array3<f32>, grads: &mut [f32]) {
        let p = &self.params;
        let mut d = dconf * &trace.confidence.mapv(|c| c * (1.0 - c));
        for i in (0..4).rev() {
            if i < 3 {
                relu_backward(&trace.convs[i].1, &mut d);
            }
            d = self.convs[i]
                .backward(p, &trace.convs[i].0, &d, Some(grads), true)
                .expect("input gradient requested");
        }
        relu_backward(&trace.up.1, &mut d);
        self.up.backward(p, &trace.up.0, &d, Some(grads), false);
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Upsampling factor from the head's output to the padded input.
const HEAD_STRIDE: usize = SPATIAL_MULTIPLE / 2;

fn upsample(conf: &Array3<f32>, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(y, x)| f64::from(conf[[0, y / HEAD_STRIDE, x / HEAD_STRIDE]]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidNetTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for ConfidNetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-4,
            seed: 0,
        }
    }
}

/// Trains the head to regress the probability the frozen model assigns to
/// the true class, with squared error over labelled pixels.
pub fn confidnet_train(
    model: &SegmentationModel,
    mut head: ConfidNetHead,
    dataset: &[(RasterImage, LabelMask)],
    config: &ConfidNetTrainConfig,
) -> Result<ConfidNetHead> {
    head.check_model(model)?;
    let mut samples = Vec::with_capacity(dataset.len());
    for (image, labels) in dataset {
        labels.check_shape(image.height(), image.width())?;
        let empty = AnnotationTensor::zeros(model.classes(), image.height(), image.width());
        let trace = model.run(&model.input_tensor(image, &empty)?, DropoutMode::Off);
        let probs = trace.probabilities();
        let target = Array2::from_shape_fn((image.height(), image.width()), |(y, x)| {
            labels.get(y, x).map(|c| probs[[c, y, x]])
        });
        samples.push((trace.bottleneck().clone(), target));
    }
    let mut adam = Adam::new(head.params.len(), config.learning_rate);
    let mut grads = vec![0.0f32; head.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (features, target) = &samples[i];
            let trace = head.run(features);
            let conf = &trace.confidence;
            let valid = target.iter().filter(|t| t.is_some()).count();
            if valid == 0 {
                continue;
            }
            let mut dconf = Array3::<f32>::zeros(conf.dim());
            let mut loss = 0.0f64;
            for ((y, x), t) in target.indexed_iter() {
                if let Some(t) = t {
                    let c = conf[[0, y / HEAD_STRIDE, x / HEAD_STRIDE]];
                    loss += f64::from((c - t) * (c - t));
                    dconf[[0, y / HEAD_STRIDE, x / HEAD_STRIDE]] += 2.0 * (c - t) / valid as f32;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            grads.fill(0.0);
            head.backward(&trace, &dconf, &mut grads);
            adam.step(&mut head.params, &grads);
            step += 1;
        }
    }
    Ok(head)
}

/// One minus the head's confidence.
pub fn confidnet_score(
    model: &SegmentationModel,
    image: &RasterImage,
    annotations: &AnnotationTensor,
    head: &ConfidNetHead,
) -> Result<UncertaintyMap> {
    head.check_model(model)?;
    let start = Instant::now();
    let trace = model.run(&model.input_tensor(image, annotations)?, DropoutMode::Off);
    let conf = head.run(trace.bottleneck()).confidence;
    let scores = upsample(&conf, image.height(), image.width()).mapv(|c| 1.0 - c);
    Ok(UncertaintyMap {
        scores,
        method: AcquisitionMethod::Confidnet,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Settings for [`acquire`].
#[derive(Debug, Clone, Default)]
pub struct AcquisitionSettings {
    pub mc_dropout: McDropoutConfig,
    pub odin: OdinConfig,
    pub confidnet: Option<ConfidNetHead>,
}

/// Computes an uncertainty map from scratch, including the forward passes
/// the method needs, so wall times are comparable across methods.
pub fn acquire(
    method: AcquisitionMethod,
    model: &SegmentationModel,
    image: &RasterImage,
    annotations: &AnnotationTensor,
    settings: &AcquisitionSettings,
) -> Result<UncertaintyMap> {
    match method {
        AcquisitionMethod::Entropy => {
            let start = Instant::now();
            let prediction = model.forward(image, annotations)?;
            let mut map = entropy(&prediction);
            map.wall_time = start.elapsed().as_secs_f64();
            Ok(map)
        }
        AcquisitionMethod::McDropout => mc_dropout(model, image, annotations, &settings.mc_dropout),
        AcquisitionMethod::Odin => odin(model, image, annotations, &settings.odin),
        AcquisitionMethod::Confidnet => {
            let head = settings
                .confidnet
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("confidnet scoring needs a trained head".into()))?;
            confidnet_score(model, image, annotations, head)
        }
    }
}
