//! Reference encoder-decoder segmentation network and its supervised
//! pretraining.
//!
//! The network is a three-stage LinkNet-style model: a stride-2 stem, three
//! encoder stages that halve the resolution, decoder stages that upsample
//! with 2x2 transposed convolutions and add the matching encoder output, and
//! a final transposed convolution back to full resolution. Dropout sites sit
//! at every encoder/decoder junction: the bottleneck and both skip
//! connections. Input is the image concatenated with one annotation channel
//! per class.

use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{
    encode, AnnotationTensor, ClickAnnotation, EncodingConfig, EncodingContext, EncodingKind, Origin,
};
use crate::error::{Error, Result};
use crate::nn::{
    dropout_mask, relu_backward, relu_inplace, softmax_channels, Adam, Conv2d, ConvCache,
    ConvTCache, ConvTranspose2x2, ParamAllocator,
};
use crate::prediction::PredictionMap;
use crate::raster::{LabelMask, RasterImage};
use crate::tiling::TileGrid;

/// Spatial extents are padded up to a multiple of this before the forward pass.
pub const SPATIAL_MULTIPLE: usize = 8;

/// Names of the dropout sites, in forward order.
pub const DROPOUT_SITES: [&str; 3] = ["bottleneck", "skip_quarter", "skip_half"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub classes: usize,
    pub widths: [usize; 3],
    pub dropout_rate: f32,
    /// Encoding the annotation channels were trained with.
    pub encoding: EncodingConfig,
}

impl ModelConfig {
    pub fn new(image_channels: usize, classes: usize) -> Self {
        Self {
            image_channels,
            classes,
            widths: [24, 48, 96],
            dropout_rate: 0.1,
            encoding: EncodingConfig::distance_transform(),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.image_channels + self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.classes < 2 {
            return Err(Error::InvalidArgument(
                "model needs at least one image channel and two classes".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        self.encoding.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    stem: Conv2d,
    enc1a: Conv2d,
    enc1b: Conv2d,
    enc2a: Conv2d,
    enc2b: Conv2d,
    enc3a: Conv2d,
    enc3b: Conv2d,
    dec3_up: ConvTranspose2x2,
    dec3: Conv2d,
    dec2_up: ConvTranspose2x2,
    dec2: Conv2d,
    head: ConvTranspose2x2,
}

impl Layers {
    fn build(cfg: &ModelConfig) -> (Self, usize) {
        let [w0, w1, w2] = cfg.widths;
        let mut a = ParamAllocator::default();
        let layers = Layers {
            stem: Conv2d::new(&mut a, cfg.input_channels(), w0, 3, 2),
            enc1a: Conv2d::new(&mut a, w0, w0, 3, 1),
            enc1b: Conv2d::new(&mut a, w0, w0, 3, 1),
            enc2a: Conv2d::new(&mut a, w0, w1, 3, 2),
            enc2b: Conv2d::new(&mut a, w1, w1, 3, 1),
            enc3a: Conv2d::new(&mut a, w1, w2, 3, 2),
            enc3b: Conv2d::new(&mut a, w2, w2, 3, 1),
            dec3_up: ConvTranspose2x2::new(&mut a, w2, w1),
            dec3: Conv2d::new(&mut a, w1, w1, 3, 1),
            dec2_up: ConvTranspose2x2::new(&mut a, w1, w0),
            dec2: Conv2d::new(&mut a, w0, w0, 3, 1),
            head: ConvTranspose2x2::new(&mut a, w0, cfg.classes),
        };
        (layers, a.len())
    }

    fn convs(&self) -> [&Conv2d; 9] {
        [
            &self.stem, &self.enc1a, &self.enc1b, &self.enc2a, &self.enc2b, &self.enc3a,
            &self.enc3b, &self.dec3, &self.dec2,
        ]
    }
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace {
    height: usize,
    width: usize,
    stem: (ConvCache, Array3<f32>),
    enc1a: (ConvCache, Array3<f32>),
    enc1b: (ConvCache, Array3<f32>),
    enc2a: (ConvCache, Array3<f32>),
    enc2b: (ConvCache, Array3<f32>),
    enc3a: (ConvCache, Array3<f32>),
    enc3b: (ConvCache, Array3<f32>),
    masks: [Option<Array3<f32>>; 3],
    dec3_up: (ConvTCache, Array3<f32>),
    dec3: (ConvCache, Array3<f32>),
    dec2_up: (ConvTCache, Array3<f32>),
    dec2: (ConvCache, Array3<f32>),
    head: ConvTCache,
    /// Logits cropped to the unpadded extent.
    pub logits: Array3<f32>,
}

impl Trace {
    /// Bottleneck activations (1/8 resolution of the padded input), the
    /// feature tap used by the auxiliary confidence head.
    pub fn bottleneck(&self) -> &Array3<f32> {
        &self.enc3b.1
    }

    pub fn probabilities(&self) -> Array3<f32> {
        softmax_channels(&self.logits, 1.0)
    }
}

/// Dropout behaviour of a single forward pass.
pub enum DropoutMode<'a> {
    Off,
    On { rate: f32, rng: &'a mut ChaCha8Rng },
    /// Caller-supplied masks for the bottleneck and the two skips, in
    /// [`DROPOUT_SITES`] order.
    Fixed(&'a [Array3<f32>; 3]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    config: ModelConfig,
    layers: Layers,
    params: Vec<f32>,
    /// Parameter hash of the checkpoint this model descends from. Refinement
    /// changes the parameters but not the lineage.
    lineage: String,
}

fn apply_mask(x: &Array3<f32>, mask: &Option<Array3<f32>>) -> Array3<f32> {
    match mask {
        Some(m) => x * m,
        None => x.clone(),
    }
}

fn conv_relu(layer: &Conv2d, params: &[f32], x: &Array3<f32>) -> (ConvCache, Array3<f32>) {
    let (mut y, cache) = layer.forward(params, x);
    relu_inplace(&mut y);
    (cache, y)
}

fn up_relu(layer: &ConvTranspose2x2, params: &[f32], x: &Array3<f32>) -> (ConvTCache, Array3<f32>) {
    let (mut y, cache) = layer.forward(params, x);
    relu_inplace(&mut y);
    (cache, y)
}

impl SegmentationModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, len) = Layers::build(&config);
        let mut params = vec![0.0; len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in layers.convs() {
            conv.init(&mut params, &mut rng);
        }
        for up in [&layers.dec3_up, &layers.dec2_up, &layers.head] {
            up.init(&mut params, &mut rng);
        }
        let lineage = hash_params(&params);
        Ok(Self {
            config,
            layers,
            params,
            lineage,
        })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let (layers, len) = Layers::build(&config);
        if params.len() != len {
            return Err(Error::Checkpoint(format!(
                "expected {len} parameters, found {}",
                params.len()
            )));
        }
        let lineage = hash_params(&params);
        Ok(Self {
            config,
            layers,
            params,
            lineage,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn lineage(&self) -> &str {
        &self.lineage
    }

    pub fn set_lineage(&mut self, lineage: String) {
        self.lineage = lineage;
    }

    /// Makes the current parameters the reference checkpoint.
    pub fn mark_checkpoint(&mut self) {
        self.lineage = self.param_hash();
    }

    /// Shapes of the dropout masks for an `height x width` input.
    pub fn dropout_shapes(&self, height: usize, width: usize) -> [(usize, usize, usize); 3] {
        let ph = height.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
        let pw = width.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
        let [w0, w1, w2] = self.config.widths;
        [(w2, ph / 8, pw / 8), (w1, ph / 4, pw / 4), (w0, ph / 2, pw / 2)]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        hash_params(&self.params)
    }

    /// Channels-first input: image channels followed by annotation channels.
    pub fn input_tensor(&self, image: &RasterImage, annotations: &AnnotationTensor) -> Result<Array3<f32>> {
        let (n, h, w) = annotations.dims();
        if image.channels() != self.config.image_channels {
            return Err(Error::Shape(format!(
                "model expects {} image channels, got {}",
                self.config.image_channels,
                image.channels()
            )));
        }
        if n != self.config.classes || h != image.height() || w != image.width() {
            return Err(Error::Shape(format!(
                "annotation tensor {n}x{h}x{w} does not match image {}x{} with {} classes",
                image.height(),
                image.width(),
                self.config.classes
            )));
        }
        let mut input = Array3::zeros((self.config.input_channels(), h, w));
        input
            .slice_mut(s![..self.config.image_channels, .., ..])
            .assign(&image.pixels());
        input
            .slice_mut(s![self.config.image_channels.., .., ..])
            .assign(&annotations.channels());
        Ok(input)
    }

    /// Runs the network on a raw channels-first input of any spatial size.
    pub fn run(&self, input: &Array3<f32>, dropout: DropoutMode<'_>) -> Trace {
        let (c, h, w) = input.dim();
        debug_assert_eq!(c, self.config.input_channels());
        let ph = h.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
        let pw = w.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
        let padded = if (ph, pw) == (h, w) {
            input.as_standard_layout().into_owned()
        } else {
            let mut p = Array3::zeros((c, ph, pw));
            p.slice_mut(s![.., ..h, ..w]).assign(input);
            p
        };
        let p = &self.params;
        let l = &self.layers;
        let stem = conv_relu(&l.stem, p, &padded);
        let enc1a = conv_relu(&l.enc1a, p, &stem.1);
        let enc1b = conv_relu(&l.enc1b, p, &enc1a.1);
        let enc2a = conv_relu(&l.enc2a, p, &enc1b.1);
        let enc2b = conv_relu(&l.enc2b, p, &enc2a.1);
        let enc3a = conv_relu(&l.enc3a, p, &enc2b.1);
        let enc3b = conv_relu(&l.enc3b, p, &enc3a.1);

        let masks: [Option<Array3<f32>>; 3] = match dropout {
            DropoutMode::On { rate, rng } if rate > 0.0 => [
                Some(dropout_mask(enc3b.1.dim(), rate, rng)),
                Some(dropout_mask(enc2b.1.dim(), rate, rng)),
                Some(dropout_mask(enc1b.1.dim(), rate, rng)),
            ],
            DropoutMode::Fixed(m) => {
                assert_eq!(m[0].dim(), enc3b.1.dim(), "bottleneck mask shape");
                assert_eq!(m[1].dim(), enc2b.1.dim(), "quarter skip mask shape");
                assert_eq!(m[2].dim(), enc1b.1.dim(), "half skip mask shape");
                [Some(m[0].clone()), Some(m[1].clone()), Some(m[2].clone())]
            }
            _ => [None, None, None],
        };

        let bottleneck = apply_mask(&enc3b.1, &masks[0]);
        let dec3_up = up_relu(&l.dec3_up, p, &bottleneck);
        let merged3 = &dec3_up.1 + &apply_mask(&enc2b.1, &masks[1]);
        let dec3 = conv_relu(&l.dec3, p, &merged3);
        let dec2_up = up_relu(&l.dec2_up, p, &dec3.1);
        let merged2 = &dec2_up.1 + &apply_mask(&enc1b.1, &masks[2]);
        let dec2 = conv_relu(&l.dec2, p, &merged2);
        let (logits, head) = l.head.forward(p, &dec2.1);
        let logits = logits.slice(s![.., ..h, ..w]).to_owned();
        Trace {
            height: h,
            width: w,
            stem,
            enc1a,
            enc1b,
            enc2a,
            enc2b,
            enc3a,
            enc3b,
            masks,
            dec3_up,
            dec3,
            dec2_up,
            dec2,
            head,
            logits,
        }
    }

    /// Backpropagates a logit gradient. Parameter gradients are accumulated
    /// into `grads` when given; the input gradient is returned when
    /// requested.
    pub fn backward(
        &self,
        trace: &Trace,
        dlogits: &Array3<f32>,
        mut grads: Option<&mut [f32]>,
        want_input: bool,
    ) -> Option<Array3<f32>> {
        let p = &self.params;
        let l = &self.layers;
        let (n, ph, pw) = (self.config.classes, trace.stem.1.dim().1 * 2, trace.stem.1.dim().2 * 2);
        let mut d = Array3::<f32>::zeros((n, ph, pw));
        d.slice_mut(s![.., ..trace.height, ..trace.width]).assign(dlogits);

        macro_rules! g {
            () => {
                grads.as_deref_mut()
            };
        }

        let mut d = l.head.backward(p, &trace.head, &d, g!(), true).unwrap();
        relu_backward(&trace.dec2.1, &mut d);
        let d_merged2 = l.dec2.backward(p, &trace.dec2.0, &d, g!(), true).unwrap();
        let mut d_skip1 = apply_mask(&d_merged2, &trace.masks[2]);
        let mut d = d_merged2;
        relu_backward(&trace.dec2_up.1, &mut d);
        let mut d = l.dec2_up.backward(p, &trace.dec2_up.0, &d, g!(), true).unwrap();
        relu_backward(&trace.dec3.1, &mut d);
        let d_merged3 = l.dec3.backward(p, &trace.dec3.0, &d, g!(), true).unwrap();
        let mut d_skip2 = apply_mask(&d_merged3, &trace.masks[1]);
        let mut d = d_merged3;
        relu_backward(&trace.dec3_up.1, &mut d);
        let d = l.dec3_up.backward(p, &trace.dec3_up.0, &d, g!(), true).unwrap();
        let mut d = apply_mask(&d, &trace.masks[0]);

        relu_backward(&trace.enc3b.1, &mut d);
        let mut d = l.enc3b.backward(p, &trace.enc3b.0, &d, g!(), true).unwrap();
        relu_backward(&trace.enc3a.1, &mut d);
        let d = l.enc3a.backward(p, &trace.enc3a.0, &d, g!(), true).unwrap();
        d_skip2 += &d;
        relu_backward(&trace.enc2b.1, &mut d_skip2);
        let mut d = l.enc2b.backward(p, &trace.enc2b.0, &d_skip2, g!(), true).unwrap();
        relu_backward(&trace.enc2a.1, &mut d);
        let d = l.enc2a.backward(p, &trace.enc2a.0, &d, g!(), true).unwrap();
        d_skip1 += &d;
        relu_backward(&trace.enc1b.1, &mut d_skip1);
        let mut d = l.enc1b.backward(p, &trace.enc1b.0, &d_skip1, g!(), true).unwrap();
        relu_backward(&trace.enc1a.1, &mut d);
        let mut d = l.enc1a.backward(p, &trace.enc1a.0, &d, g!(), true).unwrap();
        relu_backward(&trace.stem.1, &mut d);
        let dx = l.stem.backward(p, &trace.stem.0, &d, g!(), want_input)?;
        Some(dx.slice(s![.., ..trace.height, ..trace.width]).to_owned())
    }

    /// Deterministic prediction.
    pub fn forward(&self, image: &RasterImage, annotations: &AnnotationTensor) -> Result<PredictionMap> {
        let input = self.input_tensor(image, annotations)?;
        PredictionMap::new(self.run(&input, DropoutMode::Off).probabilities())
    }

    /// Prediction with dropout active at every site.
    pub fn forward_stochastic(
        &self,
        image: &RasterImage,
        annotations: &AnnotationTensor,
        rate: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<PredictionMap> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stochastic forward needs a dropout rate in (0, 1), got {rate}"
            )));
        }
        let input = self.input_tensor(image, annotations)?;
        PredictionMap::new(self.run(&input, DropoutMode::On { rate, rng }).probabilities())
    }

    /// Prediction from the image alone (all annotation channels zero).
    pub fn predict_image_only(&self, image: &RasterImage) -> Result<PredictionMap> {
        let empty = AnnotationTensor::zeros(self.config.classes, image.height(), image.width());
        self.forward(image, &empty)
    }

    /// Window-by-window prediction, averaging class probabilities where
    /// windows overlap.
    pub fn predict_tiled(
        &self,
        image: &RasterImage,
        annotations: &AnnotationTensor,
        grid: &TileGrid,
    ) -> Result<PredictionMap> {
        let input = self.input_tensor(image, annotations)?;
        let tiles: Vec<Array3<f32>> = grid
            .windows()
            .map(|w| {
                let crop = input.slice(s![.., w.rows(), w.cols()]).to_owned();
                self.run(&crop, DropoutMode::Off).probabilities()
            })
            .collect();
        PredictionMap::new(grid.stitch_mean(&tiles)?)
    }

    /// Encodes `clicks` with the model's training encoding and predicts.
    pub fn predict_with_clicks(
        &self,
        image: &RasterImage,
        clicks: &[ClickAnnotation],
        labels: Option<&LabelMask>,
        initial: Option<&PredictionMap>,
    ) -> Result<PredictionMap> {
        let ann = self.encode_clicks(image, clicks, labels, initial)?;
        self.forward(image, &ann)
    }

    pub fn encode_clicks(
        &self,
        image: &RasterImage,
        clicks: &[ClickAnnotation],
        labels: Option<&LabelMask>,
        initial: Option<&PredictionMap>,
    ) -> Result<AnnotationTensor> {
        let enc = self.config.encoding;
        let ctx = match enc.kind {
            EncodingKind::BinaryDisk | EncodingKind::DistanceTransform => EncodingContext::None,
            EncodingKind::GuidedFilter => EncodingContext::Image(image),
            EncodingKind::ConnectedPrediction => {
                EncodingContext::Prediction(initial.ok_or(Error::MissingContext("connected_prediction"))?)
            }
            EncodingKind::ConnectedGroundtruth => {
                EncodingContext::Labels(labels.ok_or(Error::MissingContext("connected_groundtruth"))?)
            }
        };
        encode(clicks, &enc, (image.height(), image.width()), self.config.classes, ctx)
    }
}

pub fn hash_params(params: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Cross-entropy against a label mask, averaged over non-ignored pixels.
/// Returns the loss and its gradient with respect to the logits.
pub fn label_cross_entropy(probs: &Array3<f32>, labels: &LabelMask) -> (f64, Array3<f32>) {
    let (n, h, w) = probs.dim();
    let mut grad = probs.clone();
    let mut loss = 0.0f64;
    let mut valid = 0usize;
    for y in 0..h {
        for x in 0..w {
            match labels.get(y, x) {
                Some(k) => {
                    let p = probs[[k, y, x]];
                    // NaN passes through so divergence is reported
                    loss -= f64::from(if p.is_nan() { p } else { p.max(1e-7) }).ln();
                    grad[[k, y, x]] -= 1.0;
                    valid += 1;
                }
                None => {
                    for c in 0..n {
                        grad[[c, y, x]] = 0.0;
                    }
                }
            }
        }
    }
    if valid == 0 {
        return (0.0, Array3::zeros((n, h, w)));
    }
    grad.mapv_inplace(|g| g / valid as f32);
    (loss / valid as f64, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Upper bound K on sampled clicks per annotated sample.
    pub max_clicks: usize,
    /// Probability that a sample is presented with empty annotation channels.
    pub image_only_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    /// Share of training clicks placed on pixels the model currently gets
    /// wrong without annotations.
    pub error_click_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_clicks: 20,
            image_only_fraction: 0.5,
            epochs: 20,
            learning_rate: 2e-3,
            batch_size: 4,
            augment: true,
            error_click_fraction: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.image_only_fraction > 0.0 && self.image_only_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "image_only_fraction {} must lie in (0, 1]",
                self.image_only_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.error_click_fraction) {
            return Err(Error::Config("error_click_fraction must lie in [0, 1]".into()));
        }
        if self.max_clicks == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "max_clicks, batch_size and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
}

/// Samples `k` clicks consistent with the ground truth: each picks a present
/// class uniformly, then a pixel of that class uniformly.
pub fn sample_training_clicks(labels: &LabelMask, k: usize, rng: &mut impl Rng) -> Vec<ClickAnnotation> {
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); labels.class_count()];
    for ((y, x), _) in labels.labels().indexed_iter() {
        if let Some(c) = labels.get(y, x) {
            by_class[c].push((y, x));
        }
    }
    let present: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if present.is_empty() {
        return Vec::new();
    }
    (0..k)
        .map(|_| {
            let class = present[rng.gen_range(0..present.len())];
            let (row, col) = by_class[class][rng.gen_range(0..by_class[class].len())];
            ClickAnnotation::new(row, col, class, Origin::Simulated)
        })
        .collect()
}

fn flip(image: &RasterImage, labels: &LabelMask, vertical: bool, horizontal: bool) -> Result<(RasterImage, LabelMask)> {
    let mut px = image.pixels().to_owned();
    let mut lb = labels.labels().to_owned();
    if vertical {
        px.invert_axis(Axis(1));
        lb.invert_axis(Axis(0));
    }
    if horizontal {
        px.invert_axis(Axis(2));
        lb.invert_axis(Axis(1));
    }
    Ok((
        RasterImage::new(px.as_standard_layout().into_owned())?,
        LabelMask::new(lb.as_standard_layout().into_owned(), labels.class_count())?,
    ))
}

/// Supervised pretraining with mixed image-only and click-annotated samples.
pub fn pretrain(
    mut model: SegmentationModel,
    dataset: &[(RasterImage, LabelMask)],
    config: &PretrainConfig,
) -> Result<(SegmentationModel, TrainingLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("pretraining dataset is empty".into()));
    }
    for (i, (img, lab)) in dataset.iter().enumerate() {
        lab.check_shape(img.height(), img.width())
            .map_err(|e| e.with_context(format!("sample {i}")))?;
        if lab.class_count() != model.classes() {
            return Err(Error::Shape(format!(
                "sample {i} has {} classes, model has {}",
                lab.class_count(),
                model.classes()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.param_count(), config.learning_rate);
    let mut grads = vec![0.0f32; model.param_count()];
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let rate = model.config.dropout_rate;
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut in_batch = 0;
        for &i in &order {
            let (image, labels) = &dataset[i];
            let (image, labels) = if config.augment {
                flip(image, labels, rng.gen(), rng.gen())?
            } else {
                (image.clone(), labels.clone())
            };
            let (image, ann) = if rng.gen_bool(config.image_only_fraction) {
                let ann = AnnotationTensor::zeros(model.classes(), image.height(), image.width());
                (image, ann)
            } else {
                let k = rng.gen_range(1..=config.max_clicks);
                let mut clicks = sample_training_clicks(&labels, k, &mut rng);
                if config.error_click_fraction > 0.0 {
                    let wrong = model.predict_image_only(&image)?.argmax();
                    let errors: Vec<(usize, usize, usize)> = labels
                        .labels()
                        .indexed_iter()
                        .filter_map(|((y, x), _)| labels.get(y, x).filter(|&c| c != wrong[[y, x]] as usize).map(|c| (y, x, c)))
                        .collect();
                    if !errors.is_empty() {
                        for click in clicks.iter_mut() {
                            if rng.gen_bool(config.error_click_fraction) {
                                let (row, col, class) = errors[rng.gen_range(0..errors.len())];
                                *click = ClickAnnotation::new(row, col, class, Origin::Simulated);
                            }
                        }
                    }
                }
                let initial = match model.config.encoding.kind {
                    EncodingKind::ConnectedPrediction => Some(model.predict_image_only(&image)?),
                    _ => None,
                };
                let ann = model.encode_clicks(&image, &clicks, Some(&labels), initial.as_ref())?;
                (image, ann)
            };
            let input = model.input_tensor(&image, &ann)?;
            let mode = if rate > 0.0 {
                DropoutMode::On { rate, rng: &mut rng }
            } else {
                DropoutMode::Off
            };
            let trace = model.run(&input, mode);
            let (loss, dlogits) = label_cross_entropy(&trace.probabilities(), &labels);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            epoch_loss += loss;
            model.backward(&trace, &dlogits, Some(&mut grads), false);
            in_batch += 1;
            step += 1;
            if in_batch == config.batch_size {
                apply_batch(&mut adam, &mut model.params, &mut grads, in_batch);
                in_batch = 0;
                if model.params.iter().any(|p| !p.is_finite()) {
                    return Err(Error::NonFiniteLoss { step });
                }
            }
        }
        if in_batch > 0 {
            apply_batch(&mut adam, &mut model.params, &mut grads, in_batch);
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
        }
        log.epoch_losses.push(epoch_loss / dataset.len() as f64);
        tracing::debug!(epoch = log.epoch_losses.len(), loss = epoch_loss / dataset.len() as f64, "pretrain");
    }
    model.mark_checkpoint();
    Ok((model, log))
}

fn apply_batch(adam: &mut Adam, params: &mut [f32], grads: &mut [f32], n: usize) {
    let scale = 1.0 / n as f32;
    grads.iter_mut().for_each(|g| *g *= scale);
    adam.step(params, grads);
    grads.fill(0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small_model(seed: u64) -> SegmentationModel {
        let mut cfg = ModelConfig::new(3, 2);
        cfg.widths = [4, 6, 8];
        SegmentationModel::new(cfg, seed).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterImage::new(Array3::from_shape_simple_fn((3, h, w), || rng.gen::<f32>())).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one_on_odd_sizes() {
        let model = small_model(1);
        let img = random_image(2, 13, 21);
        let pred = model.predict_image_only(&img).unwrap();
        assert_eq!((pred.height(), pred.width()), (13, 21));
        let p = pred.probabilities();
        for y in 0..13 {
            for x in 0..21 {
                let s: f32 = (0..2).map(|k| p[[k, y, x]]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_forward_repeats_bitwise() {
        let model = small_model(3);
        let img = random_image(4, 16, 16);
        let a = model.predict_image_only(&img).unwrap();
        let b = model.predict_image_only(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_annotations_equal_image_only_path() {
        let model = small_model(5);
        let img = random_image(6, 16, 16);
        let zeros = AnnotationTensor::zeros(2, 16, 16);
        assert_eq!(model.forward(&img, &zeros).unwrap(), model.predict_image_only(&img).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let model = small_model(5);
        let img = random_image(6, 16, 16);
        assert!(matches!(model.forward(&img, &AnnotationTensor::zeros(2, 8, 16)), Err(Error::Shape(_))));
        assert!(matches!(model.forward(&img, &AnnotationTensor::zeros(3, 16, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn stochastic_forward_requires_positive_rate() {
        let model = small_model(5);
        let img = random_image(6, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(model.forward_stochastic(&img, &AnnotationTensor::zeros(2, 16, 16), 0.0, &mut rng).is_err());
    }

    /// Finite-difference check of the full network backward pass through a
    /// scalar objective sum(logits * r), with dropout active.
    #[test]
    fn network_gradients_match_finite_differences() {
        let model = small_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = Array3::from_shape_simple_fn((5, 12, 10), || rng.gen::<f32>());
        let r = Array3::from_shape_simple_fn((2, 12, 10), || rng.gen_range(-1.0f32..1.0));
        let objective = |m: &SegmentationModel, x: &Array3<f32>| -> f64 {
            let mut drng = ChaCha8Rng::seed_from_u64(99);
            let t = m.run(x, DropoutMode::On { rate: 0.2, rng: &mut drng });
            t.logits.iter().zip(r.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut drng = ChaCha8Rng::seed_from_u64(99);
        let trace = model.run(&input, DropoutMode::On { rate: 0.2, rng: &mut drng });
        let mut grads = vec![0.0; model.param_count()];
        let dx = model.backward(&trace, &r, Some(&mut grads), true).unwrap();
        let h = 1e-2f32;
        let base = objective(&model, &input);
        // A mismatch is tolerated only where the perturbation crosses a ReLU
        // kink, which shows up as disagreeing one-sided slopes.
        let check = |what: String, up: f64, down: f64, analytic: f64| {
            let fd = (up - down) / (2.0 * h as f64);
            if (fd - analytic).abs() < 3e-2 * (1.0 + fd.abs()) {
                return true;
            }
            let (right, left) = ((up - base) / h as f64, (base - down) / h as f64);
            assert!((right - left).abs() > 1e-2, "{what}: fd {fd} vs {analytic}");
            false
        };
        let mut agreed = 0;
        let mut total = 0;
        for i in (0..model.param_count()).step_by(37) {
            let mut m = model.clone();
            m.params[i] += h;
            let up = objective(&m, &input);
            m.params[i] -= 2.0 * h;
            let down = objective(&m, &input);
            agreed += usize::from(check(format!("param {i}"), up, down, grads[i] as f64));
            total += 1;
        }
        for idx in (0..input.len()).step_by(29) {
            let mut x = input.clone();
            x.as_slice_mut().unwrap()[idx] += h;
            let up = objective(&model, &x);
            x.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let down = objective(&model, &x);
            agreed += usize::from(check(format!("input {idx}"), up, down, dx.as_slice().unwrap()[idx] as f64));
            total += 1;
        }
        assert!(agreed * 20 >= total * 19, "{agreed} of {total} agreed");
    }

    #[test]
    fn training_clicks_agree_with_labels() {
        let labels = LabelMask::new(Array2::from_shape_fn((8, 8), |(y, _)| u8::from(y < 3)), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clicks = sample_training_clicks(&labels, 50, &mut rng);
        assert_eq!(clicks.len(), 50);
        assert!(clicks.iter().all(|c| labels.get(c.row, c.col) == Some(c.class_id)));
        assert!(clicks.iter().any(|c| c.class_id == 0) && clicks.iter().any(|c| c.class_id == 1));
    }

    #[test]
    fn cross_entropy_ignores_sentinel_pixels() {
        let labels = LabelMask::new(Array2::from_shape_vec((1, 2), vec![0, 2]).unwrap(), 2).unwrap();
        let probs = Array3::from_shape_vec((2, 1, 2), vec![0.25, 0.5, 0.75, 0.5]).unwrap();
        let (loss, grad) = label_cross_entropy(&probs, &labels);
        assert!((loss - (-(0.25f64).ln())).abs() < 1e-6);
        assert_eq!(grad[[0, 0, 1]], 0.0);
        assert_eq!(grad[[1, 0, 1]], 0.0);
    }
}
