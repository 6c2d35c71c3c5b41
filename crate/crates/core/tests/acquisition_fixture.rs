mod common;

use common::{fixture, scene};
use interseg::acquisition::{
    confidnet_score, confidnet_train, entropy, entropy_of, mc_dropout, odin, variance_across, ConfidNetHead,
    ConfidNetTrainConfig, McDropoutConfig, OdinConfig, UncertaintyMap, UncertaintySidecar,
};
use interseg::agent::error_mask;
use interseg::annotation::AnnotationTensor;
use interseg::model::{DropoutMode, ModelConfig, SegmentationModel};
use interseg::raster::{LabelMask, RasterImage};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean score on misclassified and on correct pixels, pooled over scenes.
fn split_means(scenes: &[(RasterImage, LabelMask)], score: impl Fn(&RasterImage) -> UncertaintyMap) -> (f64, f64) {
    let model = &fixture().model;
    let (mut wrong, mut nw, mut right, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for (img, lab) in scenes {
        let errors = error_mask(&model.predict_image_only(img).unwrap(), lab).unwrap();
        let map = score(img);
        for ((y, x), &s) in map.scores.indexed_iter() {
            if lab.get(y, x).is_none() {
                continue;
            }
            if errors[[y, x]] {
                wrong += s;
                nw += 1;
            } else {
                right += s;
                nr += 1;
            }
        }
    }
    assert!(nw > 0 && nr > 0);
    (wrong / nw as f64, right / nr as f64)
}

fn source_scenes() -> Vec<(RasterImage, LabelMask)> {
    (0..4).map(|s| scene(900 + s, 128, false)).collect()
}

fn empty(img: &RasterImage) -> AnnotationTensor {
    AnnotationTensor::zeros(2, img.height(), img.width())
}

#[test]
fn trained_head_is_more_confident_on_correct_pixels() {
    let ckpt = fixture();
    let head = ckpt.confidnet.as_ref().expect("fixture has a head");
    let (wrong, right) = split_means(&source_scenes(), |img| confidnet_score(&ckpt.model, img, &empty(img), head).unwrap());
    // scores are one minus confidence
    assert!(wrong > right, "uncertainty wrong {wrong} right {right}");
    let (img, _) = scene(5, 40, false);
    let map = confidnet_score(&ckpt.model, &img, &empty(&img), head).unwrap();
    assert_eq!(map.scores.dim(), (40, 40));
    assert!(map.scores.iter().all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn head_training_leaves_the_segmenter_untouched() {
    let model = &fixture().model;
    let before = model.param_hash();
    let data = vec![scene(7, 64, false), scene(8, 64, true)];
    let cfg = ConfidNetTrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let head = confidnet_train(model, ConfidNetHead::new(model, 3), &data, &cfg).unwrap();
    assert_eq!(model.param_hash(), before);
    assert_ne!(head.params(), ConfidNetHead::new(model, 3).params());
}

#[test]
fn odin_is_more_confident_on_correct_pixels() {
    let model = &fixture().model;
    let cfg = OdinConfig::default();
    assert_eq!(cfg.epsilon, 1.0 / 255.0);
    let (wrong, right) = split_means(&source_scenes(), |img| odin(model, img, &empty(img), &cfg).unwrap());
    assert!(1.0 - right >= 1.0 - wrong, "confidence right {} wrong {}", 1.0 - right, 1.0 - wrong);
}

#[test]
fn plain_odin_is_one_minus_max_softmax() {
    let model = &fixture().model;
    let (img, _) = scene(9, 48, true);
    let cfg = OdinConfig {
        epsilon: 0.0,
        temperature: 1.0,
        ascend_loss: false,
    };
    let map = odin(model, &img, &empty(&img), &cfg).unwrap();
    let p = model.predict_image_only(&img).unwrap();
    for ((y, x), &s) in map.scores.indexed_iter() {
        let max = p.probabilities()[[0, y, x]].max(p.probabilities()[[1, y, x]]);
        assert!((s - (1.0 - f64::from(max))).abs() < 1e-6);
    }
}

#[test]
fn entropy_and_mc_dropout_separate_errors() {
    let model = &fixture().model;
    let (wrong, right) = split_means(&source_scenes(), |img| entropy(&model.predict_image_only(img).unwrap()));
    assert!(wrong > right);
    let cfg = McDropoutConfig::default();
    let (wrong, right) = split_means(&source_scenes(), |img| mc_dropout(model, img, &empty(img), &cfg).unwrap());
    assert!(wrong > right);
}

fn tiny_model() -> SegmentationModel {
    SegmentationModel::new(
        ModelConfig {
            widths: [3, 4, 5],
            ..ModelConfig::new(3, 2)
        },
        11,
    )
    .unwrap()
}

#[test]
fn dropout_variance_matches_two_hand_set_masks() {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = RasterImage::new(Array3::from_shape_simple_fn((3, 8, 8), || rng.gen::<f32>())).unwrap();
    let input = model.input_tensor(&img, &empty(&img)).unwrap();
    let shapes = model.dropout_shapes(8, 8);
    let ones = shapes.map(|d| Array3::from_elem(d, 1.0f32));
    // drop every other entry at each site, doubling the rest
    let half = shapes.map(|d| Array3::from_shape_fn(d, |(c, y, x)| if (c + y + x) % 2 == 0 { 0.0 } else { 2.0 }));
    let a = model.run(&input, DropoutMode::Fixed(&ones)).probabilities();
    let b = model.run(&input, DropoutMode::Fixed(&half)).probabilities();
    let plain = model.run(&input, DropoutMode::Off).probabilities();
    assert_eq!(a, plain);
    let v = variance_across(&[a.clone(), b.clone()]);
    for y in 0..8 {
        for x in 0..8 {
            let expected: f64 = (0..2)
                .map(|k| (f64::from(a[[k, y, x]]) - f64::from(b[[k, y, x]])).powi(2) / 4.0)
                .sum();
            assert!((v[[y, x]] - expected).abs() < 1e-12);
        }
    }
    assert!(v.iter().any(|&s| s > 0.0));
}

#[test]
fn mc_dropout_is_seeded() {
    let model = tiny_model();
    let (img, _) = scene(3, 32, false);
    let cfg = McDropoutConfig {
        seed: 9,
        ..Default::default()
    };
    let a = mc_dropout(&model, &img, &empty(&img), &cfg).unwrap();
    let b = mc_dropout(&model, &img, &empty(&img), &cfg).unwrap();
    assert_eq!(a.scores, b.scores);
    let c = mc_dropout(&model, &img, &empty(&img), &McDropoutConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.scores, c.scores);
}

#[test]
fn exported_map_carries_its_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("entropy.png");
    let map = UncertaintyMap {
        scores: Array2::from_shape_fn((3, 4), |(y, x)| (y * 4 + x) as f64 / 22.0),
        method: interseg::acquisition::AcquisitionMethod::Entropy,
        wall_time: 0.25,
    };
    map.export(&path, serde_json::json!({"tile": 64})).unwrap();
    let png = image::open(&path).unwrap().into_luma16();
    assert_eq!(png.get_pixel(3, 2).0[0], 65535);
    assert_eq!(png.get_pixel(0, 0).0[0], 0);
    let side: UncertaintySidecar = serde_json::from_slice(&std::fs::read(dir.path().join("entropy.json")).unwrap()).unwrap();
    assert_eq!(side.scale_max, 11.0 / 22.0);
    assert_eq!(side.config["tile"], 64);
    assert_eq!(side.wall_time, 0.25);
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("positive mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #[test]
    fn entropy_ignores_class_order(p in (2usize..7).prop_flat_map(simplex), seed in any::<u64>()) {
        let mut q = p.clone();
        q.rotate_left((seed % p.len() as u64) as usize);
        q.reverse();
        prop_assert!((entropy_of(&p) - entropy_of(&q)).abs() < 1e-12);
        prop_assert!(entropy_of(&p) >= 0.0);
        prop_assert!(entropy_of(&p) <= (p.len() as f64).ln() + 1e-12);
    }
}
