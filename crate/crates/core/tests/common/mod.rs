//! Pretrained toy fixture shared by the integration tests.
//!
//! Training takes about half a minute, so the checkpoint is written to the
//! cargo scratch directory and reused by later test binaries.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use interseg::acquisition::{confidnet_train, ConfidNetHead, ConfidNetTrainConfig};
use interseg::checkpoint::Checkpoint;
use interseg::model::{pretrain, ModelConfig, PretrainConfig, SegmentationModel};
use interseg::raster::{LabelMask, RasterImage};
use interseg::toy::{generate_toy, Layout, ToyConfig};

/// Bumped whenever the recipe below changes so stale caches are ignored.
const RECIPE: &str = "fixture-v1";

pub fn training_scenes() -> ToyConfig {
    ToyConfig {
        count: 48,
        layout: Layout::Clustered,
        ..Default::default()
    }
}

pub fn pretrain_config() -> PretrainConfig {
    PretrainConfig {
        epochs: 40,
        ..Default::default()
    }
}

fn build() -> Checkpoint {
    let train = generate_toy(1, &training_scenes()).expect("toy scenes");
    let (model, _) = pretrain(
        SegmentationModel::new(ModelConfig::new(3, 2), 0).expect("model"),
        &train,
        &pretrain_config(),
    )
    .expect("pretraining");
    let held_out = generate_toy(2, &training_scenes()).expect("toy scenes");
    let head = confidnet_train(&model, ConfidNetHead::new(&model, 0), &held_out, &ConfidNetTrainConfig::default())
        .expect("confidence head");
    Checkpoint {
        model,
        confidnet: Some(head),
    }
}

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("{RECIPE}.ckpt"))
}

/// Pretrained two-class model with a confidence head.
pub fn fixture() -> &'static Checkpoint {
    static CELL: OnceLock<Checkpoint> = OnceLock::new();
    CELL.get_or_init(|| {
        let path = fixture_path();
        if let Ok(c) = Checkpoint::load(&path) {
            return c;
        }
        let c = build();
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        c.save(&tmp).expect("write fixture");
        std::fs::rename(&tmp, &path).expect("publish fixture");
        c
    })
}

/// One clustered toy scene of the given side length.
pub fn scene(seed: u64, size: usize, shifted: bool) -> (RasterImage, LabelMask) {
    let mut cfg = ToyConfig {
        count: 1,
        height: size,
        width: size,
        layout: Layout::Clustered,
        density: 0.12,
        clusters: 1,
        ..Default::default()
    };
    if shifted {
        cfg = cfg.shifted();
        cfg.shift = 0.1;
    }
    generate_toy(seed, &cfg).expect("toy scene").remove(0)
}
