use interseg::annotation::{
    encode, read_clicks, write_clicks, ClickAnnotation, EncodingConfig, EncodingContext, EncodingKind, Origin,
};
use interseg::error::Error;
use interseg::raster::{LabelMask, RasterImage};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

const H: usize = 12;
const W: usize = 10;
const CLASSES: usize = 3;

fn clicks_strategy(max: usize) -> impl Strategy<Value = Vec<ClickAnnotation>> {
    prop::collection::vec((0..H, 0..W, 0..CLASSES), 0..max)
        .prop_map(|v| v.into_iter().map(|(r, c, k)| ClickAnnotation::new(r, c, k, Origin::Human)).collect())
}

fn labels_strategy() -> impl Strategy<Value = LabelMask> {
    prop::collection::vec(0u8..CLASSES as u8, H * W)
        .prop_map(|v| LabelMask::new(Array2::from_shape_vec((H, W), v).unwrap(), CLASSES).unwrap())
}

fn nearest(clicks: &[ClickAnnotation], class: usize, y: usize, x: usize) -> Option<f64> {
    clicks
        .iter()
        .filter(|c| c.class_id == class)
        .map(|c| ((c.row as f64 - y as f64).powi(2) + (c.col as f64 - x as f64).powi(2)).sqrt())
        .min_by(f64::total_cmp)
}

/// Depth-first 8-connected fill over equal labels.
fn flood(labels: &Array2<u8>, seed: (usize, usize)) -> Array2<bool> {
    let (h, w) = labels.dim();
    let target = labels[seed];
    let mut out = Array2::from_elem((h, w), false);
    let mut stack = vec![seed];
    while let Some((y, x)) = stack.pop() {
        if out[[y, x]] || labels[[y, x]] != target {
            continue;
        }
        out[[y, x]] = true;
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                stack.push((ny, nx));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn distance_transform_matches_brute_force(clicks in clicks_strategy(6), radius in 1.0f32..8.0) {
        let cfg = EncodingConfig { radius, ..EncodingConfig::distance_transform() };
        let t = encode(&clicks, &cfg, (H, W), CLASSES, EncodingContext::None).unwrap();
        for k in 0..CLASSES {
            for y in 0..H {
                for x in 0..W {
                    let expected = nearest(&clicks, k, y, x).map_or(0.0, |d| (1.0 - d / radius as f64).max(0.0));
                    prop_assert!((f64::from(t.channels()[[k, y, x]]) - expected).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn binary_disk_matches_brute_force(clicks in clicks_strategy(6), radius in 0.5f32..5.0) {
        let cfg = EncodingConfig { radius, ..EncodingConfig::new(EncodingKind::BinaryDisk) };
        let t = encode(&clicks, &cfg, (H, W), CLASSES, EncodingContext::None).unwrap();
        for k in 0..CLASSES {
            for y in 0..H {
                for x in 0..W {
                    let inside = nearest(&clicks, k, y, x).is_some_and(|d| d <= radius as f64 + 1e-9);
                    prop_assert_eq!(t.channels()[[k, y, x]], if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn connected_groundtruth_matches_flood_fill(clicks in clicks_strategy(5), labels in labels_strategy()) {
        let cfg = EncodingConfig::new(EncodingKind::ConnectedGroundtruth);
        let t = encode(&clicks, &cfg, (H, W), CLASSES, EncodingContext::Labels(&labels)).unwrap();
        let mut expected = Array3::<f32>::zeros((CLASSES, H, W));
        for c in &clicks {
            let region = flood(&labels.labels().to_owned(), (c.row, c.col));
            for ((y, x), &inside) in region.indexed_iter() {
                if inside {
                    expected[[c.class_id, y, x]] = 1.0;
                }
            }
        }
        prop_assert_eq!(t.channels().to_owned(), expected);
    }

    #[test]
    fn encoding_ignores_click_order(clicks in clicks_strategy(8), seed in any::<u64>()) {
        let mut shuffled = clicks.clone();
        let n = shuffled.len();
        if n > 1 {
            shuffled.rotate_left((seed % n as u64) as usize);
            shuffled.reverse();
        }
        let cfg = EncodingConfig::distance_transform();
        let a = encode(&clicks, &cfg, (H, W), CLASSES, EncodingContext::None).unwrap();
        let b = encode(&shuffled, &cfg, (H, W), CLASSES, EncodingContext::None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn merged_single_click_encodings_equal_joint_encoding(clicks in clicks_strategy(6)) {
        let cfg = EncodingConfig::distance_transform();
        let joint = encode(&clicks, &cfg, (H, W), CLASSES, EncodingContext::None).unwrap();
        let mut merged = encode(&[], &cfg, (H, W), CLASSES, EncodingContext::None).unwrap();
        for c in &clicks {
            merged.merge_max(&encode(&[*c], &cfg, (H, W), CLASSES, EncodingContext::None).unwrap());
        }
        prop_assert_eq!(joint, merged);
    }
}

#[test]
fn guided_filter_stays_in_range_and_keeps_the_click() {
    let pixels = Array3::from_shape_fn((3, H, W), |(c, y, x)| if x < W / 2 { 0.2 + 0.1 * c as f32 } else { 0.8 } + 0.01 * y as f32);
    let img = RasterImage::new(pixels).unwrap();
    let click = ClickAnnotation::new(5, 2, 1, Origin::Human);
    let t = encode(&[click], &EncodingConfig::new(EncodingKind::GuidedFilter), (H, W), CLASSES, EncodingContext::Image(&img))
        .unwrap();
    let ch = t.channels();
    assert!(ch.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(ch[[1, 5, 2]] > 0.0);
    assert!(ch.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 0.0));
    assert!(ch.index_axis(ndarray::Axis(0), 2).iter().all(|&v| v == 0.0));
}

#[test]
fn encoding_context_must_fit_the_kind() {
    let click = [ClickAnnotation::new(0, 0, 0, Origin::Human)];
    let labels = LabelMask::new(Array2::zeros((H, W)), CLASSES).unwrap();
    let dt = EncodingConfig::distance_transform();
    assert!(matches!(
        encode(&click, &dt, (H, W), CLASSES, EncodingContext::Labels(&labels)),
        Err(Error::UnexpectedContext(_))
    ));
    let cg = EncodingConfig::new(EncodingKind::ConnectedGroundtruth);
    assert!(matches!(encode(&click, &cg, (H, W), CLASSES, EncodingContext::None), Err(Error::MissingContext(_))));
    let outside = [ClickAnnotation::new(H, 0, 0, Origin::Human)];
    assert!(matches!(
        encode(&outside, &dt, (H, W), CLASSES, EncodingContext::None),
        Err(Error::ClickOutOfBounds { .. })
    ));
    let bad_class = [ClickAnnotation::new(0, 0, CLASSES, Origin::Human)];
    assert!(matches!(
        encode(&bad_class, &dt, (H, W), CLASSES, EncodingContext::None),
        Err(Error::ClassOutOfRange { .. })
    ));
}

#[test]
fn click_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clicks.json");
    let clicks = vec![
        ClickAnnotation::new(3, 4, 1, Origin::Human),
        ClickAnnotation::new(0, 9, 0, Origin::Simulated),
    ];
    write_clicks(&path, &clicks).unwrap();
    assert_eq!(read_clicks(&path).unwrap(), clicks);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"origin\": \"simulated\""));
}
