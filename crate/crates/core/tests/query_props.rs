use std::collections::HashSet;

use interseg::acquisition::{AcquisitionMethod, UncertaintyMap};
use interseg::error::Error;
use interseg::prediction::PredictionMap;
use interseg::query::{score_patches, CampaignState, PatchStatus, QueryTarget, StrategyConfig};
use interseg::raster::LabelMask;
use interseg::tiling::TileGrid;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn map(scores: Array2<f64>) -> UncertaintyMap {
    UncertaintyMap {
        scores,
        method: AcquisitionMethod::Entropy,
        wall_time: 0.0,
    }
}

fn grid_and_map() -> impl Strategy<Value = (TileGrid, UncertaintyMap)> {
    (8usize..40, 8usize..40, 2usize..12)
        .prop_flat_map(|(h, w, tile)| {
            let tile = tile.min(h).min(w);
            (Just((h, w, tile)), 0..tile, prop::collection::vec(0u8..6, h * w))
        })
        .prop_map(|((h, w, tile), overlap, v)| {
            let scores = Array2::from_shape_vec((h, w), v.into_iter().map(f64::from).collect()).unwrap();
            (TileGrid::new(h, w, tile, overlap).unwrap(), map(scores))
        })
}

fn drain(state: &mut CampaignState, strategy: &StrategyConfig) -> Vec<usize> {
    let mut order = Vec::new();
    loop {
        match state.next_query(strategy, None, None) {
            Ok(QueryTarget::Patch(q)) => order.push(q.index),
            Ok(other) => panic!("patch strategy returned {other:?}"),
            Err(Error::Exhausted) => return order,
            Err(e) => panic!("{e}"),
        }
    }
}

proptest! {
    #[test]
    fn patch_scores_match_a_sort_oracle((grid, u) in grid_and_map()) {
        let ranked = score_patches(&u, &grid).unwrap();
        let mut expected: Vec<(usize, f64)> = grid.windows().enumerate().map(|(i, w)| {
            let mut s = 0.0;
            for y in w.rows() { for x in w.cols() { s += u.scores[[y, x]]; } }
            (i, s / w.area() as f64)
        }).collect();
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        prop_assert_eq!(ranked.len(), expected.len());
        for (rank, (q, (i, s))) in ranked.iter().zip(&expected).enumerate() {
            prop_assert_eq!(q.index, *i);
            prop_assert!((q.score - s).abs() < 1e-12);
            prop_assert_eq!(q.rank, rank + 1);
            prop_assert_eq!(q.status, PatchStatus::Pending);
        }
    }

    #[test]
    fn active_order_follows_rank_and_never_repeats((grid, u) in grid_and_map()) {
        let ranked = score_patches(&u, &grid).unwrap();
        let mut state = CampaignState::new(grid, 0);
        state.set_ranking(ranked.clone());
        let order = drain(&mut state, &StrategyConfig::active(AcquisitionMethod::Entropy, 0));
        prop_assert_eq!(order, ranked.iter().map(|q| q.index).collect::<Vec<_>>());
        prop_assert!(state.ranked().iter().all(|q| q.status == PatchStatus::Annotated));
    }

    #[test]
    fn random_order_is_a_reproducible_permutation((grid, _u) in grid_and_map(), seed in any::<u64>()) {
        let n = grid.len();
        let a = drain(&mut CampaignState::new(grid.clone(), seed), &StrategyConfig::random(0));
        let b = drain(&mut CampaignState::new(grid, seed), &StrategyConfig::random(0));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.iter().copied().collect::<HashSet<_>>().len(), n);
        prop_assert_eq!(a.len(), n);
    }
}

#[test]
fn rescoring_skips_annotated_patches() {
    let grid = TileGrid::new(16, 16, 8, 0).unwrap();
    let mut state = CampaignState::new(grid.clone(), 0);
    let strategy = StrategyConfig::active(AcquisitionMethod::Entropy, 0);
    let first = Array2::from_shape_fn((16, 16), |(y, x)| if y < 8 && x < 8 { 1.0 } else { 0.0 });
    state.set_ranking(score_patches(&map(first.clone()), &grid).unwrap());
    let QueryTarget::Patch(q) = state.next_query(&strategy, None, None).unwrap() else { panic!() };
    assert_eq!(q.index, 0);
    // the same patch stays the most uncertain after refinement
    state.set_ranking(score_patches(&map(first), &grid).unwrap());
    let QueryTarget::Patch(q) = state.next_query(&strategy, None, None).unwrap() else { panic!() };
    assert_ne!(q.index, 0);
    assert_eq!(state.pending().len(), 2);
}

fn blobs() -> (PredictionMap, LabelMask) {
    // everything predicted class 0; labels hold a 10x10 and a 2x5 block of class 1
    let labels = Array2::from_shape_fn((40, 40), |(y, x)| {
        u8::from((5..15).contains(&y) && (20..30).contains(&x) || (30..32).contains(&y) && (2..7).contains(&x))
    });
    let probs = Array3::from_shape_fn((2, 40, 40), |(k, _, _)| if k == 0 { 0.9 } else { 0.1 });
    (PredictionMap::new(probs).unwrap(), LabelMask::new(labels, 2).unwrap())
}

#[test]
fn whole_image_oracle_points_into_the_largest_error() {
    let (pred, labels) = blobs();
    let mut state = CampaignState::new(TileGrid::new(40, 40, 8, 0).unwrap(), 0);
    let oracle = StrategyConfig::whole_image_oracle(0);
    let QueryTarget::Point { row, col, component_size } = state.next_query(&oracle, Some(&pred), Some(&labels)).unwrap() else {
        panic!("oracle returns points")
    };
    assert_eq!(component_size, 100);
    assert!((5..15).contains(&row) && (20..30).contains(&col));
    // the large blob was not fixed, so the next click goes to the small one
    let QueryTarget::Point { row, col, component_size } = state.next_query(&oracle, Some(&pred), Some(&labels)).unwrap() else {
        panic!()
    };
    assert_eq!(component_size, 10);
    assert!((30..32).contains(&row) && (2..7).contains(&col));
    assert!(state.next_query(&oracle, None, None).is_err());
}

#[test]
fn search_ledger_ratio_is_image_over_patch_area() {
    let (pred, labels) = blobs();
    let grid = TileGrid::new(40, 40, 8, 0).unwrap();
    let mut oracle_state = CampaignState::new(grid.clone(), 0);
    let mut patch_state = CampaignState::new(grid, 0);
    for _ in 0..2 {
        oracle_state
            .next_query(&StrategyConfig::whole_image_oracle(0), Some(&pred), Some(&labels))
            .unwrap();
    }
    for _ in 0..5 {
        patch_state.next_query(&StrategyConfig::random(0), None, None).unwrap();
    }
    assert_eq!(oracle_state.ledger.pixels, 2 * 1600);
    assert_eq!(patch_state.ledger.pixels, 5 * 64);
    assert_eq!(oracle_state.ledger.per_query() / patch_state.ledger.per_query(), 1600.0 / 64.0);
}
