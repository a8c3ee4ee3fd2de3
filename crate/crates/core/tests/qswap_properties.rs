mod common;

use common::*;
use hetquery::grid::GridKind;
use hetquery::kernel::Matrix;
use hetquery::qswap::{
    base_points, greedy_select, query_radius, score_shared_points, select_neighbors, swap_samples, QSwapConfig,
    SampleOrigin, SwapMode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn swap_respects_every_cap(seed in any::<u64>(), n in 2usize..24, replace in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = QSwapConfig {
            mode: if replace { SwapMode::Replace } else { SwapMode::Append },
            ..QSwapConfig::default()
        };
        let inst = random_swap_instance(&mut rng, n, cfg.k_base);
        check_swap_constraints(&inst, &cfg).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn greedy_is_optimal_under_both_caps(seed in any::<u64>(), len in 0usize..13, k_per in 1usize..4, extra in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k_extra = k_per + extra;
        let candidates: Vec<(usize, f64)> = (0..len).map(|_| (rng.gen_range(0..4), rng.gen_range(-5.0..5.0))).collect();
        let mut got = greedy_select(&candidates, k_per, k_extra);
        got.sort_unstable();
        prop_assert_eq!(got, brute_force_selection(&candidates, k_per, k_extra));
    }

    #[test]
    fn affinity_prior_is_additive_log(s in -10.0f64..10.0, a in 1e-6f64..1.0, lambda in 0.0f64..3.0) {
        let got = score_shared_points(s, a, lambda, 1e-8);
        prop_assert!((got - (s + lambda * a.ln())).abs() < 1e-12);
        prop_assert_eq!(score_shared_points(s, a, 0.0, 1e-8), s);
    }
}

#[test]
fn replace_overwrites_lowest_scores() {
    let cfg = QSwapConfig { mode: SwapMode::Replace, k_base: 4, k_extra: 2, k_per: 2, ..QSwapConfig::default() };
    let positions = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    let base = vec![
        base_points(0, GridKind::RadBev, &[([0.0, 0.0], 0.5), ([0.0, 0.0], -1.0), ([0.0, 0.0], 2.0), ([0.0, 0.0], -1.0)]),
        base_points(1, GridKind::RadBev, &[([0.0, 0.0], 3.0), ([0.0, 0.0], 2.5), ([0.0, 0.0], 0.0), ([0.0, 0.0], 0.1)]),
    ];
    let affinity = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    let neighbors = vec![vec![1], vec![]];
    let sets = swap_samples(&base, &positions, &neighbors, &affinity, &cfg).unwrap();
    // Both -1.0 slots (indices 1 and 3) are replaced; ties go to index 1 first.
    let origins: Vec<SampleOrigin> = sets[0].iter().map(|p| p.origin).collect();
    assert_eq!(origins, [SampleOrigin::Base, SampleOrigin::Shared, SampleOrigin::Base, SampleOrigin::Shared]);
    assert_eq!(sets[0][1].point_index, 0);
    assert_eq!(sets[0][3].point_index, 1);
    assert!((sets[0][1].score - (3.0 + 0.5f64.ln())).abs() < 1e-12);
    assert_eq!(sets[0][1].offset, [1.0, 0.0]);
    assert_eq!(sets[1], base[1]);
}

#[test]
fn radius_scales_with_box_diagonal() {
    let cfg = QSwapConfig::default();
    assert!((query_radius(3.0f64, 4.0, &cfg) - 7.5).abs() < 1e-12);
    let fixed = QSwapConfig { fixed_radius: Some(5.0), ..cfg };
    assert_eq!(query_radius(3.0, 4.0, &fixed), 5.0);
}

#[test]
fn isolated_query_keeps_its_base_set() {
    let cfg = QSwapConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut inst = random_swap_instance(&mut rng, 3, cfg.k_base);
    inst.positions = vec![[0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [-100.0, 0.0, 0.0]];
    let neighbors: Vec<Vec<usize>> = (0..3)
        .map(|i| select_neighbors(i, inst.affinity.row(i), inst.sizes[i], &inst.positions, &cfg).unwrap())
        .collect();
    assert!(neighbors.iter().all(|n| n.is_empty()));
    let sets = swap_samples(&inst.base, &inst.positions, &neighbors, &inst.affinity, &cfg).unwrap();
    assert_eq!(sets, inst.base);
}
