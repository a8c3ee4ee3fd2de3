mod common;

use common::check_equivariance;
use hetquery::decoder::{decode, LayerOutput, QmixPlacement};
use hetquery::experiment::{prepare_scene, run_weights, PreparedScene, QueryCounts, RunConfig};
use hetquery::qswap::{SampleOrigin, SwapMode};
use hetquery::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_run(seed: u64) -> RunConfig {
    let mut c = RunConfig::preset("desk").unwrap();
    c.scene.feature_dim = 32;
    c.decoder.d = 32;
    c.decoder.layers = 2;
    c.queries = QueryCounts { world: 10, image: 10, radar: 10 };
    c.rings.rings = 3;
    c.seeds.scene = seed;
    c.seeds.weights = seed + 100;
    c
}

fn run<T: Real>(cfg: &RunConfig) -> (PreparedScene<T>, Vec<LayerOutput<T>>) {
    let prepared = prepare_scene::<T>(cfg).unwrap();
    let weights = run_weights::<T>(cfg).unwrap();
    let out = decode(&prepared.features, &prepared.queries, &weights, &cfg.decoder).unwrap();
    (prepared, out)
}

#[test]
fn decoding_is_permutation_equivariant() {
    let cfg = small_run(11);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check_equivariance(&cfg, 3, &mut rng, 1e-9).unwrap();
    let mut replace = small_run(12);
    replace.decoder.qswap.mode = SwapMode::Replace;
    replace.decoder.qmix_placement = QmixPlacement::PostSelfCross;
    check_equivariance(&replace, 2, &mut rng, 1e-9).unwrap();
}

#[test]
fn qmix_never_attends_within_a_type() {
    for placement in [QmixPlacement::PostAgg, QmixPlacement::PreAgg, QmixPlacement::PostSelfCross] {
        let mut cfg = small_run(3);
        cfg.decoder.qmix_placement = placement;
        let (prepared, out) = run::<f64>(&cfg);
        let types = &prepared.queries.types;
        for layer in &out {
            let attn = layer.qmix_attn.as_ref().expect("qmix enabled");
            for i in 0..types.len() {
                for j in 0..types.len() {
                    if i != j && types[i] == types[j] {
                        assert_eq!(attn.get(i, j), 0.0);
                    }
                }
                let s: f64 = attn.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sample_sets_stay_within_bounds() {
    for mode in [SwapMode::Append, SwapMode::Replace] {
        let mut cfg = small_run(7);
        cfg.decoder.qswap.mode = mode;
        let (_, out) = run::<f64>(&cfg);
        let q = &cfg.decoder.qswap;
        for layer in &out {
            for sets in &layer.sample_sets {
                for set in sets {
                    match mode {
                        SwapMode::Append => assert!(set.len() >= q.k_base && set.len() <= q.k_base + q.k_extra),
                        SwapMode::Replace => assert_eq!(set.len(), q.k_base),
                    }
                    let shared = set.iter().filter(|p| p.origin == SampleOrigin::Shared).count();
                    assert!(shared <= q.k_extra);
                }
            }
        }
    }
}

#[test]
fn qswap_off_keeps_base_sets() {
    let mut cfg = small_run(7);
    cfg.decoder.enable_qswap = false;
    let (_, out) = run::<f64>(&cfg);
    for layer in &out {
        assert_eq!(layer.shared_points(), 0);
        for sets in &layer.sample_sets {
            assert!(sets.iter().all(|s| s.len() == cfg.decoder.qswap.k_base));
        }
    }
}

#[test]
fn outputs_are_well_formed() {
    let cfg = small_run(5);
    let (_, out) = run::<f64>(&cfg);
    let extent = cfg.decoder.extent;
    for layer in &out {
        assert!(layer.class_scores.data().iter().all(|&s| s > 0.0 && s < 1.0));
        for (p, b) in layer.positions.iter().zip(&layer.boxes) {
            assert!(p[0].abs() <= extent && p[1].abs() <= extent);
            assert_eq!(*p, b.center);
            assert!(b.size.iter().all(|&s| (0.1..=30.0).contains(&s)));
            assert!(b.yaw > -std::f64::consts::PI && b.yaw <= std::f64::consts::PI);
        }
    }
}

#[test]
fn single_and_double_precision_agree() {
    let cfg = small_run(9);
    let (_, a) = run::<f64>(&cfg);
    let (_, b) = run::<f32>(&cfg);
    let (la, lb) = (&a[0], &b[0]);
    let mut worst = 0.0f64;
    for (x, y) in la.class_scores.data().iter().zip(lb.class_scores.data()) {
        worst = worst.max((x - *y as f64).abs());
    }
    assert!(worst < 1e-3, "first-layer class scores differ by {worst}");
    // Later layers may branch on near-tied selections, so only compare the
    // bulk of the final scores.
    let last = (a.last().unwrap(), b.last().unwrap());
    let diffs: Vec<f64> = last
        .0
        .class_scores
        .data()
        .iter()
        .zip(last.1.class_scores.data())
        .map(|(x, y)| (x - *y as f64).abs())
        .collect();
    let within = diffs.iter().filter(|&&d| d < 1e-2).count();
    assert!(within * 10 >= diffs.len() * 9);
}
