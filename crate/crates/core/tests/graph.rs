use std::collections::BTreeSet;
use std::sync::Arc;

use msgnet_core::gradcheck::random_tensor;
use msgnet_core::hstm::TemporalGraph;
use msgnet_core::nn::{Init, ParamStore};
use msgnet_core::reference::{dense_attention, map_rows};
use msgnet_core::routing::Routing;
use msgnet_core::sparsegraph::{prune, GraphConfig, ScoreMatrices, SparseAttention};
use msgnet_core::tensor::EdgeIndex;
use msgnet_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores(n_dst: usize, n_src: usize, seed: u64) -> ScoreMatrices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = (0..n_dst * n_src)
        .map(|_| rng.gen_range(-4.0..4.0))
        .collect();
    ScoreMatrices::from_raw(n_dst, n_src, raw).unwrap()
}

fn edge_set(s: &ScoreMatrices, tau: f64, k: usize) -> BTreeSet<(usize, usize)> {
    prune(s, &GraphConfig::new(tau, k, 8).unwrap())
        .edges()
        .iter()
        .map(|e| (e.dst, e.src))
        .collect()
}

fn attention(seed: u64, d: usize) -> (ParamStore<f64>, SparseAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let a = SparseAttention::new(&mut ps, &mut Init { rng: &mut rng }, "a", d, d);
    (ps, a)
}

fn attend_rows(
    ps: &ParamStore<f64>,
    a: &SparseAttention,
    cfg: &GraphConfig,
    src: &Tensor<f64>,
    dst: &Tensor<f64>,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (s, d) = (tape.constant(src.clone()), tape.constant(dst.clone()));
    let out = a
        .attend(&mut tape, ps, cfg, s, d, s, d, &mut Routing::record())
        .unwrap();
    tape.value(out.out).clone()
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = x.shape()[1];
    let data = perm
        .iter()
        .flat_map(|&r| x.data()[r * d..(r + 1) * d].to_vec())
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn higher_threshold_keeps_a_subset(n_dst in 1usize..20, n_src in 1usize..40, k in 1usize..30, seed in any::<u64>()) {
        let s = scores(n_dst, n_src, seed);
        let (lo, hi) = (edge_set(&s, 0.25, k), edge_set(&s, 0.75, k));
        prop_assert!(hi.is_subset(&lo));
    }

    #[test]
    fn kept_edges_are_the_top_gates(n_dst in 1usize..12, n_src in 1usize..40, k in 1usize..30, tau in 0.0f64..1.0, seed in any::<u64>()) {
        let s = scores(n_dst, n_src, seed);
        let g = prune(&s, &GraphConfig::new(tau, k, 8).unwrap());
        for dst in 0..n_dst {
            let kept: BTreeSet<usize> = g.index().sources_of(dst).iter().copied().collect();
            let eligible = (0..n_src).filter(|&j| s.gate_at(dst, j) >= tau).count();
            prop_assert!(kept.len() <= k);
            prop_assert_eq!(kept.len(), eligible.min(k));
            let weakest_kept = kept.iter().map(|&j| s.gate_at(dst, j)).fold(f64::INFINITY, f64::min);
            for j in (0..n_src).filter(|j| !kept.contains(j)) {
                prop_assert!(s.gate_at(dst, j) < tau || s.gate_at(dst, j) <= weakest_kept);
            }
        }
    }

    #[test]
    fn larger_k_keeps_a_superset(n_dst in 1usize..12, n_src in 1usize..40, k in 1usize..20, seed in any::<u64>()) {
        let s = scores(n_dst, n_src, seed);
        prop_assert!(edge_set(&s, 0.25, k).is_subset(&edge_set(&s, 0.25, k + 5)));
    }

    #[test]
    fn segment_softmax_sums_to_one_per_destination(n_dst in 1usize..10, n_src in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(usize, usize)> = (0..n_dst)
            .flat_map(|d| (0..n_src).map(move |s| (d, s)))
            .filter(|_| rng.gen_bool(0.5))
            .collect();
        prop_assume!(!pairs.is_empty());
        let index = Arc::new(EdgeIndex::from_sorted_pairs(n_src, n_dst, pairs).unwrap());
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random_tensor(&[index.len()], &mut ChaCha8Rng::seed_from_u64(seed ^ 1), 20.0));
        let w = tape.segment_softmax(x, &index).unwrap();
        let w = tape.value(w).data();
        for d in 0..n_dst {
            let (lo, hi) = (index.offsets[d], index.offsets[d + 1]);
            if lo < hi {
                prop_assert!((w[lo..hi].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(n_src in 2usize..12, n_dst in 2usize..12, k in 1usize..12, seed in any::<u64>()) {
        let d = 4;
        let (ps, a) = attention(seed, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let (src, dst) = (random_tensor(&[n_src, d], &mut rng, 1.0), random_tensor(&[n_dst, d], &mut rng, 1.0));
        let cfg = GraphConfig::new(0.25, k, d).unwrap();
        let base = attend_rows(&ps, &a, &cfg, &src, &dst);

        let mut sp: Vec<usize> = (0..n_src).collect();
        let mut dp: Vec<usize> = (0..n_dst).collect();
        use rand::seq::SliceRandom;
        sp.shuffle(&mut rng);
        dp.shuffle(&mut rng);
        // Reordering sources changes nothing unless gates tie, which random inputs avoid.
        let moved = attend_rows(&ps, &a, &cfg, &permute_rows(&src, &sp), &permute_rows(&dst, &dp));
        prop_assert!(max_abs(moved.data(), permute_rows(&base, &dp).data()) < 1e-12);
    }
}

#[test]
fn complete_spatial_graph_equals_dense_attention() {
    let d = 6;
    let (ps, a) = attention(11, d);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (n_src, n_dst) = (rng.gen_range(1..30), rng.gen_range(1..30));
        let (src, dst) = (
            random_tensor(&[n_src, d], &mut rng, 1.0),
            random_tensor(&[n_dst, d], &mut rng, 1.0),
        );
        let cfg = GraphConfig::new(0.0, n_src, d).unwrap();
        let got = attend_rows(&ps, &a, &cfg, &src, &dst);
        let expect = dense_attention(&ps, &a, src.data(), dst.data(), dst.data(), d);
        assert!(max_abs(got.data(), &expect) <= 1e-6);
    }
}

#[test]
fn complete_temporal_graph_equals_dense_attention() {
    let c = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut ps = ParamStore::new();
    let g = TemporalGraph::new(&mut ps, &mut Init { rng: &mut rng }, "t", c);
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let (prev, curr) = (
            random_tensor(&[1, c, h, w], &mut rng, 1.0),
            random_tensor(&[1, c, h, w], &mut rng, 1.0),
        );
        let mut tape = Tape::new();
        let (p, q) = (tape.constant(prev.clone()), tape.constant(curr.clone()));
        let cfg = GraphConfig::new(0.0, h * w, c).unwrap();
        let (out, stats) = g
            .forward(&mut tape, &ps, &cfg, p, q, &mut Routing::record())
            .unwrap();
        assert_eq!(stats.edges, (h * w) * (h * w));
        let (src, dst) = (map_rows(&prev), map_rows(&curr));
        let expect = dense_attention(&ps, &g.attn, &src, &dst, &dst, c);
        assert!(max_abs(&map_rows(tape.value(out)), &expect) <= 1e-6);
    }
}
