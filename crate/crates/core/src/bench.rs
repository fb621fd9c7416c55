//! Sparse versus dense aggregation cost over a grid of node counts, top-K
//! limits and gate thresholds.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::sparsegraph::{
    dense_messages, edge_cost, prune, score_dense, sparse_messages, GraphConfig,
};
use crate::tensor::Tensor;

pub const BENCH_NODES: [usize; 3] = [64, 256, 1024];
pub const BENCH_K: [usize; 4] = [10, 25, 50, 100];
pub const BENCH_TAU: [f64; 4] = [0.0, 0.25, 0.5, 0.75];
/// Feature width of the benchmark nodes.
pub const BENCH_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchConfig {
    pub seed: u64,
    pub nodes: Vec<usize>,
    pub k: Vec<usize>,
    pub tau: Vec<f64>,
    pub dim: usize,
    /// Measure wall-clock time. Off by default so reports stay reproducible.
    pub timing: bool,
    /// Timed repetitions per kernel; the minimum is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            nodes: BENCH_NODES.to_vec(),
            k: BENCH_K.to_vec(),
            tau: BENCH_TAU.to_vec(),
            dim: BENCH_DIM,
            timing: false,
            repeats: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub sparse_ms: f64,
    pub dense_ms: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub nodes: usize,
    pub k: usize,
    pub tau: f64,
    pub edges: usize,
    pub max_in_degree: usize,
    pub aggregation_sparse: u64,
    pub aggregation_dense: u64,
    pub macs_sparse: u64,
    pub macs_dense: u64,
    /// Dense over sparse multiply-accumulates of the aggregation stage.
    pub aggregation_ratio: f64,
    /// Dense over sparse multiply-accumulates including projections.
    pub total_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

struct Nodes {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

fn nodes(n: usize, d: usize, seed: u64) -> Nodes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64) << 32);
    // Spread of ±2 gives gate values covering most of (0, 1).
    let mut draw = |len: usize| {
        (0..len)
            .map(|_| rng.gen_range(-2.0f32..2.0))
            .collect::<Vec<_>>()
    };
    Nodes {
        q: draw(n * d),
        k: draw(n * d),
        v: draw(n * d),
    }
}

fn min_ms(repeats: usize, mut f: impl FnMut()) -> f64 {
    (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}

fn row(cfg: &BenchConfig, n: usize, k: usize, tau: f64, x: &Nodes) -> Result<BenchRow> {
    let d = cfg.dim;
    let q = Tensor::new(vec![n, d], x.q.clone())?;
    let kt = Tensor::new(vec![n, d], x.k.clone())?;
    let graph = prune(&score_dense(&q, &kt)?, &GraphConfig::new(tau, k, d)?);
    let cost = edge_cost(&graph, d);
    let max_in_degree = (0..n).map(|dst| graph.in_degree(dst)).max().unwrap_or(0);
    Ok(BenchRow {
        nodes: n,
        k,
        tau,
        edges: graph.len(),
        max_in_degree,
        aggregation_sparse: cost.aggregation_sparse,
        aggregation_dense: cost.aggregation_dense,
        macs_sparse: cost.macs_sparse,
        macs_dense: cost.macs_dense,
        aggregation_ratio: cost.aggregation_ratio(),
        total_ratio: cost.macs_dense as f64 / cost.macs_sparse as f64,
        timing: None,
    })
}

/// Wall-clock of the aggregation stage (softmax attention over the given
/// edges versus over all sources) for one grid point.
pub fn time_aggregation(
    n: usize,
    k: usize,
    tau: f64,
    dim: usize,
    seed: u64,
    repeats: usize,
) -> Result<Timing> {
    let x = nodes(n, dim, seed);
    let q = Tensor::new(vec![n, dim], x.q.clone())?;
    let kt = Tensor::new(vec![n, dim], x.k.clone())?;
    let graph = prune(&score_dense(&q, &kt)?, &GraphConfig::new(tau, k, dim)?);
    let index = graph.index().clone();
    let sparse_ms = min_ms(repeats, || {
        black_box(sparse_messages(&x.q, &x.k, &x.v, dim, dim, &index));
    });
    let dense_ms = min_ms(repeats, || {
        black_box(dense_messages(&x.q, &x.k, &x.v, dim, dim, n, n));
    });
    Ok(Timing {
        sparse_ms,
        dense_ms,
        speedup: dense_ms / sparse_ms,
    })
}

/// Runs the grid. Counting runs in parallel; timing runs one point at a
/// time so trials do not compete for cores.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut points = Vec::new();
    for &n in &cfg.nodes {
        for &k in &cfg.k {
            for &tau in &cfg.tau {
                points.push((n, k, tau));
            }
        }
    }
    let node_sets: Vec<(usize, Nodes)> = cfg
        .nodes
        .iter()
        .map(|&n| (n, nodes(n, cfg.dim, cfg.seed)))
        .collect();
    let lookup = |n: usize| {
        &node_sets
            .iter()
            .find(|(m, _)| *m == n)
            .expect("grid node count")
            .1
    };
    let mut rows = points
        .par_iter()
        .map(|&(n, k, tau)| row(cfg, n, k, tau, lookup(n)))
        .collect::<Result<Vec<_>>>()?;
    if cfg.timing {
        for r in &mut rows {
            r.timing = Some(time_aggregation(
                r.nodes,
                r.k,
                r.tau,
                cfg.dim,
                cfg.seed,
                cfg.repeats,
            )?);
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            nodes: vec![64, 256],
            ..BenchConfig::default()
        }
    }

    #[test]
    fn counts_follow_the_grid() {
        let report = run_bench(&small()).unwrap();
        assert_eq!(report.rows.len(), 2 * 4 * 4);
        for r in &report.rows {
            assert!(r.max_in_degree <= r.k);
            assert!(r.aggregation_ratio >= 1.0);
            if r.tau == 0.0 {
                assert_eq!(r.edges, r.nodes * r.k.min(r.nodes));
            }
            if r.tau == 0.0 && r.k >= r.nodes {
                assert_eq!(r.aggregation_ratio, 1.0);
            }
        }
        // Raising the threshold never adds edges.
        for w in report.rows.windows(2) {
            if (w[0].nodes, w[0].k) == (w[1].nodes, w[1].k) {
                assert!(w[1].macs_sparse <= w[0].macs_sparse);
            }
        }
        let spread = report
            .rows
            .iter()
            .filter(|r| r.nodes == 256 && r.k == 100)
            .map(|r| r.edges)
            .collect::<Vec<_>>();
        assert!(spread[3] < spread[0], "{spread:?}");
    }

    #[test]
    fn report_is_reproducible() {
        let a = serde_json::to_string(&run_bench(&small()).unwrap()).unwrap();
        let b = serde_json::to_string(&run_bench(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains("sparse_ms"));
    }
}
