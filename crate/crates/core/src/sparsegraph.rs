//! Sparse bipartite attention between two node sets.
//!
//! Every source/destination pair is scored densely; pairs whose sigmoid gate
//! falls below `tau` are dropped, then each destination keeps at most `k`
//! sources. Messages flow only along kept edges and are added to the
//! destination features through an output projection.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, mismatch, Error, Result};
use crate::nn::{map_to_rows, Init, Linear, ParamStore};
use crate::routing::Routing;
use crate::tensor::{EdgeIndex, Real, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.25;
pub const SPATIAL_K: usize = 25;
pub const TEMPORAL_K: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NodeOrigin {
    Rgb,
    Thermal,
    FramePrev,
    FrameCurr,
}

/// One node per position of a feature map, row-major over the grid.
#[derive(Clone, Copy, Debug)]
pub struct NodeSet {
    pub feats: Var,
    pub origin: NodeOrigin,
    pub height: usize,
    pub width: usize,
}

impl NodeSet {
    /// Flattens a `[1,C,H,W]` map into `[H·W, C]` node features.
    pub fn from_map<T: Real>(tape: &mut Tape<T>, map: Var, origin: NodeOrigin) -> Result<Self> {
        let s = tape.shape(map).to_vec();
        let feats = map_to_rows(tape, map)?;
        Ok(Self {
            feats,
            origin,
            height: s[2],
            width: s[3],
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial_index(&self, node: usize) -> (usize, usize) {
        (node / self.width, node % self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GraphConfig {
    pub tau: f64,
    pub k: usize,
    pub d_embed: usize,
}

impl GraphConfig {
    pub fn new(tau: f64, k: usize, d_embed: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(invalid("graph config", format!("tau {tau} outside [0,1]")));
        }
        if k == 0 || d_embed == 0 {
            return Err(invalid("graph config", "k and d_embed must be >= 1"));
        }
        Ok(Self { tau, k, d_embed })
    }

    pub fn spatial(d_embed: usize) -> Self {
        Self {
            tau: DEFAULT_TAU,
            k: SPATIAL_K,
            d_embed,
        }
    }

    pub fn temporal(d_embed: usize) -> Self {
        Self {
            tau: DEFAULT_TAU,
            k: TEMPORAL_K,
            d_embed,
        }
    }
}

/// Dense `[n_dst, n_src]` score and gate matrices.
#[derive(Clone, Debug)]
pub struct ScoreMatrices {
    pub n_dst: usize,
    pub n_src: usize,
    pub raw: Vec<f64>,
    pub gate: Vec<f64>,
}

impl ScoreMatrices {
    pub fn from_raw(n_dst: usize, n_src: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != n_dst * n_src {
            return Err(mismatch("score matrices", &[n_dst, n_src], &[raw.len()]));
        }
        let gate = raw.iter().map(|&r| crate::tensor::sigmoid(r)).collect();
        Ok(Self {
            n_dst,
            n_src,
            raw,
            gate,
        })
    }

    pub fn raw_at(&self, dst: usize, src: usize) -> f64 {
        self.raw[dst * self.n_src + src]
    }

    pub fn gate_at(&self, dst: usize, src: usize) -> f64 {
        self.gate[dst * self.n_src + src]
    }
}

/// `raw[i,j] = q_i · k_j / √d`, `gate = σ(raw)`. `q: [n_dst, d]`, `k: [n_src, d]`.
pub fn score_dense<T: Real>(q: &Tensor<T>, k: &Tensor<T>) -> Result<ScoreMatrices> {
    let (sq, sk) = (q.shape(), k.shape());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(mismatch("score_dense", sq, sk));
    }
    let (n_dst, n_src, d) = (sq[0], sk[0], sq[1]);
    let scale = T::one() / T::of(d as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut raw = Vec::with_capacity(n_dst * n_src);
    for i in 0..n_dst {
        let qr = &qd[i * d..(i + 1) * d];
        for j in 0..n_src {
            let dot: T = qr
                .iter()
                .zip(&kd[j * d..(j + 1) * d])
                .map(|(&a, &b)| a * b)
                .sum();
            raw.push((dot * scale).to_f64_lossy());
        }
    }
    ScoreMatrices::from_raw(n_dst, n_src, raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Edge {
    pub dst: usize,
    pub src: usize,
    pub gate: f64,
    pub raw_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseBipartiteGraph {
    pub n_src: usize,
    pub n_dst: usize,
    pub config: GraphConfig,
    edges: Vec<Edge>,
    index: Arc<EdgeIndex>,
}

impl SparseBipartiteGraph {
    /// Edges must already be sorted by `(dst, src)`.
    pub fn from_edges(
        n_src: usize,
        n_dst: usize,
        config: GraphConfig,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        let index =
            EdgeIndex::from_sorted_pairs(n_src, n_dst, edges.iter().map(|e| (e.dst, e.src)))?;
        Ok(Self {
            n_src,
            n_dst,
            config,
            edges,
            index: Arc::new(index),
        })
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn index(&self) -> &Arc<EdgeIndex> {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn in_degree(&self, dst: usize) -> usize {
        self.index.sources_of(dst).len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dst,src,gate,raw_score\n");
        for e in &self.edges {
            writeln!(out, "{},{},{},{}", e.dst, e.src, e.gate, e.raw_score)
                .expect("write to string");
        }
        out
    }

    pub fn from_csv(text: &str, n_src: usize, n_dst: usize, config: GraphConfig) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            what: "graph csv",
            msg,
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("dst,src,gate,raw_score") {
            return Err(bad("missing header".into()));
        }
        let mut edges = Vec::new();
        for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("line {}: expected 4 fields", no + 2)));
            }
            let parse_err = |e: &dyn std::fmt::Display| bad(format!("line {}: {e}", no + 2));
            edges.push(Edge {
                dst: f[0].trim().parse().map_err(|e| parse_err(&e))?,
                src: f[1].trim().parse().map_err(|e| parse_err(&e))?,
                gate: f[2].trim().parse().map_err(|e| parse_err(&e))?,
                raw_score: f[3].trim().parse().map_err(|e| parse_err(&e))?,
            });
        }
        Self::from_edges(n_src, n_dst, config, edges)
    }
}

/// Keeps edges with `gate >= tau`, then the `k` highest gates per
/// destination (ties to the lower source index).
pub fn prune(scores: &ScoreMatrices, config: &GraphConfig) -> SparseBipartiteGraph {
    let mut edges = Vec::new();
    let mut row: Vec<usize> = Vec::with_capacity(scores.n_src);
    for dst in 0..scores.n_dst {
        row.clear();
        row.extend((0..scores.n_src).filter(|&s| scores.gate_at(dst, s) >= config.tau));
        if row.len() > config.k {
            row.sort_by(|&a, &b| {
                scores
                    .gate_at(dst, b)
                    .total_cmp(&scores.gate_at(dst, a))
                    .then(a.cmp(&b))
            });
            row.truncate(config.k);
            row.sort_unstable();
        }
        edges.extend(row.iter().map(|&src| Edge {
            dst,
            src,
            gate: scores.gate_at(dst, src),
            raw_score: scores.raw_at(dst, src),
        }));
    }
    SparseBipartiteGraph::from_edges(scores.n_src, scores.n_dst, *config, edges)
        .expect("edges are generated in sorted order")
}

/// Multiply-accumulate counts of the aggregation stage for value width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EdgeCost {
    pub aggregation_sparse: u64,
    pub aggregation_dense: u64,
    pub projection: u64,
    pub macs_sparse: u64,
    pub macs_dense: u64,
}

impl EdgeCost {
    pub fn aggregation_ratio(&self) -> f64 {
        if self.aggregation_sparse == 0 {
            return f64::INFINITY;
        }
        self.aggregation_dense as f64 / self.aggregation_sparse as f64
    }
}

/// Each edge costs one `d`-wide score and one `d`-wide weighted accumulate;
/// projections cost `d²` per source (values) and per destination (output).
pub fn edge_cost(graph: &SparseBipartiteGraph, d: usize) -> EdgeCost {
    let d = d as u64;
    let aggregation_sparse = graph.len() as u64 * d * 2;
    let aggregation_dense = (graph.n_src * graph.n_dst) as u64 * d * 2;
    let projection = (graph.n_src + graph.n_dst) as u64 * d * d;
    EdgeCost {
        aggregation_sparse,
        aggregation_dense,
        projection,
        macs_sparse: aggregation_sparse + projection,
        macs_dense: aggregation_dense + projection,
    }
}

/// Query/key/value/output projections of one sparse attention block.
#[derive(Clone, Debug)]
pub struct SparseAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub d_embed: usize,
}

/// Output of a sparse attention pass.
#[derive(Clone, Debug)]
pub struct Attended {
    pub out: Var,
    pub graph: SparseBipartiteGraph,
}

impl SparseAttention {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        d: usize,
        d_embed: usize,
    ) -> Self {
        Self {
            wq: Linear::new(ps, init, &format!("{name}.wq"), d, d_embed, false),
            wk: Linear::new(ps, init, &format!("{name}.wk"), d, d_embed, false),
            wv: Linear::new(ps, init, &format!("{name}.wv"), d, d, false),
            wo: Linear::new(ps, init, &format!("{name}.wo"), d, d, false),
            d_embed,
        }
    }

    /// Queries from destination features, keys from source features.
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        src: Var,
        dst: Var,
    ) -> Result<(Var, Var)> {
        let q = self.wq.forward(tape, ps, dst)?;
        let k = self.wk.forward(tape, ps, src)?;
        Ok((q, k))
    }

    /// Softmax over the raw scores of kept edges, weighted sum of projected
    /// source values, projected and added to `dst_feats`. Destinations without
    /// edges pass through unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn aggregate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        graph: &SparseBipartiteGraph,
        q: Var,
        k: Var,
        src_vals: Var,
        dst_feats: Var,
    ) -> Result<Var> {
        if graph.is_empty() {
            return Ok(dst_feats);
        }
        let scale = T::one() / T::of(self.d_embed as f64).sqrt();
        let scores = tape.edge_dot(q, k, graph.index(), scale)?;
        let weights = tape.segment_softmax(scores, graph.index())?;
        let values = self.wv.forward(tape, ps, src_vals)?;
        let message = tape.spmm(weights, values, graph.index())?;
        let message = self.wo.forward(tape, ps, message)?;
        tape.add(dst_feats, message)
    }

    /// Full pipeline: project, score, prune (or replay a recorded graph), aggregate.
    /// `src_feats`/`dst_feats` are used for scoring; `src_vals`/`dst_base` carry values.
    #[allow(clippy::too_many_arguments)]
    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        config: &GraphConfig,
        src_feats: Var,
        dst_feats: Var,
        src_vals: Var,
        dst_base: Var,
        routing: &mut Routing,
    ) -> Result<Attended> {
        let (q, k) = self.project(tape, ps, src_feats, dst_feats)?;
        let n_src = tape.shape(k)[0];
        let config = GraphConfig {
            k: config.k.min(n_src),
            ..*config
        };
        let graph =
            routing.graph(|| Ok(prune(&score_dense(tape.value(q), tape.value(k))?, &config)))?;
        let out = self.aggregate(tape, ps, &graph, q, k, src_vals, dst_base)?;
        Ok(Attended { out, graph })
    }
}

/// Softmax attention restricted to kept edges on plain buffers; returns the
/// `[n_dst, d]` message. Used for benchmarking the aggregation stage.
pub fn sparse_messages(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d_embed: usize,
    d: usize,
    index: &EdgeIndex,
) -> Vec<f32> {
    let scale = 1.0 / (d_embed as f32).sqrt();
    let mut out = vec![0.0f32; index.n_dst * d];
    let mut w = Vec::new();
    for dst in 0..index.n_dst {
        let srcs = index.sources_of(dst);
        if srcs.is_empty() {
            continue;
        }
        let qr = &q[dst * d_embed..(dst + 1) * d_embed];
        w.clear();
        w.extend(srcs.iter().map(|&s| {
            qr.iter()
                .zip(&k[s * d_embed..(s + 1) * d_embed])
                .map(|(a, b)| a * b)
                .sum::<f32>()
                * scale
        }));
        softmax_in_place(&mut w);
        let row = &mut out[dst * d..(dst + 1) * d];
        for (&s, &wi) in srcs.iter().zip(&w) {
            for (o, &x) in row.iter_mut().zip(&v[s * d..(s + 1) * d]) {
                *o += wi * x;
            }
        }
    }
    out
}

/// Dense softmax attention over every source on plain buffers.
pub fn dense_messages(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d_embed: usize,
    d: usize,
    n_dst: usize,
    n_src: usize,
) -> Vec<f32> {
    let scale = 1.0 / (d_embed as f32).sqrt();
    let mut out = vec![0.0f32; n_dst * d];
    let mut w = vec![0.0f32; n_src];
    for dst in 0..n_dst {
        let qr = &q[dst * d_embed..(dst + 1) * d_embed];
        for (s, ws) in w.iter_mut().enumerate() {
            *ws = qr
                .iter()
                .zip(&k[s * d_embed..(s + 1) * d_embed])
                .map(|(a, b)| a * b)
                .sum::<f32>()
                * scale;
        }
        softmax_in_place(&mut w);
        let row = &mut out[dst * d..(dst + 1) * d];
        for (s, &wi) in w.iter().enumerate() {
            for (o, &x) in row.iter_mut().zip(&v[s * d..(s + 1) * d]) {
                *o += wi * x;
            }
        }
    }
    out
}

fn softmax_in_place(w: &mut [f32]) {
    let m = w.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for x in w.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in w.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn zero_vectors_give_half_gate() {
        let q = Tensor::<f64>::zeros(&[2, 4]);
        let s = score_dense(&q, &q).unwrap();
        assert!(s.raw.iter().all(|&r| r == 0.0));
        assert!(s.gate.iter().all(|&g| g == 0.5));
    }

    #[test]
    fn unit_vectors_in_four_dims() {
        let u = Tensor::<f64>::from_f64(&[1, 4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = score_dense(&u, &u).unwrap();
        assert!((s.raw[0] - 0.5).abs() < 1e-15);
        assert!((s.gate[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn query_scaling_scales_raw() {
        let q = Tensor::<f64>::from_f64(&[2, 3], &[0.1, -0.4, 0.3, 0.9, 0.2, -0.5]).unwrap();
        let k = Tensor::<f64>::from_f64(&[2, 3], &[0.7, 0.1, -0.2, -0.3, 0.8, 0.6]).unwrap();
        let q3 = Tensor::from_fn(q.shape(), |i| q.data()[i] * 3.0);
        let (a, b) = (score_dense(&q, &k).unwrap(), score_dense(&q3, &k).unwrap());
        for (x, y) in a.raw.iter().zip(&b.raw) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
        assert!(score_dense(&q, &Tensor::<f64>::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn threshold_then_topk() {
        let raw: Vec<f64> = [0.9, 0.3, 0.1].iter().map(|&g| logit(g)).collect();
        let s = ScoreMatrices::from_raw(1, 3, raw).unwrap();
        let g = prune(&s, &GraphConfig::new(0.25, 25, 4).unwrap());
        assert_eq!(g.len(), 2);
        let g1 = prune(&s, &GraphConfig::new(0.25, 1, 4).unwrap());
        assert_eq!(g1.edges()[0].src, 0);
        let full = prune(&s, &GraphConfig::new(0.0, 5, 4).unwrap());
        assert_eq!(full.len(), 3);
    }

    #[test]
    fn ties_prefer_lower_source() {
        let s = ScoreMatrices::from_raw(1, 4, vec![0.5, 1.0, 1.0, 1.0]).unwrap();
        let g = prune(&s, &GraphConfig::new(0.0, 2, 4).unwrap());
        let srcs: Vec<usize> = g.edges().iter().map(|e| e.src).collect();
        assert_eq!(srcs, vec![1, 2]);
    }

    #[test]
    fn cost_counting() {
        let s = ScoreMatrices::from_raw(2, 3, vec![0.0; 6]).unwrap();
        let complete = prune(&s, &GraphConfig::new(0.0, 10, 4).unwrap());
        let c = edge_cost(&complete, 8);
        assert_eq!(c.macs_sparse, c.macs_dense);

        let empty = prune(&s, &GraphConfig::new(0.9, 10, 4).unwrap());
        let c = edge_cost(&empty, 8);
        assert_eq!(c.macs_sparse, c.projection);

        let raw: Vec<f64> = (0..400 * 400)
            .map(|i| ((i * 7919) % 400) as f64 / 100.0)
            .collect();
        let s = ScoreMatrices::from_raw(400, 400, raw).unwrap();
        let g = prune(&s, &GraphConfig::new(0.5, 25, 4).unwrap());
        assert!((0..400).all(|d| g.in_degree(d) == 25));
        assert_eq!(edge_cost(&g, 16).aggregation_ratio(), 16.0);
    }

    #[test]
    fn csv_roundtrip() {
        let s = ScoreMatrices::from_raw(2, 2, vec![0.3, -1.25, 2.0, 1e-9]).unwrap();
        let g = prune(&s, &GraphConfig::new(0.25, 2, 4).unwrap());
        let back = SparseBipartiteGraph::from_csv(&g.to_csv(), 2, 2, g.config).unwrap();
        assert_eq!(back, g);
        assert!(SparseBipartiteGraph::from_csv("nope\n", 2, 2, g.config).is_err());
    }

    #[test]
    fn bench_kernels_agree_on_complete_graph() {
        let (n, d) = (5, 3);
        let q: Vec<f32> = (0..n * d).map(|i| (i as f32 * 0.37).sin()).collect();
        let k: Vec<f32> = (0..n * d).map(|i| (i as f32 * 0.11).cos()).collect();
        let v: Vec<f32> = (0..n * d).map(|i| i as f32 * 0.1).collect();
        let idx =
            EdgeIndex::from_sorted_pairs(n, n, (0..n).flat_map(|a| (0..n).map(move |b| (a, b))))
                .unwrap();
        let a = sparse_messages(&q, &k, &v, d, d, &idx);
        let b = dense_messages(&q, &k, &v, d, d, n, n);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
