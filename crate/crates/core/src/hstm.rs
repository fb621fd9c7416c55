//! Two-frame temporal modeling: a sparse temporal graph from the previous to
//! the current fused map, a star block mixing local structure of both frames,
//! and a 1×1 merge of the two branches.

use crate::encoder::FeaturePyramid;
use crate::error::{mismatch, Result};
use crate::nn::{map_to_rows, rows_to_map, Conv2d, Init, ParamStore};
use crate::routing::Routing;
use crate::sparsegraph::{GraphConfig, SparseAttention};
use crate::ssglm::{batch_item, GraphStats};
use crate::tensor::{Real, Tape, Var};

/// Channel expansion inside the star block.
pub const STAR_EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub struct TemporalGraph {
    pub attn: SparseAttention,
}

impl TemporalGraph {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            attn: SparseAttention::new(ps, init, name, channels, channels),
        }
    }

    /// Previous-frame positions are sources, current-frame positions are
    /// destinations; the output lives on the current frame's grid.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        config: &GraphConfig,
        prev: Var,
        curr: Var,
        routing: &mut Routing,
    ) -> Result<(Var, GraphStats)> {
        let (sp, sc) = (tape.shape(prev).to_vec(), tape.shape(curr).to_vec());
        if sp != sc || sp.len() != 4 {
            return Err(mismatch("tsglm", &sp, &sc));
        }
        let batch = sp[0];
        let mut stats = GraphStats::default();
        let mut items = Vec::with_capacity(batch);
        for b in 0..batch {
            let p = batch_item(tape, prev, b, batch)?;
            let c = batch_item(tape, curr, b, batch)?;
            let src = map_to_rows(tape, p)?;
            let dst = map_to_rows(tape, c)?;
            let att = self
                .attn
                .attend(tape, ps, config, src, dst, src, dst, routing)?;
            stats.edges += att.graph.len();
            stats.n_src += att.graph.n_src;
            stats.n_dst += att.graph.n_dst;
            items.push(rows_to_map(tape, att.out, sp[2], sp[3])?);
        }
        let out = if batch == 1 {
            items[0]
        } else {
            tape.concat(&items, 0)?
        };
        Ok((out, stats))
    }
}

/// `y = conv3×3(linear(relu(f1(x)) ∘ f2(x))) + curr` with
/// `x = conv3×3([prev, curr])`.
#[derive(Clone, Debug)]
pub struct TemporalStarBlock {
    pub conv_in: Conv2d,
    pub f1: Conv2d,
    pub f2: Conv2d,
    pub proj: Conv2d,
    pub conv_out: Conv2d,
}

impl TemporalStarBlock {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, init: &mut Init<'_>, name: &str, c: usize) -> Self {
        let wide = STAR_EXPANSION * c;
        Self {
            conv_in: Conv2d::new(ps, init, &format!("{name}.conv_in"), 2 * c, c, 3, 1),
            f1: Conv2d::new(ps, init, &format!("{name}.f1"), c, wide, 1, 1),
            f2: Conv2d::new(ps, init, &format!("{name}.f2"), c, wide, 1, 1),
            proj: Conv2d::new(ps, init, &format!("{name}.proj"), wide, c, 1, 1),
            conv_out: Conv2d::new(ps, init, &format!("{name}.conv_out"), c, c, 3, 1),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        prev: Var,
        curr: Var,
    ) -> Result<Var> {
        let (sp, sc) = (tape.shape(prev).to_vec(), tape.shape(curr).to_vec());
        if sp != sc {
            return Err(mismatch("tsb", &sp, &sc));
        }
        let both = tape.concat(&[prev, curr], 1)?;
        let x = self.conv_in.forward(tape, ps, both)?;
        let a = self.f1.forward(tape, ps, x)?;
        let a = tape.relu(a);
        let b = self.f2.forward(tape, ps, x)?;
        let star = tape.mul(a, b)?;
        let y = self.proj.forward(tape, ps, star)?;
        let y = self.conv_out.forward(tape, ps, y)?;
        tape.add(y, curr)
    }
}

#[derive(Clone, Debug)]
pub struct HybridLevel {
    pub tsglm: TemporalGraph,
    pub tsb: TemporalStarBlock,
    pub combine: Conv2d,
}

impl HybridLevel {
    /// `combine(a + b)` with a 1×1 projection.
    pub fn combine<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        tsglm_out: Var,
        tsb_out: Var,
    ) -> Result<Var> {
        let s = tape.add(tsglm_out, tsb_out)?;
        self.combine.forward(tape, ps, s)
    }
}

#[derive(Clone, Debug)]
pub struct HybridTemporal {
    pub levels: [HybridLevel; 3],
    pub tau: f64,
    pub k: usize,
}

impl HybridTemporal {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        level_channels: [usize; 3],
        tau: f64,
        k: usize,
    ) -> Self {
        let level = |ps: &mut ParamStore<T>, init: &mut Init<'_>, l: usize| {
            let c = level_channels[l];
            HybridLevel {
                tsglm: TemporalGraph::new(ps, init, &format!("hstm{l}.tsglm"), c),
                tsb: TemporalStarBlock::new(ps, init, &format!("hstm{l}.tsb"), c),
                combine: Conv2d::new(ps, init, &format!("hstm{l}.combine"), c, c, 1, 1),
            }
        };
        Self {
            levels: [level(ps, init, 0), level(ps, init, 1), level(ps, init, 2)],
            tau,
            k,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        prev: &FeaturePyramid,
        curr: &FeaturePyramid,
        routing: &mut Routing,
    ) -> Result<([Var; 3], [GraphStats; 3])> {
        let mut out = [curr.p2; 3];
        let mut stats = [GraphStats::default(); 3];
        for (l, (p, c)) in prev.levels().into_iter().zip(curr.levels()).enumerate() {
            let lvl = &self.levels[l];
            let n = tape.shape(p)[2] * tape.shape(p)[3];
            let config = GraphConfig::new(self.tau, self.k.min(n), lvl.tsglm.attn.d_embed)?;
            let (g, st) = lvl.tsglm.forward(tape, ps, &config, p, c, routing)?;
            let s = lvl.tsb.forward(tape, ps, p, c)?;
            out[l] = lvl.combine(tape, ps, g, s)?;
            stats[l] = st;
        }
        Ok((out, stats))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_params, project_to_scalar, random_tensor, CheckOptions};
    use crate::reference::{dense_attention, map_rows};
    use crate::routing::ReplayCell;
    use crate::sparsegraph::TEMPORAL_K;
    use crate::tensor::Tensor;

    fn params(seed: u64) -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
    }

    fn graph(c: usize, seed: u64) -> (ParamStore<f64>, TemporalGraph) {
        let (mut ps, mut rng) = params(seed);
        let g = TemporalGraph::new(&mut ps, &mut Init { rng: &mut rng }, "t", c);
        (ps, g)
    }

    fn run_graph(
        ps: &ParamStore<f64>,
        g: &TemporalGraph,
        cfg: &GraphConfig,
        prev: &Tensor<f64>,
        curr: &Tensor<f64>,
    ) -> (Tensor<f64>, Routing) {
        let mut tape = Tape::new();
        let (p, c) = (tape.constant(prev.clone()), tape.constant(curr.clone()));
        let mut routing = Routing::record();
        let (out, _) = g.forward(&mut tape, ps, cfg, p, c, &mut routing).unwrap();
        (tape.value(out).clone(), routing)
    }

    #[test]
    fn identical_frames_attend_to_themselves() {
        let c = 64;
        let (mut ps, g) = graph(c, 1);
        g.attn.wq.set_identity(&mut ps);
        g.attn.wk.set_identity(&mut ps);
        let cfg = GraphConfig::new(0.0, 16, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random_tensor(&[1, c, 4, 4], &mut rng, 1.0);
            let (_, routing) = run_graph(&ps, &g, &cfg, &x, &x);
            let gr = &routing.graphs[0];
            for dst in 0..16 {
                let best = gr
                    .edges()
                    .iter()
                    .filter(|e| e.dst == dst)
                    .max_by(|a, b| a.raw_score.total_cmp(&b.raw_score))
                    .unwrap();
                assert_eq!(best.src, dst);
            }
        }
    }

    #[test]
    fn zero_output_projection_returns_current_frame() {
        let (mut ps, g) = graph(6, 3);
        g.attn.wo.zero(&mut ps);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, c) = (
            random_tensor(&[1, 6, 3, 5], &mut rng, 1.0),
            random_tensor(&[1, 6, 3, 5], &mut rng, 1.0),
        );
        let (out, _) = run_graph(&ps, &g, &GraphConfig::temporal(6), &p, &c);
        assert_eq!(out, c);
    }

    #[test]
    fn complete_graph_equals_dense_attention() {
        let c = 5;
        let (ps, g) = graph(c, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = GraphConfig::new(0.0, 100, c).unwrap();
        for _ in 0..20 {
            let (p, cu) = (
                random_tensor(&[1, c, 4, 3], &mut rng, 1.0),
                random_tensor(&[1, c, 4, 3], &mut rng, 1.0),
            );
            let (out, routing) = run_graph(&ps, &g, &cfg, &p, &cu);
            assert_eq!(routing.graphs[0].len(), 144);
            let (src, dst) = (map_rows(&p), map_rows(&cu));
            let expect = dense_attention(&ps, &g.attn, &src, &dst, &dst, c);
            let err = map_rows(&out)
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn redundant_edges_are_filtered() {
        let c = 16;
        let (mut ps, g) = graph(c, 7);
        g.attn.wq.set_identity(&mut ps);
        g.attn.wk.set_identity(&mut ps);
        let cfg = GraphConfig::new(0.5, TEMPORAL_K, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[1, c, 6, 6], &mut rng, 1.7);
        let (_, routing) = run_graph(&ps, &g, &cfg, &x, &x);
        let gr = &routing.graphs[0];
        for dst in 0..36 {
            assert!(gr.in_degree(dst) <= TEMPORAL_K);
            assert!(gr.in_degree(dst) < 36, "dst {dst} kept every source");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (ps, g) = graph(4, 9);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let c = tape.constant(Tensor::zeros(&[1, 4, 2, 3]));
        assert!(g
            .forward(
                &mut tape,
                &ps,
                &GraphConfig::temporal(4),
                p,
                c,
                &mut Routing::record()
            )
            .is_err());
    }

    fn star(c: usize, seed: u64) -> (ParamStore<f64>, TemporalStarBlock) {
        let (mut ps, mut rng) = params(seed);
        let b = TemporalStarBlock::new(&mut ps, &mut Init { rng: &mut rng }, "s", c);
        (ps, b)
    }

    #[test]
    fn star_block_is_identity_under_zero_final_conv() {
        let (mut ps, b) = star(5, 10);
        b.conv_out.zero(&mut ps);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let p = tape.constant(random_tensor(&[1, 5, 4, 6], &mut rng, 1.0));
        let c = tape.constant(random_tensor(&[1, 5, 4, 6], &mut rng, 1.0));
        let y = b.forward(&mut tape, &ps, p, c).unwrap();
        let (yv, cv) = (tape.value(y), tape.value(c));
        assert!(yv
            .data()
            .iter()
            .zip(cv.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn star_block_preserves_shape() {
        for (c, h, w) in [(1, 1, 1), (3, 2, 5), (8, 4, 4)] {
            let (ps, b) = star(c, 12);
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::zeros(&[1, c, h, w]));
            let y = b.forward(&mut tape, &ps, p, p).unwrap();
            assert_eq!(tape.shape(y), &[1, c, h, w]);
        }
    }

    #[test]
    fn star_block_gradients() {
        let (ps, b) = star(3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (p, c) = (
            random_tensor(&[1, 3, 4, 4], &mut rng, 1.0),
            random_tensor(&[1, 3, 4, 4], &mut rng, 1.0),
        );
        let ids: Vec<_> = ps.ids().collect();
        let out = check_params("tsb", &ps, &ids, CheckOptions::default(), |tape, ps| {
            let (pv, cv) = (tape.constant(p.clone()), tape.constant(c.clone()));
            let y = b.forward(tape, ps, pv, cv)?;
            project_to_scalar(tape, y, 15)
        })
        .unwrap();
        assert!(out.passes(1e-3), "{out:?}");
    }

    fn hybrid(ch: [usize; 3], tau: f64, k: usize, seed: u64) -> (ParamStore<f64>, HybridTemporal) {
        let (mut ps, mut rng) = params(seed);
        let h = HybridTemporal::new(&mut ps, &mut Init { rng: &mut rng }, ch, tau, k);
        (ps, h)
    }

    fn identity_1x1(ps: &mut ParamStore<f64>, conv: &Conv2d) {
        let w = ps.get_mut(conv.weight);
        let c = w.shape()[0];
        w.fill(0.0);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        ps.get_mut(conv.bias).fill(0.0);
    }

    #[test]
    fn combine_properties() {
        let (mut ps, h) = hybrid([3, 3, 3], 0.25, 100, 16);
        let lvl = &h.levels[0];
        identity_1x1(&mut ps, &lvl.combine);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let a = tape.constant(random_tensor(&[1, 3, 2, 2], &mut rng, 1.0));
        let b = tape.constant(random_tensor(&[1, 3, 2, 2], &mut rng, 1.0));
        let z = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let az = lvl.combine(&mut tape, &ps, a, z).unwrap();
        assert_eq!(tape.value(az), tape.value(a));
        let ab = lvl.combine(&mut tape, &ps, a, b).unwrap();
        let ba = lvl.combine(&mut tape, &ps, b, a).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));
        let zz = lvl.combine(&mut tape, &ps, z, z).unwrap();
        assert!(tape.value(zz).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hybrid_shapes_and_gradients() {
        let ch = [3, 4, 5];
        let (ps, h) = hybrid(ch, 0.25, 6, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let ext = [4, 2, 1];
        let make = |rng: &mut ChaCha8Rng| {
            [0, 1, 2].map(|l| random_tensor(&[1, ch[l], ext[l], ext[l]], rng, 1.0))
        };
        let (prev, curr) = (make(&mut rng), make(&mut rng));
        let pyr = |tape: &mut Tape<f64>, p: &[Tensor<f64>; 3]| {
            FeaturePyramid::from_levels(p.clone().map(|t| tape.constant(t)))
        };

        let mut tape = Tape::new();
        let (p, c) = (pyr(&mut tape, &prev), pyr(&mut tape, &curr));
        let (out, stats) = h
            .forward(&mut tape, &ps, &p, &c, &mut Routing::record())
            .unwrap();
        for l in 0..3 {
            assert_eq!(tape.shape(out[l]), &[1, ch[l], ext[l], ext[l]]);
            let n = ext[l] * ext[l];
            assert!(stats[l].edges <= n * 6.min(n));
        }

        let ids: Vec<_> = ps.ids().collect();
        let cell = ReplayCell::new();
        let opts = CheckOptions {
            max_entries: 6,
            ..CheckOptions::default()
        };
        let res = check_params("hstm", &ps, &ids, opts, |tape, ps| {
            cell.run(|routing| {
                let (p, c) = (pyr(tape, &prev), pyr(tape, &curr));
                let (out, _) = h.forward(tape, ps, &p, &c, routing)?;
                let mut acc = project_to_scalar(tape, out[0], 1)?;
                for (l, &o) in out.iter().enumerate().skip(1) {
                    let s = project_to_scalar(tape, o, 1 + l as u64)?;
                    acc = tape.add(acc, s)?;
                }
                Ok(acc)
            })
        })
        .unwrap();
        assert!(res.passes(1e-3), "{res:?}");
    }
}
