//! Cross-modal fusion at one timestep: crop the RGB maps to the predicted
//! thermal field of view, resize the thermal maps to the crop, project both
//! through one shared 1×1 layer and inject sparse thermal messages into the
//! RGB positions. The fused crop is written back into a copy of the full map.

use serde::Serialize;

use crate::apl::{crop_fused, AdaptivePartition, PartitionDecision};
use crate::encoder::FeaturePyramid;
use crate::error::{mismatch, Result};
use crate::nn::{map_to_rows, rows_to_map, Conv2d, Init, ParamStore};
use crate::routing::Routing;
use crate::sparsegraph::{GraphConfig, SparseAttention};
use crate::tensor::{Real, Tape, Var};

/// Width of the hidden convolutions in the λ head.
pub const APL_WIDTH: usize = 32;

#[derive(Clone, Debug)]
pub struct SpatialFusion {
    pub apl: AdaptivePartition,
    pub shared_proj: [Conv2d; 3],
    pub attn: [SparseAttention; 3],
    pub tau: f64,
    pub k: usize,
}

/// Kept-edge statistics of one graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GraphStats {
    pub edges: usize,
    pub n_src: usize,
    pub n_dst: usize,
}

#[derive(Clone, Debug)]
pub struct FusedFrame {
    pub fused: FeaturePyramid,
    /// One decision per batch item (rectangle expressed on the P2 grid).
    pub decisions: Vec<PartitionDecision>,
    /// `[B]` scale estimates.
    pub lambda: Var,
    /// Graph statistics per level, summed over the batch.
    pub stats: [GraphStats; 3],
}

impl SpatialFusion {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        level_channels: [usize; 3],
        tau: f64,
        k: usize,
    ) -> Self {
        let proj = |ps: &mut ParamStore<T>, init: &mut Init<'_>, l: usize| {
            Conv2d::new(
                ps,
                init,
                &format!("ssglm.proj{l}"),
                level_channels[l],
                level_channels[l],
                1,
                1,
            )
        };
        let attn = |ps: &mut ParamStore<T>, init: &mut Init<'_>, l: usize| {
            SparseAttention::new(
                ps,
                init,
                &format!("ssglm.attn{l}"),
                level_channels[l],
                level_channels[l],
            )
        };
        Self {
            apl: AdaptivePartition::new(ps, init, level_channels[0], APL_WIDTH),
            shared_proj: [proj(ps, init, 0), proj(ps, init, 1), proj(ps, init, 2)],
            attn: [attn(ps, init, 0), attn(ps, init, 1), attn(ps, init, 2)],
            tau,
            k,
        }
    }

    /// Zeroes every output projection so fusion returns the RGB pyramid unchanged.
    pub fn zero_output<T: Real>(&self, ps: &mut ParamStore<T>) {
        for a in &self.attn {
            a.wo.zero(ps);
        }
    }

    /// λ for each batch item from the finest level, where the two views still
    /// keep enough positions to compare their extents.
    pub fn predict_lambda<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        rgb: &FeaturePyramid,
        th: &FeaturePyramid,
    ) -> Result<Var> {
        let s = tape.shape(rgb.p2).to_vec();
        let th2 = tape.bilinear_resize(th.p2, s[2], s[3])?;
        self.apl.predict_lambda(tape, ps, rgb.p2, th2)
    }

    pub fn fuse_modalities<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        rgb: &FeaturePyramid,
        th: &FeaturePyramid,
        routing: &mut Routing,
    ) -> Result<FusedFrame> {
        let (rs, ts) = (tape.shape(rgb.p4).to_vec(), tape.shape(th.p4).to_vec());
        if rs[0] != ts[0] {
            return Err(mismatch("fuse_modalities batch", &rs, &ts));
        }
        let batch = rs[0];
        let lambda = self.predict_lambda(tape, ps, rgb, th)?;
        let mut decisions = Vec::with_capacity(batch);
        for b in 0..batch {
            let value = tape.value(lambda).data()[b].to_f64_lossy();
            decisions.push(routing.decision(|| PartitionDecision::new(value, rs[2], rs[3]))?);
        }

        let mut stats = [GraphStats::default(); 3];
        let mut fused = [rgb.p2; 3];
        for (l, (rgb_l, th_l)) in rgb.levels().into_iter().zip(th.levels()).enumerate() {
            let mut items = Vec::with_capacity(batch);
            for (b, decision) in decisions.iter().enumerate() {
                let rgb_b = batch_item(tape, rgb_l, b, batch)?;
                let th_b = batch_item(tape, th_l, b, batch)?;
                let lambda_b = tape.slice(lambda, 0, b, 1)?;
                let s = tape.shape(rgb_b).to_vec();
                let dec = decision.for_extent(s[2], s[3])?;
                let r = dec.crop;

                let crop = crop_fused(tape, rgb_b, &dec, lambda_b)?;
                let th_fit = tape.bilinear_resize(th_b, r.h, r.w)?;
                let rgb_proj = self.shared_proj[l].forward(tape, ps, crop)?;
                let th_proj = self.shared_proj[l].forward(tape, ps, th_fit)?;
                let dst = map_to_rows(tape, rgb_proj)?;
                let src = map_to_rows(tape, th_proj)?;
                let base = map_to_rows(tape, crop)?;

                let config = GraphConfig::new(self.tau, self.k, self.attn[l].d_embed)?;
                let att = self.attn[l].attend(tape, ps, &config, src, dst, src, base, routing)?;
                stats[l].edges += att.graph.len();
                stats[l].n_src += att.graph.n_src;
                stats[l].n_dst += att.graph.n_dst;
                let patch = rows_to_map(tape, att.out, r.h, r.w)?;
                items.push(tape.paste(rgb_b, patch, r.top, r.left)?);
            }
            fused[l] = if items.len() == 1 {
                items[0]
            } else {
                tape.concat(&items, 0)?
            };
        }
        Ok(FusedFrame {
            fused: FeaturePyramid::from_levels(fused),
            decisions,
            lambda,
            stats,
        })
    }
}

pub(crate) fn batch_item<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    b: usize,
    batch: usize,
) -> Result<Var> {
    if batch == 1 {
        Ok(x)
    } else {
        tape.slice(x, 0, b, 1)
    }
}
