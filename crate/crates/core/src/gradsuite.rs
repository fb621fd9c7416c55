//! The full finite-difference suite: every differentiable tape op and every
//! composite module, checked at 64-bit.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::apl::{crop_fused, AdaptivePartition, PartitionDecision};
use crate::detect::{
    assign_targets, ciou_row, detection_loss, dfl_target_weights, BBox, LevelGeometry, LevelOutput,
    LossWeights,
};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::Result;
use crate::gradcheck::{
    check_inputs, check_params, project_to_scalar, random_tensor, CheckOptions, CheckOutcome,
};
use crate::hstm::{HybridTemporal, TemporalGraph, TemporalStarBlock};
use crate::model::{FrameVars, ModelConfig, MsgNet};
use crate::nn::{Init, ParamStore};
use crate::routing::ReplayCell;
use crate::sparsegraph::GraphConfig;
use crate::ssglm::SpatialFusion;
use crate::synth::{make_dataset, Split, SynthConfig};
use crate::tensor::{BackwardFault, EdgeIndex, Tape, Tensor, Var};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composite modules.
pub const MODULE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Op,
    Module,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: EntryKind,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub precision: &'static str,
    pub entries: Vec<SuiteEntry>,
    pub all_pass: bool,
}

struct Runner {
    seed: u64,
    fault: Option<BackwardFault>,
    entries: Vec<SuiteEntry>,
}

impl Runner {
    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
    }

    fn opts(&self, max_entries: usize) -> CheckOptions {
        CheckOptions {
            max_entries,
            fault: self.fault,
            ..CheckOptions::default()
        }
    }

    fn push(&mut self, kind: EntryKind, out: CheckOutcome) {
        let tolerance = match kind {
            EntryKind::Op => OP_TOLERANCE,
            EntryKind::Module => MODULE_TOLERANCE,
        };
        self.entries.push(SuiteEntry {
            pass: out.passes(tolerance),
            name: out.name,
            kind,
            checked: out.checked,
            max_abs_err: out.max_abs_err,
            max_rel_err: out.max_rel_err,
            tolerance,
        });
    }

    /// Checks `f` applied to `inputs`, reduced by a fixed random projection.
    fn op<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let salt = self.entries.len() as u64;
        let out = check_inputs(name, inputs, self.opts(usize::MAX), |tape, v| {
            let y = f(tape, v)?;
            project_to_scalar(tape, y, salt)
        })?;
        self.push(EntryKind::Op, out);
        Ok(())
    }
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random_tensor(shape, rng, 1.0).map(|v| v.abs() + 0.5)
}

fn sum_levels(tape: &mut Tape<f64>, levels: &[Var], seed: u64) -> Result<Var> {
    let mut acc = project_to_scalar(tape, levels[0], seed)?;
    for (l, &v) in levels.iter().enumerate().skip(1) {
        let s = project_to_scalar(tape, v, seed + l as u64)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

fn ops(r: &mut Runner) -> Result<()> {
    let mut rng = r.rng(1);
    let a = random_tensor(&[3, 4], &mut rng, 1.0);
    let b = random_tensor(&[3, 4], &mut rng, 1.0);
    let row = random_tensor(&[4], &mut rng, 1.0);
    r.op("add", &[a.clone(), row.clone()], |t, v| t.add(v[0], v[1]))?;
    r.op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
    r.op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?;
    r.op("div", &[a.clone(), positive(&[3, 4], &mut rng)], |t, v| {
        t.div(v[0], v[1])
    })?;
    r.op("scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -1.7)))?;
    // Keep relu inputs away from the kink.
    let off_kink = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    r.op("relu", &[off_kink], |t, v| Ok(t.relu(v[0])))?;
    r.op("sigmoid", &[a.map(|v| 3.0 * v)], |t, v| Ok(t.sigmoid(v[0])))?;
    r.op("softplus", &[a.map(|v| 3.0 * v)], |t, v| {
        Ok(t.softplus(v[0]))
    })?;
    r.op(
        "matmul",
        &[a.clone(), random_tensor(&[4, 5], &mut rng, 1.0)],
        |t, v| t.matmul(v[0], v[1]),
    )?;

    let x = random_tensor(&[2, 3, 5, 5], &mut rng, 1.0);
    let w = random_tensor(&[4, 3, 3, 3], &mut rng, 0.5);
    let bias = random_tensor(&[4], &mut rng, 0.5);
    r.op("conv2d", &[x.clone(), w.clone(), bias.clone()], |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    })?;
    r.op("conv2d_stride2", &[x.clone(), w, bias], |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    })?;

    r.op(
        "softmax",
        &[random_tensor(&[2, 5, 3], &mut rng, 2.0)],
        |t, v| t.softmax(v[0], 1),
    )?;
    r.op(
        "log_softmax",
        &[random_tensor(&[3, 6], &mut rng, 2.0)],
        |t, v| Ok(t.log_softmax(v[0])),
    )?;
    r.op("bilinear_resize_up", &[x.clone()], |t, v| {
        t.bilinear_resize(v[0], 7, 9)
    })?;
    r.op("bilinear_resize_down", &[x.clone()], |t, v| {
        t.bilinear_resize(v[0], 2, 3)
    })?;
    r.op("crop", &[x.clone()], |t, v| t.crop(v[0], 1, 2, 3, 2))?;
    let patch = random_tensor(&[2, 3, 2, 3], &mut rng, 1.0);
    r.op("paste", &[x.clone(), patch], |t, v| {
        t.paste(v[0], v[1], 2, 1)
    })?;
    r.op("sum", &[a.clone()], |t, v| Ok(t.sum(v[0])))?;
    r.op("mean", &[a.clone()], |t, v| Ok(t.mean(v[0])))?;
    r.op("global_avg_pool", &[x.clone()], |t, v| {
        t.global_avg_pool(v[0])
    })?;
    r.op("reshape", &[x.clone()], |t, v| t.reshape(v[0], &[6, 25]))?;
    r.op("permute", &[x.clone()], |t, v| {
        t.permute(v[0], &[0, 2, 3, 1])
    })?;
    r.op(
        "concat",
        &[a.clone(), random_tensor(&[3, 2], &mut rng, 1.0)],
        |t, v| t.concat(&[v[0], v[1]], 1),
    )?;
    r.op("slice", &[x.clone()], |t, v| t.slice(v[0], 1, 1, 2))?;
    r.op("gather_rows", &[a.clone()], |t, v| {
        t.gather_rows(v[0], &[2, 0, 2])
    })?;

    let edges = Arc::new(EdgeIndex::from_sorted_pairs(
        5,
        4,
        [(0, 1), (0, 3), (1, 0), (1, 1), (1, 4), (3, 2)],
    )?);
    let q = random_tensor(&[4, 3], &mut rng, 1.0);
    let k = random_tensor(&[5, 3], &mut rng, 1.0);
    let e = edges.clone();
    r.op("edge_dot", &[q, k], move |t, v| {
        t.edge_dot(v[0], v[1], &e, 0.6)
    })?;
    let e = edges.clone();
    r.op(
        "segment_softmax",
        &[random_tensor(&[6], &mut rng, 2.0)],
        move |t, v| t.segment_softmax(v[0], &e),
    )?;
    let e = edges;
    let vals = random_tensor(&[5, 2], &mut rng, 1.0);
    r.op(
        "spmm",
        &[random_tensor(&[6], &mut rng, 1.0), vals],
        move |t, v| t.spmm(v[0], v[1], &e),
    )?;

    let labels = [1.0, 0.0, 0.3, 0.0, 1.0, 0.7];
    r.op(
        "bce_logits",
        &[random_tensor(&[2, 3], &mut rng, 3.0)],
        move |t, v| t.bce_with_logits(v[0], &labels),
    )?;
    let dist = positive(&[2, 4], &mut rng).map(|v| 6.0 * v);
    let aux = [
        20.0, 21.0, 14.0, 12.0, 27.0, 30.0, 40.0, 38.0, 30.0, 35.0, 47.0, 44.0,
    ];
    r.op("row_fn", &[dist], move |t, v| {
        t.row_fn(v[0], &aux, ciou_row)
    })?;
    Ok(())
}

fn losses(r: &mut Runner) -> Result<()> {
    let mut rng = r.rng(2);
    // CIoU over predicted side distances for boxes of assorted overlap.
    let dist = positive(&[3, 4], &mut rng).map(|v| 8.0 * v);
    let aux = [
        16.0, 16.0, 10.0, 9.0, 24.0, 20.0, //
        30.0, 12.0, 31.0, 2.0, 45.0, 26.0, //
        8.0, 40.0, 20.0, 30.0, 30.0, 52.0,
    ];
    let out = check_inputs("ciou_loss", &[dist], r.opts(usize::MAX), |t, v| {
        let l = t.row_fn(v[0], &aux, ciou_row)?;
        Ok(t.mean(l))
    })?;
    r.push(EntryKind::Module, out);

    let targets = [3.0, 7.25, 0.5, 14.9];
    let mut weights = Vec::new();
    for y in targets {
        weights.extend(dfl_target_weights(y)?);
    }
    let wt = Tensor::from_f64(&[4, 16], &weights)?;
    let out = check_inputs(
        "dfl_loss",
        &[random_tensor(&[4, 16], &mut rng, 2.0)],
        r.opts(usize::MAX),
        |t, v| {
            let lp = t.log_softmax(v[0]);
            let w = t.constant(wt.clone());
            let p = t.mul(lp, w)?;
            let s = t.sum(p);
            Ok(t.scale(s, -0.25))
        },
    )?;
    r.push(EntryKind::Module, out);

    let labels = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let out = check_inputs(
        "bce_loss",
        &[random_tensor(&[8], &mut rng, 3.0)],
        r.opts(usize::MAX),
        |t, v| t.bce_with_logits(v[0], &labels),
    )?;
    r.push(EntryKind::Module, out);

    let level = LevelGeometry {
        stride: 8,
        height: 4,
        width: 4,
    };
    let gts = [
        BBox::new(13.0, 11.0, 14.0, 9.0),
        BBox::new(22.5, 24.0, 11.0, 13.0),
    ];
    let assigned = assign_targets(&gts, &[0, 1], &[level]);
    let bl = random_tensor(&[1, 64, 4, 4], &mut rng, 1.0);
    let cl = random_tensor(&[1, 2, 4, 4], &mut rng, 1.0);
    let out = check_inputs("detection_loss", &[bl, cl], r.opts(usize::MAX), |t, v| {
        let out = LevelOutput {
            box_logits: v[0],
            cls_logits: v[1],
            stride: 8,
        };
        Ok(detection_loss(t, &[out], &assigned, 2, LossWeights::default())?.total)
    })?;
    r.push(EntryKind::Module, out);
    Ok(())
}

const CH: [usize; 3] = [4, 6, 8];
const EXTENT: [usize; 3] = [8, 4, 2];

fn pyramid(rng: &mut ChaCha8Rng, shrink: usize) -> [Tensor<f64>; 3] {
    [0, 1, 2].map(|l| {
        let e = (EXTENT[l] / shrink).max(1);
        random_tensor(&[1, CH[l], e, e], rng, 1.0)
    })
}

fn constants(tape: &mut Tape<f64>, p: &[Tensor<f64>; 3]) -> FeaturePyramid {
    FeaturePyramid::from_levels(p.clone().map(|t| tape.constant(t)))
}

fn modules(r: &mut Runner) -> Result<()> {
    let mut rng = r.rng(3);
    let mut ps = ParamStore::new();

    // APL head: λ prediction and the straight-through crop factor.
    let apl = AdaptivePartition::new(&mut ps, &mut Init { rng: &mut rng }, 4, 8);
    let (rgb, th) = (
        random_tensor(&[1, 4, 8, 8], &mut rng, 1.0),
        random_tensor(&[1, 4, 8, 8], &mut rng, 1.0),
    );
    let ids: Vec<_> = ps.ids().collect();
    let cell = ReplayCell::new();
    let out = check_params("apl_head", &ps, &ids, r.opts(16), |t, ps| {
        cell.run(|routing| {
            let (rv, tv) = (t.constant(rgb.clone()), t.constant(th.clone()));
            let lambda = apl.predict_lambda(t, ps, rv, tv)?;
            let value = t.value(lambda).data()[0];
            let decision = routing.decision(|| PartitionDecision::new(value, 8, 8))?;
            let cropped = crop_fused(t, rv, &decision, lambda)?;
            project_to_scalar(t, cropped, 31)
        })
    })?;
    r.push(EntryKind::Module, out);

    // Spatial sparse graph fusion.
    let mut ps = ParamStore::new();
    let fusion = SpatialFusion::new(&mut ps, &mut Init { rng: &mut rng }, CH, 0.25, 6);
    let (rgb, th) = (pyramid(&mut rng, 1), pyramid(&mut rng, 2));
    let ids: Vec<_> = ps.ids().collect();
    let cell = ReplayCell::new();
    let out = check_params("s_sglm", &ps, &ids, r.opts(5), |t, ps| {
        cell.run(|routing| {
            let (rv, tv) = (constants(t, &rgb), constants(t, &th));
            let fused = fusion.fuse_modalities(t, ps, &rv, &tv, routing)?;
            sum_levels(t, &fused.fused.levels(), 40)
        })
    })?;
    r.push(EntryKind::Module, out);

    // Temporal sparse graph.
    let mut ps = ParamStore::new();
    let graph = TemporalGraph::new(&mut ps, &mut Init { rng: &mut rng }, "t", 5);
    let (prev, curr) = (
        random_tensor(&[1, 5, 4, 4], &mut rng, 1.0),
        random_tensor(&[1, 5, 4, 4], &mut rng, 1.0),
    );
    let cfg = GraphConfig::new(0.25, 6, 5)?;
    let ids: Vec<_> = ps.ids().collect();
    let cell = ReplayCell::new();
    let out = check_params("t_sglm", &ps, &ids, r.opts(usize::MAX), |t, ps| {
        cell.run(|routing| {
            let (p, c) = (t.constant(prev.clone()), t.constant(curr.clone()));
            let (y, _) = graph.forward(t, ps, &cfg, p, c, routing)?;
            project_to_scalar(t, y, 50)
        })
    })?;
    r.push(EntryKind::Module, out);

    // Temporal star block.
    let mut ps = ParamStore::new();
    let star = TemporalStarBlock::new(&mut ps, &mut Init { rng: &mut rng }, "tsb", 3);
    let (prev, curr) = (
        random_tensor(&[1, 3, 4, 4], &mut rng, 1.0),
        random_tensor(&[1, 3, 4, 4], &mut rng, 1.0),
    );
    let ids: Vec<_> = ps.ids().collect();
    let out = check_params("tsb", &ps, &ids, r.opts(usize::MAX), |t, ps| {
        let (p, c) = (t.constant(prev.clone()), t.constant(curr.clone()));
        let y = star.forward(t, ps, p, c)?;
        project_to_scalar(t, y, 60)
    })?;
    r.push(EntryKind::Module, out);

    // Hybrid temporal module over a pyramid.
    let mut ps = ParamStore::new();
    let hybrid = HybridTemporal::new(&mut ps, &mut Init { rng: &mut rng }, CH, 0.25, 6);
    let (prev, curr) = (pyramid(&mut rng, 2), pyramid(&mut rng, 2));
    let ids: Vec<_> = ps.ids().collect();
    let cell = ReplayCell::new();
    let out = check_params("hstm", &ps, &ids, r.opts(6), |t, ps| {
        cell.run(|routing| {
            let (p, c) = (constants(t, &prev), constants(t, &curr));
            let (ys, _) = hybrid.forward(t, ps, &p, &c, routing)?;
            sum_levels(t, &ys, 70)
        })
    })?;
    r.push(EntryKind::Module, out);

    // Shared encoder.
    let mut ps = ParamStore::new();
    let encoder = Encoder::new(&mut ps, &mut Init { rng: &mut rng }, 4);
    let image = random_tensor(&[1, 3, 32, 32], &mut rng, 1.0);
    let ids: Vec<_> = ps.ids().collect();
    let out = check_params("encoder", &ps, &ids, r.opts(8), |t, ps| {
        let x = t.constant(image.clone());
        let pyr = encoder.encode(t, ps, x)?;
        sum_levels(t, &pyr.levels(), 80)
    })?;
    r.push(EntryKind::Module, out);

    // The whole detector and its training loss on one synthetic sample.
    let mut ps = ParamStore::new();
    let config = ModelConfig {
        base_channels: 4,
        head_width: 4,
        ..ModelConfig::default()
    };
    let model = MsgNet::new(&mut ps, config, r.seed);
    let sample = make_dataset(1, r.seed, Split::Train, &SynthConfig::default())?.remove(0);
    let ids: Vec<_> = ps.ids().collect();
    let cell = ReplayCell::new();
    let out = check_params("msgnet", &ps, &ids, r.opts(2), |t, ps| {
        cell.run(|routing| {
            let frames = FrameVars::from_sample(t, &sample)?;
            let out = model.forward(t, ps, frames, routing)?;
            Ok(model.loss(t, &out, &sample, LossWeights::default(), 1.0)?.0)
        })
    })?;
    r.push(EntryKind::Module, out);
    Ok(())
}

/// Runs the whole suite. `fault` corrupts one op's backward rule on every
/// analytic tape, which must make the suite fail.
pub fn run_suite(seed: u64, fault: Option<BackwardFault>) -> Result<SuiteReport> {
    let mut r = Runner {
        seed,
        fault,
        entries: Vec::new(),
    };
    ops(&mut r)?;
    losses(&mut r)?;
    modules(&mut r)?;
    let all_pass = r.entries.iter().all(|e| e.pass);
    Ok(SuiteReport {
        seed,
        precision: "f64",
        entries: r.entries,
        all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_fault_is_caught() {
        let report = run_suite(0, None).unwrap();
        for e in &report.entries {
            assert!(e.pass, "{e:?}");
        }
        assert!(report.all_pass);
        let names: Vec<_> = report.entries.iter().map(|e| e.name.as_str()).collect();
        for required in [
            "apl_head",
            "s_sglm",
            "t_sglm",
            "tsb",
            "ciou_loss",
            "dfl_loss",
            "bce_loss",
            "spmm",
        ] {
            assert!(names.contains(&required), "{required} missing");
        }

        let fault = BackwardFault {
            op: "mul",
            factor: 1.5,
        };
        let bad = run_suite(0, Some(fault)).unwrap();
        assert!(!bad.all_pass);
        assert!(!bad.entries.iter().find(|e| e.name == "mul").unwrap().pass);
    }
}
