//! The complete detector: shared encoder over four frames, cross-modal fusion
//! at t−1 and t, temporal modeling, and the decoupled head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apl::PartitionDecision;
use crate::detect::{
    assign_targets, decode_level, detection_loss, nms, CellTarget, DecoupledHead, Detection,
    LevelGeometry, LevelOutput, LossWeights, NMS_CONF_THRESHOLD, NMS_IOU_THRESHOLD,
};
use crate::encoder::{Encoder, STRIDES};
use crate::error::{invalid, Result};
use crate::hstm::HybridTemporal;
use crate::nn::{Init, ParamStore};
use crate::routing::Routing;
use crate::sparsegraph::{DEFAULT_TAU, SPATIAL_K, TEMPORAL_K};
use crate::ssglm::{GraphStats, SpatialFusion};
use crate::synth::SamplePair;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub head_width: usize,
    pub num_classes: usize,
    pub tau: f64,
    pub k_spatial: usize,
    pub k_temporal: usize,
    /// Initial class-logit bias (a low foreground prior).
    pub class_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            head_width: 32,
            num_classes: 3,
            tau: DEFAULT_TAU,
            k_spatial: SPATIAL_K,
            k_temporal: TEMPORAL_K,
            class_prior: -4.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MsgNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: SpatialFusion,
    pub temporal: HybridTemporal,
    pub head: DecoupledHead,
}

/// The four input frames of one sample, each `[1, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub rgb_prev: Var,
    pub rgb_curr: Var,
    pub th_prev: Var,
    pub th_curr: Var,
}

impl FrameVars {
    pub fn from_sample<T: Real>(tape: &mut Tape<T>, s: &SamplePair) -> Result<Self> {
        let mut put = |t: &Tensor<f32>| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            let v: Tensor<T> = t.cast();
            Ok::<_, crate::Error>(tape.constant(v.reshape(&shape)?))
        };
        Ok(Self {
            rgb_prev: put(&s.rgb_prev)?,
            rgb_curr: put(&s.rgb_curr)?,
            th_prev: put(&s.th_prev)?,
            th_curr: put(&s.th_curr)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub levels: Vec<LevelOutput>,
    /// `[1]` scale estimates at t−1 and t.
    pub lambda_prev: Var,
    pub lambda_curr: Var,
    pub decision_prev: PartitionDecision,
    pub decision_curr: PartitionDecision,
    pub spatial_stats: [[GraphStats; 3]; 2],
    pub temporal_stats: [GraphStats; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub ciou: f64,
    pub dfl: f64,
    pub cls: f64,
    pub apl: f64,
    pub total: f64,
}

impl MsgNet {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let encoder = Encoder::new(ps, &mut init, config.base_channels);
        let ch = encoder.level_channels();
        let fusion = SpatialFusion::new(ps, &mut init, ch, config.tau, config.k_spatial);
        let temporal = HybridTemporal::new(ps, &mut init, ch, config.tau, config.k_temporal);
        let head = DecoupledHead::new(
            ps,
            &mut init,
            &ch,
            &STRIDES,
            config.head_width,
            config.num_classes,
        );
        head.set_class_prior(ps, config.class_prior);
        Self {
            config,
            encoder,
            fusion,
            temporal,
            head,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        frames: FrameVars,
        routing: &mut Routing,
    ) -> Result<ModelOutput> {
        let rgb_prev = self.encoder.encode(tape, ps, frames.rgb_prev)?;
        let rgb_curr = self.encoder.encode(tape, ps, frames.rgb_curr)?;
        let th_prev = self.encoder.encode(tape, ps, frames.th_prev)?;
        let th_curr = self.encoder.encode(tape, ps, frames.th_curr)?;
        let prev = self
            .fusion
            .fuse_modalities(tape, ps, &rgb_prev, &th_prev, routing)?;
        let curr = self
            .fusion
            .fuse_modalities(tape, ps, &rgb_curr, &th_curr, routing)?;
        let (mixed, temporal_stats) =
            self.temporal
                .forward(tape, ps, &prev.fused, &curr.fused, routing)?;
        let levels = self.head.forward(tape, ps, &mixed)?;
        Ok(ModelOutput {
            levels,
            lambda_prev: prev.lambda,
            lambda_curr: curr.lambda,
            decision_prev: prev.decisions[0].clone(),
            decision_curr: curr.decisions[0].clone(),
            spatial_stats: [prev.stats, curr.stats],
            temporal_stats,
        })
    }

    pub fn level_geometry(&self, img_h: usize, img_w: usize) -> Vec<LevelGeometry> {
        STRIDES
            .iter()
            .map(|&s| LevelGeometry {
                stride: s,
                height: img_h / s,
                width: img_w / s,
            })
            .collect()
    }

    pub fn targets(&self, sample: &SamplePair) -> Vec<Vec<Option<CellTarget>>> {
        let s = sample.rgb_curr.shape();
        let boxes: Vec<_> = sample.annotations.iter().map(|a| a.bbox).collect();
        let classes: Vec<_> = sample.annotations.iter().map(|a| a.class_id).collect();
        assign_targets(&boxes, &classes, &self.level_geometry(s[1], s[2]))
    }

    /// Detection loss plus `apl_weight` times the mean squared distance of
    /// both λ estimates from the center of the true scale's bin interval.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        out: &ModelOutput,
        sample: &SamplePair,
        weights: LossWeights,
        apl_weight: f64,
    ) -> Result<(Var, LossValues)> {
        let det = detection_loss(
            tape,
            &out.levels,
            &self.targets(sample),
            self.config.num_classes,
            weights,
        )?;
        let mut values = LossValues {
            ciou: det.ciou,
            dfl: det.dfl,
            cls: det.cls,
            ..LossValues::default()
        };
        let mut total = det.total;
        if apl_weight > 0.0 {
            let target = tape
                .constant(Tensor::scalar(T::of(scale_target(sample.true_scale))).reshape(&[1])?);
            let both = tape.concat(&[out.lambda_prev, out.lambda_curr], 0)?;
            let diff = tape.sub(both, target)?;
            let sq = tape.mul(diff, diff)?;
            let apl = tape.mean(sq);
            values.apl = tape.value(apl).data()[0].to_f64_lossy();
            let apl = tape.scale(apl, T::of(apl_weight));
            total = tape.add(total, apl)?;
        }
        values.total = tape.value(total).data()[0].to_f64_lossy();
        if !values.total.is_finite() {
            return Err(invalid("loss", format!("non-finite loss {values:?}")));
        }
        Ok((total, values))
    }

    /// Decoded detections of batch item 0 after NMS.
    pub fn detect<T: Real>(
        &self,
        tape: &Tape<T>,
        out: &ModelOutput,
        img_h: usize,
        img_w: usize,
    ) -> Result<Vec<Detection>> {
        let mut all = Vec::new();
        for l in &out.levels {
            all.extend(decode_level(
                tape.value(l.box_logits),
                tape.value(l.cls_logits),
                l.stride,
                img_h,
                img_w,
                0,
            )?);
        }
        Ok(nms(&all, NMS_IOU_THRESHOLD, NMS_CONF_THRESHOLD))
    }
}

/// Regression target for λ given the true scale `s`: the midpoint of the
/// interval `(s − 0.2, s]` that the bin rule maps to `s`.
pub fn scale_target(s: f64) -> f64 {
    s - 0.1
}
