//! Toy training loop, evaluation report and checkpoints.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::apl::{gamma_bin_index, GAMMA_BINS};
use crate::config::RunConfig;
use crate::detect::{evaluate, ClassAp, Detection, GroundTruth};
use crate::error::{invalid, Error, Result};
use crate::model::{FrameVars, LossValues, MsgNet};
use crate::nn::ParamStore;
use crate::routing::Routing;
use crate::synth::{SamplePair, Symmetry};
use crate::tensor::{msgt, Real, Tape, Tensor};

/// SGD with momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(ps: &ParamStore<T>, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: ps
                .ids()
                .map(|id| vec![T::zero(); ps.get(id).numel()])
                .collect(),
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        for id in ps.ids().collect::<Vec<_>>() {
            let v = &mut self.velocity[id.index()];
            for ((p, v), &g) in ps
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(v.iter_mut())
                .zip(&grads[id.index()])
            {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Linear warm-up from `lr / warmup_steps` to `lr` over the first
/// `ceil(warmup_fraction · total_steps)` steps, then linear decay to
/// `lr · final_fraction` at the last step.
pub fn learning_rate(
    base: f64,
    step: usize,
    total_steps: usize,
    warmup_fraction: f64,
    final_fraction: f64,
) -> f64 {
    let warmup = ((warmup_fraction * total_steps as f64).ceil() as usize).max(1);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup + 1);
    if span == 0 {
        return base;
    }
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    base * (1.0 - t * (1.0 - final_fraction))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub ciou: f64,
    pub dfl: f64,
    pub cls: f64,
    pub apl: f64,
    pub total: f64,
    pub val_ap50: f64,
    pub val_gamma_accuracy: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,steps,box_loss,dfl_loss,cls_loss,apl_loss,total_loss,val_ap50,val_gamma_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.steps,
            self.ciou,
            self.dfl,
            self.cls,
            self.apl,
            self.total,
            self.val_ap50,
            self.val_gamma_accuracy
        )
    }
}

pub struct Trained<T> {
    pub model: MsgNet,
    pub params: ParamStore<T>,
    pub logs: Vec<EpochLog>,
    /// Training stopped early at the configured time limit.
    pub timed_out: bool,
}

fn limit<'a>(samples: &'a [SamplePair], n: usize) -> &'a [SamplePair] {
    if n == 0 || n >= samples.len() {
        samples
    } else {
        &samples[..n]
    }
}

/// Loss and gradients of one sample.
fn sample_grads<T: Real>(
    model: &MsgNet,
    ps: &ParamStore<T>,
    cfg: &RunConfig,
    s: &SamplePair,
) -> Result<(Vec<Vec<T>>, LossValues)> {
    let mut tape = Tape::new();
    let frames = FrameVars::from_sample(&mut tape, s)?;
    let out = model.forward(&mut tape, ps, frames, &mut Routing::record())?;
    let (loss, values) = model.loss(&mut tape, &out, s, cfg.loss_weights(), cfg.apl_weight)?;
    tape.backward(loss)?;
    Ok((ps.grads_from(&tape), values))
}

/// Trains a fresh model. `on_epoch` sees each epoch's log, the model and its
/// current parameters as each epoch completes.
pub fn train<T: Real>(
    cfg: &RunConfig,
    train: &[SamplePair],
    val: &[SamplePair],
    mut on_epoch: impl FnMut(&EpochLog, &MsgNet, &ParamStore<T>) -> Result<()>,
) -> Result<Trained<T>> {
    cfg.validate()?;
    let train = limit(train, cfg.train_limit);
    let val = limit(val, cfg.val_limit);
    if train.is_empty() {
        return Err(invalid("train", "no training samples"));
    }
    let mut ps = ParamStore::<T>::new();
    let model = MsgNet::new(&mut ps, cfg.model(), cfg.seed);
    let mut opt = Sgd::new(&ps, cfg.momentum);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let started = Instant::now();
    let mut step = 0;
    let mut logs = Vec::new();
    let mut timed_out = false;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<Vec<Vec<T>>> = None;
            for &i in batch {
                let augmented;
                let sample = if cfg.augment {
                    augmented = train[i].transformed(Symmetry::from_bits(rng.gen_range(0..8)));
                    &augmented
                } else {
                    &train[i]
                };
                let (g, v) = sample_grads(&model, &ps, cfg, sample).map_err(|e| match e {
                    // λ is a softplus output, so the γ mapping only rejects it once it is non-finite.
                    Error::InvalidArgument {
                        op: op @ ("loss" | "lambda_to_gamma"),
                        msg,
                    } => Error::Diverged {
                        step,
                        detail: format!("{op}: {msg}"),
                    },
                    other => other,
                })?;
                sums.ciou += v.ciou;
                sums.dfl += v.dfl;
                sums.cls += v.cls;
                sums.apl += v.apl;
                sums.total += v.total;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = T::of(1.0 / batch.len() as f64);
            let mut norm2 = 0.0;
            for g in grads.iter_mut().flatten() {
                *g *= inv;
                norm2 += g.to_f64_lossy().powi(2);
            }
            if !norm2.is_finite() {
                let bad: Vec<&str> = ps
                    .ids()
                    .filter(|id| grads[id.index()].iter().any(|g| !g.is_finite()))
                    .map(|id| ps.name(id))
                    .collect();
                let detail = match bad[..] {
                    [] => "gradient norm overflow".to_string(),
                    [one] => format!("non-finite gradient in {one}"),
                    [first, .., last] => format!(
                        "non-finite gradient in {} tensors, {first} to {last}",
                        bad.len()
                    ),
                };
                return Err(Error::Diverged { step, detail });
            }
            if cfg.grad_clip > 0.0 && norm2.sqrt() > cfg.grad_clip {
                let f = T::of(cfg.grad_clip / norm2.sqrt());
                grads.iter_mut().flatten().for_each(|g| *g *= f);
            }
            opt.step(
                &mut ps,
                &grads,
                learning_rate(
                    cfg.learning_rate,
                    step,
                    total_steps,
                    cfg.warmup_fraction,
                    cfg.final_lr_fraction,
                ),
            );
            if let Some(id) = ps
                .ids()
                .find(|&id| ps.get(id).data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite parameter {}", ps.name(id)),
                });
            }
            step += 1;
            if cfg.time_limit_secs > 0.0 && started.elapsed().as_secs_f64() >= cfg.time_limit_secs {
                timed_out = true;
                break;
            }
        }
        let n = train.len() as f64;
        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, &ps, val)?)
        };
        let log = EpochLog {
            epoch,
            steps: step,
            ciou: sums.ciou / n,
            dfl: sums.dfl / n,
            cls: sums.cls / n,
            apl: sums.apl / n,
            total: sums.total / n,
            val_ap50: report.as_ref().map_or(0.0, |r| r.ap50),
            val_gamma_accuracy: report.as_ref().map_or(0.0, |r| r.gamma_accuracy),
        };
        on_epoch(&log, &model, &ps)?;
        logs.push(log);
        if timed_out {
            break;
        }
    }
    Ok(Trained {
        model,
        params: ps,
        logs,
        timed_out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeCounts {
    /// Mean kept edges per spatial graph, per pyramid level.
    pub spatial: [f64; 3],
    /// Mean kept edges per temporal graph, per pyramid level.
    pub temporal: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub ap50: f64,
    pub ap: f64,
    pub per_class: Vec<ClassAp>,
    pub gamma_bins: Vec<f64>,
    /// `confusion[true_bin][predicted_bin]` over the current frames.
    pub gamma_confusion: Vec<Vec<usize>>,
    pub gamma_accuracy: f64,
    pub mean_edges: EdgeCounts,
}

pub struct Predictions {
    pub detections: Vec<Vec<Detection>>,
    pub report: EvalReport,
}

pub fn evaluate_model<T: Real>(
    model: &MsgNet,
    ps: &ParamStore<T>,
    samples: &[SamplePair],
) -> Result<EvalReport> {
    Ok(predict(model, ps, samples)?.report)
}

/// Runs the model over `samples` and scores the detections after NMS.
pub fn predict<T: Real>(
    model: &MsgNet,
    ps: &ParamStore<T>,
    samples: &[SamplePair],
) -> Result<Predictions> {
    let mut detections = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    let mut confusion = vec![vec![0usize; GAMMA_BINS.len()]; GAMMA_BINS.len()];
    let (mut spatial, mut temporal) = ([0.0; 3], [0.0; 3]);
    for s in samples {
        let mut tape = Tape::new();
        let frames = FrameVars::from_sample(&mut tape, s)?;
        let out = model.forward(&mut tape, ps, frames, &mut Routing::record())?;
        let shape = s.rgb_curr.shape();
        detections.push(model.detect(&tape, &out, shape[1], shape[2])?);
        truths.push(
            s.annotations
                .iter()
                .map(|a| GroundTruth {
                    bbox: a.bbox,
                    class_id: a.class_id,
                })
                .collect(),
        );
        let truth = gamma_bin_index(s.true_scale)
            .ok_or_else(|| invalid("evaluate", format!("scale {} is not a bin", s.true_scale)))?;
        let pred = gamma_bin_index(out.decision_curr.gamma).expect("decisions use bin values");
        confusion[truth][pred] += 1;
        for l in 0..3 {
            spatial[l] += (out.spatial_stats[0][l].edges + out.spatial_stats[1][l].edges) as f64;
            temporal[l] += out.temporal_stats[l].edges as f64;
        }
    }
    let n = samples.len().max(1) as f64;
    let ap = evaluate(&detections, &truths);
    let correct: usize = (0..GAMMA_BINS.len()).map(|i| confusion[i][i]).sum();
    let report = EvalReport {
        samples: samples.len(),
        ap50: ap.ap50,
        ap: ap.ap,
        per_class: ap.per_class,
        gamma_bins: GAMMA_BINS.to_vec(),
        gamma_confusion: confusion,
        gamma_accuracy: correct as f64 / n,
        mean_edges: EdgeCounts {
            spatial: spatial.map(|e| e / (2.0 * n)),
            temporal: temporal.map(|e| e / n),
        },
    };
    Ok(Predictions { detections, report })
}

pub const PARAMS_FILE: &str = "params.msgt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// Writes `params.msgt` (concatenated MSGT tensors), `manifest.txt`
/// (`name offset shape` per tensor) and `config.txt`.
pub fn save_checkpoint<T: Real>(dir: &Path, cfg: &RunConfig, ps: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(PARAMS_FILE))?);
    let mut manifest = String::new();
    let mut offset = 0;
    for id in ps.ids() {
        let t = ps.get(id);
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} {}\n", ps.name(id), offset, shape.join("x")));
        offset += msgt::write(&mut out, t)?;
    }
    out.flush()?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(RunConfig, MsgNet, ParamStore<T>)> {
    let cfg = RunConfig::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let mut ps = ParamStore::<T>::new();
    let model = MsgNet::new(&mut ps, cfg.model(), cfg.seed);
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(dir.join(PARAMS_FILE))?).read_to_end(&mut bytes)?;
    let bad = |msg: String| Error::Format {
        what: "manifest",
        msg,
    };
    let mut entries = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, offset, shape] = parts[..] else {
            return Err(bad(format!("expected `name offset shape`, got {line:?}")));
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| bad(format!("bad offset in {line:?}")))?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
            .collect::<Result<_>>()?;
        let mut slice = bytes
            .get(offset..)
            .ok_or_else(|| bad(format!("offset {offset} past end")))?;
        let t: Tensor<T> = msgt::read(&mut slice)?;
        if t.shape() != shape.as_slice() {
            return Err(bad(format!(
                "{name}: manifest shape {shape:?}, tensor {:?}",
                t.shape()
            )));
        }
        entries.push((name.to_string(), t));
    }
    ps.load(entries)?;
    Ok((cfg, model, ps))
}
