//! Dual-branch decoupled head and anchor-free box decoding.

use crate::detect::loss::DFL_BINS;
use crate::detect::{BBox, Detection};
use crate::error::{invalid, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::tensor::{sigmoid, Real, Tape, Tensor, Var};

/// Per-side bin probabilities, in left, top, right, bottom order.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionPrediction {
    pub probs: [[f64; DFL_BINS]; 4],
}

impl DistributionPrediction {
    /// Softmax over each group of 16 logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != 4 * DFL_BINS {
            return Err(invalid(
                "DistributionPrediction",
                format!("expected {} logits, got {}", 4 * DFL_BINS, logits.len()),
            ));
        }
        let mut probs = [[0.0; DFL_BINS]; 4];
        for (side, row) in probs.iter_mut().enumerate() {
            let l = &logits[side * DFL_BINS..(side + 1) * DFL_BINS];
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
            for (p, x) in row.iter_mut().zip(l) {
                *p = (x - m).exp() / z;
            }
        }
        Ok(Self { probs })
    }

    /// Expected bin index per side, in stride units.
    pub fn side_distances(&self) -> [f64; 4] {
        self.probs
            .map(|row| row.iter().enumerate().map(|(i, p)| i as f64 * p).sum())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    /// `[B, 4·16, H, W]`
    pub box_logits: Var,
    /// `[B, ncls, H, W]`
    pub cls_logits: Var,
    pub stride: usize,
}

#[derive(Clone, Debug)]
struct Branch {
    c1: Conv2d,
    c2: Conv2d,
    out: Conv2d,
}

impl Branch {
    fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        width: usize,
        cout: usize,
    ) -> Self {
        Self {
            c1: Conv2d::new(ps, init, &format!("{name}.c1"), cin, width, 3, 1),
            c2: Conv2d::new(ps, init, &format!("{name}.c2"), width, width, 3, 1),
            out: Conv2d::new(ps, init, &format!("{name}.out"), width, cout, 1, 1),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.c1.forward(tape, ps, x)?;
        let y = tape.relu(y);
        let y = self.c2.forward(tape, ps, y)?;
        let y = tape.relu(y);
        self.out.forward(tape, ps, y)
    }
}

/// One box branch and one class branch per pyramid level; no parameters are
/// shared between branches or levels.
#[derive(Clone, Debug)]
pub struct DecoupledHead {
    boxes: Vec<Branch>,
    classes: Vec<Branch>,
    strides: Vec<usize>,
    num_classes: usize,
}

impl DecoupledHead {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        level_channels: &[usize],
        strides: &[usize],
        width: usize,
        num_classes: usize,
    ) -> Self {
        assert_eq!(level_channels.len(), strides.len());
        let boxes = level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Branch::new(ps, init, &format!("head.box{i}"), c, width, 4 * DFL_BINS))
            .collect();
        let classes = level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Branch::new(ps, init, &format!("head.cls{i}"), c, width, num_classes))
            .collect();
        Self {
            boxes,
            classes,
            strides: strides.to_vec(),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Sets every class-branch output bias to `logit`, a background prior.
    pub fn set_class_prior<T: Real>(&self, ps: &mut ParamStore<T>, logit: f64) {
        for b in &self.classes {
            ps.get_mut(b.out.bias).fill(T::of(logit));
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        levels: &[Var],
    ) -> Result<Vec<LevelOutput>> {
        if levels.len() != self.strides.len() {
            return Err(invalid(
                "head_forward",
                format!("{} levels for {} strides", levels.len(), self.strides.len()),
            ));
        }
        levels
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                Ok(LevelOutput {
                    box_logits: self.boxes[i].forward(tape, ps, x)?,
                    cls_logits: self.classes[i].forward(tape, ps, x)?,
                    stride: self.strides[i],
                })
            })
            .collect()
    }
}

/// Decodes one image of one level into detections (before NMS).
///
/// `box_logits: [64, H, W]`, `cls_logits: [ncls, H, W]` for batch item 0 of
/// the level tensors; boxes are clamped into `[0, img_w] × [0, img_h]` with
/// extents of at least one pixel.
pub fn decode_level<T: Real>(
    box_logits: &Tensor<T>,
    cls_logits: &Tensor<T>,
    stride: usize,
    img_h: usize,
    img_w: usize,
    batch_item: usize,
) -> Result<Vec<Detection>> {
    let (bs, cs) = (box_logits.shape(), cls_logits.shape());
    if bs.len() != 4
        || cs.len() != 4
        || bs[1] != 4 * DFL_BINS
        || bs[2..] != cs[2..]
        || bs[0] != cs[0]
        || batch_item >= bs[0]
    {
        return Err(invalid("decode_level", format!("box {bs:?} vs cls {cs:?}")));
    }
    let (h, w, ncls) = (bs[2], bs[3], cs[1]);
    let hw = h * w;
    let bd =
        &box_logits.data()[batch_item * 4 * DFL_BINS * hw..(batch_item + 1) * 4 * DFL_BINS * hw];
    let cd = &cls_logits.data()[batch_item * ncls * hw..(batch_item + 1) * ncls * hw];
    let s = stride as f64;
    let mut out = Vec::with_capacity(hw);
    let mut logits = vec![0.0; 4 * DFL_BINS];
    for cell in 0..hw {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = bd[k * hw + cell].to_f64_lossy();
        }
        let [l, t, r, b] = DistributionPrediction::from_logits(&logits)?.side_distances();
        let (ax, ay) = (((cell % w) as f64 + 0.5) * s, ((cell / w) as f64 + 0.5) * s);
        let bbox = clamp_box(
            ax - l * s,
            ay - t * s,
            ax + r * s,
            ay + b * s,
            img_w as f64,
            img_h as f64,
        );
        let probs = (0..ncls)
            .map(|c| sigmoid(cd[c * hw + cell]).to_f64_lossy())
            .collect();
        out.push(Detection::from_probs(bbox, probs));
    }
    Ok(out)
}

fn clamp_box(x1: f64, y1: f64, x2: f64, y2: f64, img_w: f64, img_h: f64) -> BBox {
    let side = |a: f64, b: f64, limit: f64| {
        let (a, b) = (a.clamp(0.0, limit), b.clamp(0.0, limit));
        if b - a >= 1.0 {
            (a, b)
        } else {
            let c = ((a + b) / 2.0).clamp(0.5, limit - 0.5);
            (c - 0.5, c + 0.5)
        }
    };
    let (x1, x2) = side(x1, x2, img_w);
    let (y1, y2) = side(y1, y2, img_h);
    BBox::from_corners(x1, y1, x2, y2)
}
