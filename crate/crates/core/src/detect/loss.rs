//! CIoU, distribution focal loss, BCE and their sum over assigned cells.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::detect::assign::CellTarget;
use crate::detect::head::LevelOutput;
use crate::detect::BBox;
use crate::error::{invalid, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DFL_BINS: usize = 16;

const ALPHA_EPS: f64 = 1e-7;
const ASPECT_EPS: f64 = 1e-9;
const AREA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CIoUTerms {
    pub iou: f64,
    pub rho2: f64,
    pub c2: f64,
    pub v: f64,
    pub alpha: f64,
}

impl CIoUTerms {
    pub fn loss(&self) -> f64 {
        1.0 - self.iou + self.rho2 / self.c2.max(AREA_EPS) + self.alpha * self.v
    }
}

/// Value with derivatives along the four side distances of a predicted box.
#[derive(Clone, Copy, Debug)]
struct Dual<T> {
    v: T,
    d: [T; 4],
}

impl<T: Real> Dual<T> {
    fn c(v: T) -> Self {
        Self {
            v,
            d: [T::zero(); 4],
        }
    }

    fn var(v: T, i: usize) -> Self {
        let mut d = [T::zero(); 4];
        d[i] = T::one();
        Self { v, d }
    }

    fn map(self, v: T, dv: T) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn atan(self) -> Self {
        self.map(self.v.atan(), T::one() / (T::one() + self.v * self.v))
    }

    fn max(self, o: Self) -> Self {
        if o.v > self.v {
            o
        } else {
            self
        }
    }

    fn min(self, o: Self) -> Self {
        if o.v < self.v {
            o
        } else {
            self
        }
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(-self.v, -T::one())
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [T::zero(); 4];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + o.d[i] * self.v;
        }
        Self { v: self.v * o.v, d }
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        let mut d = [T::zero(); 4];
        for (i, x) in d.iter_mut().enumerate() {
            *x = (self.d[i] - q * o.d[i]) / o.v;
        }
        Self { v: q, d }
    }
}

struct DualTerms<T> {
    iou: Dual<T>,
    rho2: Dual<T>,
    c2: Dual<T>,
    v: Dual<T>,
    alpha: Dual<T>,
}

/// Predicted corners `[x1,y1,x2,y2]` against ground-truth corners.
fn dual_terms<T: Real>(p: [Dual<T>; 4], g: [T; 4]) -> DualTerms<T> {
    let g = g.map(Dual::c);
    let c = |x: f64| Dual::c(T::of(x));
    let zero = c(0.0);
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let (gw, gh) = (g[2] - g[0], g[3] - g[1]);
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(zero);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(zero);
    let inter = iw * ih;
    let union = (pw * ph + gw * gh - inter).max(c(AREA_EPS));
    let iou = inter / union;
    let dx = (p[0] + p[2] - g[0] - g[2]) * c(0.5);
    let dy = (p[1] + p[3] - g[1] - g[3]) * c(0.5);
    let rho2 = dx * dx + dy * dy;
    let ew = p[2].max(g[2]) - p[0].min(g[0]);
    let eh = p[3].max(g[3]) - p[1].min(g[1]);
    let c2 = ew * ew + eh * eh;
    let da = (gw / (gh + c(ASPECT_EPS))).atan() - (pw / (ph + c(ASPECT_EPS))).atan();
    let v = c(4.0 / (PI * PI)) * da * da;
    let alpha = v / (c(1.0) - iou + v + c(ALPHA_EPS));
    DualTerms {
        iou,
        rho2,
        c2,
        v,
        alpha,
    }
}

fn dual_loss<T: Real>(t: &DualTerms<T>) -> Dual<T> {
    Dual::c(T::one()) - t.iou + t.rho2 / t.c2.max(Dual::c(T::of(AREA_EPS))) + t.alpha * t.v
}

pub fn ciou_terms(pred: &BBox, gt: &BBox) -> CIoUTerms {
    let t = dual_terms(pred.corners().map(Dual::c), gt.corners());
    CIoUTerms {
        iou: t.iou.v,
        rho2: t.rho2.v,
        c2: t.c2.v,
        v: t.v.v,
        alpha: t.alpha.v,
    }
}

pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    dual_loss(&dual_terms(pred.corners().map(Dual::c), gt.corners())).v
}

/// Row function for the tape: `x = [l, t, r, b]` pixel distances from the
/// anchor, `aux = [ax, ay, gx1, gy1, gx2, gy2]`.
pub(crate) fn ciou_row<T: Real>(x: &[T], aux: &[T]) -> (T, Vec<T>) {
    let (ax, ay) = (aux[0], aux[1]);
    let p = [
        Dual::c(ax) - Dual::var(x[0], 0),
        Dual::c(ay) - Dual::var(x[1], 1),
        Dual::c(ax) + Dual::var(x[2], 2),
        Dual::c(ay) + Dual::var(x[3], 3),
    ];
    let l = dual_loss(&dual_terms(p, [aux[2], aux[3], aux[4], aux[5]]));
    (l.v, l.d.to_vec())
}

/// Two-bin interpolation weights for target `y` in bin units.
pub fn dfl_target_weights(y: f64) -> Result<[f64; DFL_BINS]> {
    let top = (DFL_BINS - 1) as f64;
    if !(0.0..=top).contains(&y) {
        return Err(invalid(
            "dfl_loss",
            format!("target {y} outside [0, {top}]"),
        ));
    }
    let mut w = [0.0; DFL_BINS];
    let lo = y.floor() as usize;
    if lo == DFL_BINS - 1 {
        w[lo] = 1.0;
    } else {
        w[lo] = (lo + 1) as f64 - y;
        w[lo + 1] = y - lo as f64;
    }
    Ok(w)
}

/// Distribution focal loss of one side given its bin probabilities.
pub fn dfl_loss(probs: &[f64], y: f64) -> Result<f64> {
    if probs.len() != DFL_BINS {
        return Err(invalid(
            "dfl_loss",
            format!("expected {DFL_BINS} bins, got {}", probs.len()),
        ));
    }
    let w = dfl_target_weights(y)?;
    Ok(-w
        .iter()
        .zip(probs)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, p)| w * p.ln())
        .sum::<f64>())
}

/// Mean binary cross-entropy with logits, in the overflow-free form.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(invalid(
            "bce_loss",
            format!("{} logits vs {} labels", logits.len(), labels.len()),
        ));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&p, &y)| p.max(0.0) - p * y + (-p.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ciou: f64,
    pub dfl: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ciou: 1.0,
            dfl: 1.0,
            cls: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub ciou: f64,
    pub dfl: f64,
    pub cls: f64,
    pub positives: usize,
}

/// Weighted sum of CIoU and DFL (averaged over positive cells) and BCE
/// (averaged over every cell and class).
///
/// `targets[level][b * H * W + cell]` holds the assignment for batch item `b`.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[LevelOutput],
    targets: &[Vec<Option<CellTarget>>],
    num_classes: usize,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    if outputs.len() != targets.len() {
        return Err(invalid(
            "detection_loss",
            "one target grid per level required",
        ));
    }
    let bins = Tensor::from_fn(&[DFL_BINS, 1], |i| T::of(i as f64));
    let bins = tape.constant(bins);
    let mut ciou_rows = Vec::new();
    let mut dfl_sums = Vec::new();
    let mut cls_logits = Vec::new();
    let mut cls_labels = Vec::new();
    let mut positives = 0;

    for (out, tgt) in outputs.iter().zip(targets) {
        let [b, _, h, w] = <[usize; 4]>::try_from(tape.shape(out.box_logits))
            .map_err(|_| invalid("detection_loss", "rank-4 logits"))?;
        if tgt.len() != b * h * w {
            return Err(invalid(
                "detection_loss",
                format!("{} targets for a {b}x{h}x{w} grid", tgt.len()),
            ));
        }
        let cls = tape.permute(out.cls_logits, &[0, 2, 3, 1])?;
        let cls = tape.reshape(cls, &[b * h * w * num_classes])?;
        cls_logits.push(cls);
        for t in tgt {
            let mut row = vec![T::zero(); num_classes];
            if let Some(t) = t {
                row[t.class_id] = T::one();
            }
            cls_labels.extend(row);
        }

        let rows: Vec<usize> = (0..tgt.len()).filter(|&i| tgt[i].is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        positives += rows.len();
        let stride = out.stride as f64;
        let bx = tape.permute(out.box_logits, &[0, 2, 3, 1])?;
        let bx = tape.reshape(bx, &[b * h * w, 4 * DFL_BINS])?;
        let picked = tape.gather_rows(bx, &rows)?;
        let sides = tape.reshape(picked, &[rows.len() * 4, DFL_BINS])?;

        let mut aux = Vec::with_capacity(rows.len() * 6);
        let mut dfl_w = Vec::with_capacity(rows.len() * 4 * DFL_BINS);
        for &r in &rows {
            let t = tgt[r].as_ref().expect("positive");
            let cell = r % (h * w);
            let (ax, ay) = (
                ((cell % w) as f64 + 0.5) * stride,
                ((cell / w) as f64 + 0.5) * stride,
            );
            let g = t.bbox.corners();
            aux.extend([ax, ay, g[0], g[1], g[2], g[3]].map(T::of));
            let top = (DFL_BINS - 1) as f64;
            for d in [ax - g[0], ay - g[1], g[2] - ax, g[3] - ay] {
                dfl_w.extend(dfl_target_weights((d / stride).clamp(0.0, top))?.map(T::of));
            }
        }

        let probs = tape.softmax(sides, 1)?;
        let dist = tape.matmul(probs, bins)?;
        let dist = tape.scale(dist, T::of(stride));
        let dist = tape.reshape(dist, &[rows.len(), 4])?;
        ciou_rows.push(tape.row_fn(dist, &aux, ciou_row::<T>)?);

        let logp = tape.log_softmax(sides);
        let wt = tape.constant(Tensor::new(vec![rows.len() * 4, DFL_BINS], dfl_w)?);
        let prod = tape.mul(logp, wt)?;
        dfl_sums.push(tape.sum(prod));
    }

    let cls_all = tape.concat(&cls_logits, 0)?;
    let cls_loss = tape.bce_with_logits(cls_all, &cls_labels)?;
    let cls_value = tape.value(cls_loss).data()[0].to_f64_lossy();
    let mut total = tape.scale(cls_loss, T::of(weights.cls));
    let (mut ciou_value, mut dfl_value) = (0.0, 0.0);
    if positives > 0 {
        let rows = tape.concat(&ciou_rows, 0)?;
        let ciou = tape.mean(rows);
        ciou_value = tape.value(ciou).data()[0].to_f64_lossy();
        let mut dfl = dfl_sums[0];
        for &s in &dfl_sums[1..] {
            dfl = tape.add(dfl, s)?;
        }
        let dfl = tape.scale(dfl, T::of(-1.0 / (positives * 4) as f64));
        dfl_value = tape.value(dfl).data()[0].to_f64_lossy();
        let ciou = tape.scale(ciou, T::of(weights.ciou));
        let dfl = tape.scale(dfl, T::of(weights.dfl));
        total = tape.add(total, ciou)?;
        total = tape.add(total, dfl)?;
    }
    Ok(LossBreakdown {
        total,
        ciou: ciou_value,
        dfl: dfl_value,
        cls: cls_value,
        positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ciou_geometric_case() {
        let l = ciou_loss(
            &BBox::new(0.0, 0.0, 2.0, 2.0),
            &BBox::new(4.0, 0.0, 2.0, 2.0),
        );
        assert!((l - 1.4).abs() < 1e-9, "{l}");
    }

    #[test]
    fn ciou_aspect_term() {
        let p = BBox::new(0.0, 0.0, 2.0, 1.0);
        let g = BBox::new(0.0, 0.0, 1.0, 2.0);
        let t = ciou_terms(&p, &g);
        let v = 4.0 / (PI * PI) * (0.5f64.atan() - 2.0f64.atan()).powi(2);
        assert!((t.v - v).abs() < 1e-9);
        assert!(ciou_loss(&p, &g) > 1.0 - t.iou + t.rho2 / t.c2);
    }

    #[test]
    fn ciou_row_matches_scalar_and_fd() {
        let aux = [10.0, 12.0, 4.0, 5.0, 17.0, 21.0];
        let x = [5.0, 3.0, 4.0, 6.0];
        let (v, g) = ciou_row::<f64>(&x, &aux);
        let pred = BBox::from_corners(10.0 - 5.0, 12.0 - 3.0, 14.0, 18.0);
        assert!((v - ciou_loss(&pred, &BBox::from_corners(4.0, 5.0, 17.0, 21.0))).abs() < 1e-12);
        for i in 0..4 {
            let (mut xp, mut xm) = (x, x);
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (ciou_row::<f64>(&xp, &aux).0 - ciou_row::<f64>(&xm, &aux).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "side {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn dfl_values() {
        let uniform = [1.0 / 16.0; 16];
        assert!((dfl_loss(&uniform, 3.0).unwrap() - 16f64.ln()).abs() < 1e-9);
        assert!((dfl_loss(&uniform, 15.0).unwrap() - 16f64.ln()).abs() < 1e-9);
        let mut p = [0.01; 16];
        p[4] = 0.3;
        p[5] = 0.56;
        let mid = dfl_loss(&p, 4.5).unwrap();
        assert!((mid + 0.5 * (0.3f64.ln() + 0.56f64.ln())).abs() < 1e-12);
        assert!(dfl_loss(&uniform, 15.5).is_err());
        assert!(dfl_loss(&uniform, -0.1).is_err());
    }

    #[test]
    fn dfl_interpolation_is_optimal() {
        let y = 6.3;
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..1000 {
            let a = i as f64 / 1000.0;
            let mut p = [0.0; 16];
            p[6] = a;
            p[7] = 1.0 - a;
            let l = dfl_loss(&p, y).unwrap();
            if l < best.0 {
                best = (l, a);
            }
        }
        assert!((best.1 - 0.7).abs() <= 1e-3, "{best:?}");
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(&[0.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-9);
        let expect = -(1.0 / (1.0 + (-10f64).exp())).ln();
        assert!((bce_loss(&[10.0], &[1.0]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 4.54e-5).abs() < 1e-7);
        let big = bce_loss(&[1000.0, -1000.0, 1000.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(big.is_finite());
        assert!((big - 1000.0 / 3.0).abs() < 1e-9);
    }

    use crate::detect::assign::{assign_targets, LevelGeometry};
    use crate::gradcheck::{check_inputs, CheckOptions};

    const LEVEL: LevelGeometry = LevelGeometry {
        stride: 8,
        height: 4,
        width: 4,
    };

    fn perfect_logits(targets: &[Option<CellTarget>], ncls: usize) -> (Tensor<f64>, Tensor<f64>) {
        let hw = 16;
        let mut bl = Tensor::zeros(&[1, 64, 4, 4]);
        let mut cl = Tensor::full(&[1, ncls, 4, 4], -15.0);
        for (cell, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let (ax, ay) = ((cell % 4) as f64 * 8.0 + 4.0, (cell / 4) as f64 * 8.0 + 4.0);
            let g = t.bbox.corners();
            for (side, d) in [ax - g[0], ay - g[1], g[2] - ax, g[3] - ay]
                .into_iter()
                .enumerate()
            {
                let bin = (d / 8.0).round() as usize;
                bl.data_mut()[(side * 16 + bin) * hw + cell] = 40.0;
            }
            cl.data_mut()[t.class_id * hw + cell] = 15.0;
        }
        (bl, cl)
    }

    fn loss_of(
        bl: Tensor<f64>,
        cl: Tensor<f64>,
        targets: &[Option<CellTarget>],
        ncls: usize,
    ) -> LossBreakdown {
        let mut tape = Tape::new();
        let out = LevelOutput {
            box_logits: tape.constant(bl),
            cls_logits: tape.constant(cl),
            stride: 8,
        };
        detection_loss(
            &mut tape,
            &[out],
            &[targets.to_vec()],
            ncls,
            LossWeights::default(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let gt = BBox::from_corners(4.0, 4.0, 28.0, 20.0);
        let targets = assign_targets(&[gt], &[1], &[LEVEL]).remove(0);
        assert!(targets[6].is_some());
        let (bl, cl) = perfect_logits(&targets, 3);
        let l = loss_of(bl, cl, &targets, 3);
        assert_eq!(l.positives, 1);
        assert!(l.ciou + l.dfl + l.cls <= 1e-3, "{l:?}");
        assert!(l.ciou >= 0.0 && l.dfl >= 0.0 && l.cls >= 0.0);
    }

    #[test]
    fn empty_image_is_background_bce() {
        let targets = vec![None; 16];
        let cl = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 / 10.0 - 1.0);
        let labels = vec![0.0; 32];
        let expect = bce_loss(&cl.to_f64_vec(), &labels).unwrap();
        let l = loss_of(Tensor::zeros(&[1, 64, 4, 4]), cl, &targets, 2);
        assert_eq!(l.positives, 0);
        assert!((l.cls - expect).abs() < 1e-12);
        assert_eq!(l.ciou + l.dfl, 0.0);
    }

    #[test]
    fn detection_loss_gradcheck() {
        let gts = [
            BBox::new(13.0, 11.0, 14.0, 9.0),
            BBox::new(22.5, 24.0, 11.0, 13.0),
        ];
        let targets = assign_targets(&gts, &[0, 1], &[LEVEL]).remove(0);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let bl = crate::gradcheck::random_tensor(&[1, 64, 4, 4], &mut rng, 1.0);
        let cl = crate::gradcheck::random_tensor(&[1, 2, 4, 4], &mut rng, 1.0);
        let out = check_inputs(
            "detection_loss",
            &[bl, cl],
            CheckOptions::default(),
            |tape, v| {
                let out = LevelOutput {
                    box_logits: v[0],
                    cls_logits: v[1],
                    stride: 8,
                };
                Ok(
                    detection_loss(tape, &[out], &[targets.clone()], 2, LossWeights::default())?
                        .total,
                )
            },
        )
        .unwrap();
        assert!(out.passes(1e-4), "{out:?}");
    }
}
