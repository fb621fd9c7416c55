//! Adaptive partitioning: estimate how much of the RGB view the thermal view
//! covers, snap that estimate to one of five crop factors, and crop the RGB
//! map around its center.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, Init, Linear, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Admissible crop factors, ascending.
pub const GAMMA_BINS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

const HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionDecision {
    pub lambda: f64,
    pub gamma: f64,
    pub crop: CropRect,
}

impl PartitionDecision {
    pub fn new(lambda: f64, map_h: usize, map_w: usize) -> Result<Self> {
        let gamma = lambda_to_gamma(lambda)?;
        Ok(Self {
            lambda,
            gamma,
            crop: make_crop_rect(gamma, map_h, map_w)?,
        })
    }

    /// Same factor, rectangle recomputed for a map of another extent.
    pub fn for_extent(&self, map_h: usize, map_w: usize) -> Result<Self> {
        Ok(Self {
            crop: make_crop_rect(self.gamma, map_h, map_w)?,
            ..self.clone()
        })
    }
}

/// Smallest bin that is `>= lambda`; everything from 1 up maps to 1.
pub fn lambda_to_gamma(lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(invalid(
            "lambda_to_gamma",
            format!("lambda must be >= 0, got {lambda}"),
        ));
    }
    Ok(GAMMA_BINS
        .iter()
        .copied()
        .find(|&g| g >= lambda)
        .unwrap_or(1.0))
}

pub fn gamma_bin_index(gamma: f64) -> Option<usize> {
    GAMMA_BINS.iter().position(|&g| (g - gamma).abs() < 1e-9)
}

/// Centered rectangle covering a `gamma` fraction of each extent, at least one cell.
pub fn make_crop_rect(gamma: f64, map_h: usize, map_w: usize) -> Result<CropRect> {
    if gamma_bin_index(gamma).is_none() {
        return Err(invalid(
            "make_crop_rect",
            format!("gamma {gamma} is not a bin value"),
        ));
    }
    if map_h == 0 || map_w == 0 {
        return Err(invalid("make_crop_rect", "map extents must be >= 1"));
    }
    let side = |n: usize| ((gamma * n as f64).round() as usize).clamp(1, n);
    let (h, w) = (side(map_h), side(map_w));
    Ok(CropRect {
        top: (map_h - h) / 2,
        left: (map_w - w) / 2,
        h,
        w,
    })
}

/// `(lambda, gamma)` over `0, 0.01, …, 1.5`.
pub fn gamma_table() -> Vec<(f64, f64)> {
    (0..=150)
        .map(|i| {
            let lambda = i as f64 / 100.0;
            (
                lambda,
                lambda_to_gamma(lambda).expect("grid is non-negative"),
            )
        })
        .collect()
}

pub fn gamma_table_csv() -> String {
    let mut out = String::from("lambda,gamma\n");
    for (l, g) in gamma_table() {
        out.push_str(&format!("{l:.2},{g:.1}\n"));
    }
    out
}

/// The λ head: channel concat → conv3×3+relu → conv3×3/2+relu → global
/// average pool → linear(64)+relu → linear(1) → softplus.
#[derive(Clone, Debug)]
pub struct AdaptivePartition {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl AdaptivePartition {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init<'_>,
        in_channels: usize,
        width: usize,
    ) -> Self {
        Self {
            conv1: Conv2d::new(ps, init, "apl.conv1", 2 * in_channels, width, 3, 1),
            conv2: Conv2d::new(ps, init, "apl.conv2", width, width, 3, 2),
            fc1: Linear::new(ps, init, "apl.fc1", width, HIDDEN, true),
            fc2: Linear::new(ps, init, "apl.fc2", HIDDEN, 1, true),
        }
    }

    /// λ per batch item, shape `[B]`.
    pub fn predict_lambda<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        rgb: Var,
        thermal: Var,
    ) -> Result<Var> {
        let (sr, st) = (tape.shape(rgb).to_vec(), tape.shape(thermal).to_vec());
        if sr.len() != 4 || sr != st {
            return Err(crate::error::mismatch("predict_lambda", &sr, &st));
        }
        let x = tape.concat(&[rgb, thermal], 1)?;
        let x = self.conv1.forward(tape, ps, x)?;
        let x = tape.relu(x);
        let x = self.conv2.forward(tape, ps, x)?;
        let x = tape.relu(x);
        let x = tape.global_avg_pool(x)?;
        let x = self.fc1.forward(tape, ps, x)?;
        let x = tape.relu(x);
        let x = self.fc2.forward(tape, ps, x)?;
        let x = tape.softplus(x);
        tape.reshape(x, &[sr[0]])
    }

    /// Zeroes the output layer so that λ = softplus(0) for every input.
    pub fn zero_output<T: Real>(&self, ps: &mut ParamStore<T>) {
        self.fc2.zero(ps);
    }

    pub fn output_bias(&self) -> crate::nn::ParamId {
        self.fc2.bias.expect("fc2 has a bias")
    }
}

/// Smallest λ₀ used as the surrogate denominator in [`crop_fused`].
pub const LAMBDA_FLOOR: f64 = 0.05;

/// Crops `rgb: [1,C,H,W]` to the decision's rectangle and multiplies by the
/// straight-through factor `1 + (λ − λ₀) / max(λ₀, LAMBDA_FLOOR)`, where
/// `λ₀ = decision.lambda` is a constant. The factor is exactly one in the
/// forward pass and has the gradient of `λ / λ₀` whenever `λ₀ ≥ LAMBDA_FLOOR`;
/// the floor stops a collapsing λ from amplifying gradients without bound.
pub fn crop_fused<T: Real>(
    tape: &mut Tape<T>,
    rgb: Var,
    decision: &PartitionDecision,
    lambda: Var,
) -> Result<Var> {
    let r = decision.crop;
    let cropped = tape.crop(rgb, r.top, r.left, r.h, r.w)?;
    let lambda = tape.reshape(lambda, &[1])?;
    let frozen = tape.constant(Tensor::scalar(T::of(decision.lambda)));
    let delta = tape.sub(lambda, frozen)?;
    let delta = tape.scale(delta, T::one() / T::of(decision.lambda.max(LAMBDA_FLOOR)));
    let one = tape.constant(Tensor::scalar(T::one()));
    let factor = tape.add(one, delta)?;
    tape.mul(cropped, factor)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::random_tensor;

    #[test]
    fn reported_lambda_values() {
        assert_eq!(lambda_to_gamma(1.17).unwrap(), 1.0);
        assert_eq!(lambda_to_gamma(0.32).unwrap(), 0.4);
        assert_eq!(lambda_to_gamma(0.0).unwrap(), 0.2);
        assert_eq!(lambda_to_gamma(0.61).unwrap(), 0.8);
        assert!(lambda_to_gamma(-0.01).is_err());
        assert!(lambda_to_gamma(f64::NAN).is_err());
    }

    #[test]
    fn bins_are_fixed_points() {
        for g in GAMMA_BINS {
            assert_eq!(lambda_to_gamma(g).unwrap(), g);
        }
    }

    #[test]
    fn crop_rect_arithmetic() {
        let full = make_crop_rect(1.0, 20, 20).unwrap();
        assert_eq!(
            full,
            CropRect {
                top: 0,
                left: 0,
                h: 20,
                w: 20
            }
        );
        let r = make_crop_rect(0.4, 640, 640).unwrap();
        assert_eq!(
            r,
            CropRect {
                top: 192,
                left: 192,
                h: 256,
                w: 256
            }
        );
        let tiny = make_crop_rect(0.2, 3, 3).unwrap();
        assert_eq!((tiny.h, tiny.top), (1, 1));
        assert!(make_crop_rect(0.3, 10, 10).is_err());
    }

    #[test]
    fn table_csv_shape() {
        let csv = gamma_table_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 152);
        assert!(lines.contains(&"1.17,1.0"));
        assert!(lines.contains(&"0.32,0.4"));
    }

    fn head() -> (ParamStore<f64>, AdaptivePartition) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new();
        let apl = AdaptivePartition::new(&mut ps, &mut Init { rng: &mut rng }, 4, 8);
        (ps, apl)
    }

    #[test]
    fn zeroed_output_gives_ln2() {
        let (mut ps, apl) = head();
        apl.zero_output(&mut ps);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let a = tape.constant(random_tensor(&[2, 4, 2, 2], &mut rng, 1.0));
        let b = tape.constant(random_tensor(&[2, 4, 2, 2], &mut rng, 1.0));
        let l = apl.predict_lambda(&mut tape, &ps, a, b).unwrap();
        for &v in tape.value(l).data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_nonnegative_and_spatial_mismatch_errors() {
        let (ps, apl) = head();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let a = tape.constant(random_tensor(&[1, 4, 2, 2], &mut rng, 3.0));
            let b = tape.constant(random_tensor(&[1, 4, 2, 2], &mut rng, 3.0));
            let l = apl.predict_lambda(&mut tape, &ps, a, b).unwrap();
            assert!(tape.value(l).data()[0] >= 0.0);
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 1, 1]));
        assert!(apl.predict_lambda(&mut tape, &ps, a, b).is_err());
    }

    #[test]
    fn lambda_responds_to_both_inputs() {
        let (ps, apl) = head();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a0 = random_tensor(&[1, 4, 4, 4], &mut rng, 1.0);
        let b0 = random_tensor(&[1, 4, 4, 4], &mut rng, 1.0);
        let eval = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let l = apl.predict_lambda(&mut tape, &ps, x, y).unwrap();
            tape.value(l).data()[0]
        };
        let base = eval(&a0, &b0);
        let h = 1e-3;
        let probe_changes = |which: usize| {
            (0..a0.numel()).any(|i| {
                let (mut a, mut b) = (a0.clone(), b0.clone());
                if which == 0 {
                    a.data_mut()[i] += h;
                } else {
                    b.data_mut()[i] += h;
                }
                (eval(&a, &b) - base).abs() > 1e-12
            })
        };
        assert!(probe_changes(0));
        assert!(probe_changes(1));
    }

    #[test]
    fn crop_fused_forward_is_plain_crop_and_routes_to_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = random_tensor(&[1, 2, 5, 5], &mut rng, 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let lam = tape.leaf(Tensor::scalar(0.37), true);
        let dec = PartitionDecision::new(0.37, 5, 5).unwrap();
        assert_eq!(dec.gamma, 0.4);
        let fused = crop_fused(&mut tape, x, &dec, lam).unwrap();
        let plain = tape
            .crop(x, dec.crop.top, dec.crop.left, dec.crop.h, dec.crop.w)
            .unwrap();
        assert_eq!(tape.value(fused), tape.value(plain));

        let up = random_tensor(tape.shape(fused), &mut rng, 1.0);
        let u = tape.constant(up.clone());
        let p = tape.mul(fused, u).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let expected: f64 = up
            .data()
            .iter()
            .zip(tape.value(plain).data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / 0.37;
        assert!((tape.grad(lam).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn crop_fused_gradient_is_bounded_for_tiny_lambda() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let lam = tape.leaf(Tensor::scalar(1e-30), true);
        let dec = PartitionDecision::new(1e-30, 4, 4).unwrap();
        let y = crop_fused(&mut tape, x, &dec, lam).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let cells = (dec.crop.h * dec.crop.w) as f64;
        assert_eq!(tape.grad(lam).unwrap()[0], cells / LAMBDA_FLOOR);
    }

    #[test]
    fn crop_fused_full_map_at_gamma_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let lam = tape.constant(Tensor::scalar(1.3));
        let dec = PartitionDecision::new(1.3, 3, 3).unwrap();
        let y = crop_fused(&mut tape, x, &dec, lam).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
