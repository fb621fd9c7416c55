//! Plain-loop reference implementations used to check the tape-based modules.

use crate::nn::{Conv2d, Linear, ParamStore};
use crate::sparsegraph::SparseAttention;
use crate::tensor::Tensor;

/// `x: [n, din]` row-major times the layer's weight, plus bias.
pub fn linear(ps: &ParamStore<f64>, l: &Linear, x: &[f64], n: usize) -> Vec<f64> {
    let w = ps.get(l.weight);
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; n * dout];
    for r in 0..n {
        for o in 0..dout {
            let mut s = l.bias.map_or(0.0, |b| ps.get(b).data()[o]);
            for i in 0..din {
                s += x[r * din + i] * w.data()[i * dout + o];
            }
            y[r * dout + o] = s;
        }
    }
    y
}

/// 1×1 convolution of a `[1, C, H, W]` map, returned as `[H·W, Cout]` rows.
pub fn conv1x1_rows(ps: &ParamStore<f64>, conv: &Conv2d, map: &Tensor<f64>) -> Vec<f64> {
    let s = map.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let w = ps.get(conv.weight);
    let cout = w.shape()[0];
    let mut rows = vec![0.0; hw * cout];
    for p in 0..hw {
        for o in 0..cout {
            let mut acc = ps.get(conv.bias).data()[o];
            for i in 0..c {
                acc += w.data()[o * c + i] * map.data()[i * hw + p];
            }
            rows[p * cout + o] = acc;
        }
    }
    rows
}

/// `[1, C, H, W]` → `[H·W, C]` rows.
pub fn map_rows(map: &Tensor<f64>) -> Vec<f64> {
    let s = map.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    (0..hw * c)
        .map(|i| map.data()[(i % c) * hw + i / c])
        .collect()
}

/// Full softmax attention of every destination over every source, added to `base`.
pub fn dense_attention(
    ps: &ParamStore<f64>,
    a: &SparseAttention,
    src: &[f64],
    dst: &[f64],
    base: &[f64],
    d: usize,
) -> Vec<f64> {
    let (ns, nd) = (src.len() / d, dst.len() / d);
    let q = linear(ps, &a.wq, dst, nd);
    let k = linear(ps, &a.wk, src, ns);
    let v = linear(ps, &a.wv, src, ns);
    let e = a.d_embed;
    let mut msg = vec![0.0; nd * d];
    for i in 0..nd {
        let s: Vec<f64> = (0..ns)
            .map(|j| (0..e).map(|c| q[i * e + c] * k[j * e + c]).sum::<f64>() / (e as f64).sqrt())
            .collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for j in 0..ns {
            let w = (s[j] - m).exp() / z;
            for c in 0..d {
                msg[i * d + c] += w * v[j * d + c];
            }
        }
    }
    let out = linear(ps, &a.wo, &msg, nd);
    out.iter().zip(base).map(|(o, b)| o + b).collect()
}
