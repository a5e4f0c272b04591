//! Straight-loop reference implementations, written without any of the
//! library's kernels, used to pin the optimized code.

#![allow(dead_code)]

use metaseg_core::{Shape, Tensor};

/// `(rows, cols)` of a weight stored as `1×1×rows×cols`.
pub fn dims(w: &Tensor) -> (usize, usize) {
    (w.shape().h, w.shape().w)
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

/// Per-pixel `y = x·W + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let s = x.shape();
    let (cin, cout) = dims(w);
    assert_eq!(cin, s.c);
    let mut out = Tensor::zeros(Shape::new(s.n, cout, s.h, s.w));
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                for o in 0..cout {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..cin {
                        acc += x.at(n, i, y, xx) * w.data()[i * cout + o];
                    }
                    *out.at_mut(n, o, y, xx) = acc;
                }
            }
        }
    }
    out
}

pub fn avg_pool(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h / r, s.w / r), |n, c, y, xx| {
        let mut acc = 0.0;
        for dy in 0..r {
            for dx in 0..r {
                acc += x.at(n, c, y * r + dy, xx * r + dx);
            }
        }
        acc / (r * r) as f64
    })
}

/// Half-pixel-centred bilinear resize.
pub fn upsample(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    let src = |d: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let pos = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, pos - lo as f64)
    };
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        let (y0, y1, fy) = src(y, s.h, oh);
        let (x0, x1, fx) = src(xx, s.w, ow);
        let top = x.at(n, c, y0, x0) * (1.0 - fx) + x.at(n, c, y0, x1) * fx;
        let bottom = x.at(n, c, y1, x0) * (1.0 - fx) + x.at(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn concat(parts: &[&Tensor]) -> Tensor {
    let s = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    Tensor::from_fn(Shape::new(s.n, c, s.h, s.w), |n, mut ch, y, xx| {
        for p in parts {
            if ch < p.shape().c {
                return p.at(n, ch, y, xx);
            }
            ch -= p.shape().c;
        }
        unreachable!()
    })
}

pub fn mlp(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    linear(&linear(x, w1, Some(b1)).map(gelu), w2, Some(b2))
}

/// Multi-head attention with key/value pooling, written token by token.
///
/// `wq`, `wk` are `C × Cq` (head `j` owns columns `j·Cq/heads..`), `wv`
/// and `wo` are `C × C` (head `j` owns value columns `j·C/heads..`).
/// Returns the output and the probabilities as `[n][head][query][key]`.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
    r: usize,
    scale: f64,
) -> (Tensor, Vec<Vec<Vec<Vec<f64>>>>) {
    let s = x.shape();
    let (c, cq) = dims(wq);
    let (kh, kw) = (s.h / r, s.w / r);
    let (nq, nk) = (s.h * s.w, kh * kw);
    let (dq, dv) = (cq / heads, c / heads);
    let mut out = Tensor::zeros(s);
    let mut all_probs = Vec::new();
    for n in 0..s.n {
        let tok: Vec<Vec<f64>> = (0..nq)
            .map(|p| (0..c).map(|ch| x.at(n, ch, p / s.w, p % s.w)).collect())
            .collect();
        let pooled: Vec<Vec<f64>> = (0..nk)
            .map(|k| {
                let (ky, kx) = (k / kw, k % kw);
                (0..c)
                    .map(|ch| {
                        let mut acc = 0.0;
                        for dy in 0..r {
                            for dx in 0..r {
                                acc += x.at(n, ch, ky * r + dy, kx * r + dx);
                            }
                        }
                        acc / (r * r) as f64
                    })
                    .collect()
            })
            .collect();
        let project = |rows: &[Vec<f64>], w: &Tensor| -> Vec<Vec<f64>> {
            let (_, cols) = dims(w);
            rows.iter()
                .map(|row| {
                    (0..cols)
                        .map(|o| (0..c).map(|i| row[i] * w.data()[i * cols + o]).sum())
                        .collect()
                })
                .collect()
        };
        let q = project(&tok, wq);
        let k = project(&pooled, wk);
        let v = project(&pooled, wv);
        let mut mixed = vec![vec![0.0; c]; nq];
        let mut head_probs = Vec::new();
        for j in 0..heads {
            let mut rows = Vec::new();
            for p in 0..nq {
                let scores: Vec<f64> = (0..nk)
                    .map(|kk| scale * (j * dq..(j + 1) * dq).map(|e| q[p][e] * k[kk][e]).sum::<f64>())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
                for d in j * dv..(j + 1) * dv {
                    mixed[p][d] = (0..nk).map(|kk| probs[kk] * v[kk][d]).sum();
                }
                rows.push(probs);
            }
            head_probs.push(rows);
        }
        let projected = project(&mixed, wo);
        for (p, row) in projected.iter().enumerate() {
            for (ch, &val) in row.iter().enumerate() {
                *out.at_mut(n, ch, p / s.w, p % s.w) = val;
            }
        }
        all_probs.push(head_probs);
    }
    (out, all_probs)
}
