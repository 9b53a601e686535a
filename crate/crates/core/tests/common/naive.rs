//! Plain nested-loop references for the optimised kernels. The accumulation
//! order matches the documented kernel order, so results compare bitwise.
#![allow(dead_code)]

use hindsight_core::graph::mha;
use hindsight_core::nn::{Linear, MultiHeadAttention};
use hindsight_core::{Params, Rng, Tensor};

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// `input [C×H×W]`, `kernels [O×C×kh×kw]`, `bias [O]`.
pub fn conv2d(input: &Tensor<f64>, kernels: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let [c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let [o, _, kh, kw] = [kernels.shape()[0], kernels.shape()[1], kernels.shape()[2], kernels.shape()[3]];
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias.data()[oc];
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += x[(ic * h + y + ky) * w + xx + kx] * k[((oc * c + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(&[o, oh, ow], out).unwrap()
}

/// `[C×H×W]` with even `H`, `W`.
pub fn maxpool2(input: &Tensor<f64>) -> Tensor<f64> {
    let [c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let x = input.data();
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let mut best = x[(ch * h + 2 * y) * w + 2 * xx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                    if v > best {
                        best = v;
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(&[c, h / 2, w / 2], out).unwrap()
}

fn linear(params: &Params<f64>, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = params.value(l.weight);
    let b = params.value(l.bias);
    x.iter()
        .map(|row| {
            (0..l.out_dim)
                .map(|j| {
                    let mut acc = 0.0;
                    for (i, &v) in row.iter().enumerate() {
                        acc += v * w.data()[j * l.in_dim + i];
                    }
                    (0.0 + acc) + b.data()[j]
                })
                .collect()
        })
        .collect()
}

/// Single-head scaled dot-product self-attention with the module's projections.
pub fn attention(params: &Params<f64>, attn: &MultiHeadAttention, nodes: &Tensor<f64>) -> Tensor<f64> {
    assert_eq!(attn.heads, 1);
    let d = attn.d_model;
    let x: Vec<Vec<f64>> = (0..nodes.rows()).map(|i| nodes.row(i).to_vec()).collect();
    let q = linear(params, &attn.query, &x);
    let k = linear(params, &attn.key, &x);
    let v = linear(params, &attn.value, &x);
    let scale = 1.0 / (d as f64).sqrt();
    let mut mixed = Vec::new();
    for qi in &q {
        let mut scores: Vec<f64> = k
            .iter()
            .map(|kj| {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += qi[t] * kj[t];
                }
                (0.0 + acc) * scale
            })
            .collect();
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| if s > m { s } else { m });
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in scores.iter_mut() {
            *s /= sum;
        }
        let row: Vec<f64> = (0..d)
            .map(|t| {
                let mut acc = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    acc += s * v[j][t];
                }
                acc
            })
            .collect();
        mixed.push(row);
    }
    let out = linear(params, &attn.output, &mixed);
    Tensor::new(&[nodes.rows(), d], out.concat()).unwrap()
}

/// Builds a single-head attention module and returns its output next to the reference.
pub fn attention_pair(seed: u64, p: usize, d: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = Rng::new(seed);
    let mut params = Params::new();
    let attn = MultiHeadAttention::build(&mut params, "attn", d, 1, &mut rng).unwrap();
    let nodes = random_tensor(&mut rng, &[p, d]);
    (mha(&attn, &params, &nodes).unwrap(), attention(&params, &attn, &nodes))
}

pub fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
