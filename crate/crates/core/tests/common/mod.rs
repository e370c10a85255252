//! Host-side f64 reference implementations shared by integration tests.
#![allow(dead_code)]

use mpgen_core::nn::{to_f64_vec, Linear, Mlp};
use mpgen_core::moe::{TaskMoe, TokenMoe};

pub struct HostLinear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

impl HostLinear {
    pub fn of(l: &Linear) -> Self {
        let (d_in, d_out) = l.weight.dims2().unwrap();
        let b = match &l.bias {
            Some(b) => to_f64_vec(b).unwrap(),
            None => vec![0.0; d_out],
        };
        Self { w: to_f64_vec(&l.weight).unwrap(), b, d_in, d_out }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_out)
            .map(|j| self.b[j] + (0..self.d_in).map(|i| x[i] * self.w[i * self.d_out + j]).sum::<f64>())
            .collect()
    }
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn mlp(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = HostLinear::of(&m.fc1).apply(x).into_iter().map(gelu_tanh).collect();
    HostLinear::of(&m.fc2).apply(&h)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Exhaustive top-k mask: keeps entry `e` iff fewer than `k` entries beat it
/// (larger value, or equal value at a lower index).
pub fn topk_mask(g: &[f64], k: usize) -> Vec<f64> {
    (0..g.len())
        .map(|e| {
            let beaten = (0..g.len()).filter(|&o| g[o] > g[e] || (g[o] == g[e] && o < e)).count();
            if beaten < k { g[e] } else { 0.0 }
        })
        .collect()
}

/// Dense mixture: every routed expert evaluated, weighted by the masked gate.
pub fn dense_mix(shared: &[Mlp], routed: &[Mlp], masked: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for s in shared {
        for (a, b) in y.iter_mut().zip(mlp(s, x)) {
            *a += b;
        }
    }
    for (e, r) in routed.iter().enumerate() {
        let o = mlp(r, x);
        for (a, b) in y.iter_mut().zip(o) {
            *a += masked[e] * b;
        }
    }
    y
}

/// Token-wise reference for `x (B, T, d)` rows and per-sample `e_f (B, d)`.
pub fn token_moe_dense(l: &TokenMoe, x: &[f64], b: usize, t: usize, d: usize, e_f: Option<&[f64]>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (gt, gf) = (HostLinear::of(&l.g_t), HostLinear::of(&l.g_f));
    let mut out = Vec::with_capacity(b * t * d);
    let mut gates = Vec::new();
    for bi in 0..b {
        for ti in 0..t {
            let row = &x[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            let mut h = gt.apply(row);
            if let (true, Some(e)) = (l.cfg.freq_conditioned, e_f) {
                for (a, v) in h.iter_mut().zip(&e[bi * d..(bi + 1) * d]) {
                    *a += v;
                }
            }
            let g = softmax(&gf.apply(&h));
            let m = topk_mask(&g, l.cfg.top_k);
            out.extend(dense_mix(&l.shared, &l.routed, &m, row));
            gates.push(g);
        }
    }
    (out, gates)
}

/// Task-wise reference: one gate per sample from the token mean.
pub fn task_moe_dense(l: &TaskMoe, task: &str, x: &[f64], b: usize, t: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let gate = HostLinear::of(&l.gates[task]);
    let mut out = Vec::with_capacity(b * t * d);
    let mut gates = Vec::new();
    for bi in 0..b {
        let mut pooled = vec![0.0; d];
        for ti in 0..t {
            for j in 0..d {
                pooled[j] += x[(bi * t + ti) * d + j] / t as f64;
            }
        }
        let g = softmax(&gate.apply(&pooled));
        let m = topk_mask(&g, l.cfg.top_k);
        for ti in 0..t {
            out.extend(dense_mix(&l.shared, &l.routed, &m, &x[(bi * t + ti) * d..(bi * t + ti + 1) * d]));
        }
        gates.push(g);
    }
    (out, gates)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
