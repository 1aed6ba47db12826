//! Reference implementations for integration tests. Everything here is
//! written with plain loops and does not touch the tape or tensor kernels.

#![allow(dead_code)]

use kcm_core::model::MlpParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal by Box-Muller, independent of `rand_distr`.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-layer pre-activations and the network output for one input.
pub fn forward_trace(params: &MlpParams, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let layers = params.layers();
    let mut a = x.to_vec();
    let mut pre = Vec::with_capacity(layers.len());
    for (s, l) in layers.iter().enumerate() {
        let w = l.weight.data();
        let b = l.bias.data();
        let (rows, cols) = (b.len(), a.len());
        let z: Vec<f64> = (0..rows)
            .map(|i| (0..cols).map(|j| w[i * cols + j] * a[j]).sum::<f64>() + b[i])
            .collect();
        a = if s + 1 < layers.len() {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
    }
    (pre, a)
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Vec<f64> {
    forward_trace(params, x).1
}

pub fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean logistic loss `ln(1 + e^{−y f(x)})`.
pub fn logistic_loss(params: &MlpParams, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| log1p_exp(-y * forward(params, x)[0]))
        .sum::<f64>()
        / xs.len() as f64
}

fn hidden_signs(params: &MlpParams, xs: &[Vec<f64>]) -> Vec<bool> {
    let depth = params.layers().len();
    xs.iter()
        .flat_map(|x| {
            let (pre, _) = forward_trace(params, x);
            pre.into_iter()
                .take(depth - 1)
                .flatten()
                .map(|v| v > 0.0)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Central differences of `logistic_loss` over every parameter (flattened
/// order). Entries whose ±step probes cross a ReLU kink are `None`.
pub fn fd_gradient(params: &MlpParams, xs: &[Vec<f64>], ys: &[f64], step: f64) -> Vec<Option<f64>> {
    let flat = params.flatten();
    let base = hidden_signs(params, xs);
    let mut probe = params.clone();
    (0..flat.len())
        .map(|k| {
            let mut at = flat.clone();
            at[k] = flat[k] + step;
            probe.set_flat(&at).unwrap();
            let up = logistic_loss(&probe, xs, ys);
            let kink_up = hidden_signs(&probe, xs) != base;
            at[k] = flat[k] - step;
            probe.set_flat(&at).unwrap();
            let down = logistic_loss(&probe, xs, ys);
            let kink_down = hidden_signs(&probe, xs) != base;
            (!(kink_up || kink_down)).then(|| (up - down) / (2.0 * step))
        })
        .collect()
}

pub fn mean_and_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Exhaustive `E_ε (W/n)‖Σ ε_i x_i‖` by explicit sign vectors.
pub fn rademacher_linear_exhaustive(points: &[Vec<f64>], radius: f64) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut total = 0.0;
    for mask in 0..(1u64 << n) {
        let mut s = vec![0.0; d];
        for (i, p) in points.iter().enumerate() {
            let e = if mask & (1 << i) != 0 { 1.0 } else { -1.0 };
            for j in 0..d {
                s[j] += e * p[j];
            }
        }
        total += s.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    radius / n as f64 * total / (1u64 << n) as f64
}

/// Synthetic CIFAR-10 records whose pixels depend on the class, so a
/// small network can learn them.
pub fn synthetic_cifar(n: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let patterns: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..3072).map(|_| r.random::<f64>()).collect())
        .collect();
    let mut out = Vec::with_capacity(n * 3073);
    for i in 0..n {
        let label = (i % 10) as u8;
        out.push(label);
        for p in &patterns[label as usize] {
            let v = 0.6 * p + 0.4 * r.random::<f64>();
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// Singular values by one-sided Jacobi rotations, largest first.
pub fn jacobi_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    // work on columns of A (rows × cols); orthogonalize pairs until converged
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| data[i * cols + j]).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|v| v * v).sum();
                let beta: f64 = a[q].iter().map(|v| v * v).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}
