#![allow(dead_code)]

use artn::data::Batch;
use artn::diagnostics::GrlSchedule;
use artn::model::{ArchSpec, ArtnHyper, ArtnModel};
use artn::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn arch(widths: &[usize], stride: usize, bn: bool) -> ArchSpec {
    ArchSpec {
        input_dim: 3,
        feature_widths: widths.to_vec(),
        classifier_hidden: vec![],
        domain_hidden: vec![5],
        classes: 2,
        batch_norm: bn,
        residual_stride: stride,
    }
}

pub fn random(rows: usize, cols: usize, seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor64::new(vec![rows, cols], data).unwrap()
}

pub fn batches(ns: usize, nt: usize, seed: u64) -> (Batch<f64>, Batch<f64>) {
    (
        Batch {
            x: random(ns, 3, seed),
            class_labels: Some((0..ns).map(|i| i % 2).collect()),
            domain_label: 0,
        },
        Batch {
            x: random(nt, 3, seed + 1),
            class_labels: None,
            domain_label: 1,
        },
    )
}

pub fn hyper(lambda: f64, beta: f64) -> ArtnHyper {
    ArtnHyper {
        lambda,
        beta,
        schedule: GrlSchedule::Constant,
    }
}

pub fn flat(v: &[Tensor64]) -> Vec<f64> {
    v.iter().flat_map(|t| t.data().to_vec()).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Plain-loop evaluation of the extractor and the residual transform.
pub fn unrolled(model: &ArtnModel<f64>, x: &Tensor64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (rows, _) = x.dims2().unwrap();
    let layer = |params: &[Tensor64], i: usize, h: &[f64]| -> Vec<f64> {
        let (w, b) = (&params[2 * i], &params[2 * i + 1]);
        let (din, dout) = w.dims2().unwrap();
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            for j in 0..dout {
                let mut s = b.data()[j];
                for k in 0..din {
                    s += h[r * din + k] * w.data()[k * dout + j];
                }
                out[r * dout + j] = s.max(0.0);
            }
        }
        out
    };
    let n = model.depth();
    let gp = model.g.params.tensors();
    let tp = model.t.params.tensors();
    let mut g = Vec::new();
    let mut h = x.data().to_vec();
    for i in 0..n {
        h = layer(gp, i, &h);
        g.push(h.clone());
    }
    // h_0 = g_1; h_i = T_i(h_{i-1}) + g_i at tapped layers i < N
    let mut h = g[0].clone();
    for i in 1..=n {
        let mut y = layer(tp, i - 1, &h);
        if i < n && i % model.residual_stride == 0 {
            y.iter_mut().zip(&g[i - 1]).for_each(|(a, b)| *a += b);
        }
        h = y;
    }
    (g, h)
}
