//! Naive f64 re-implementation of the model, used as an oracle.
#![allow(dead_code)]

use circuitseek::tensor::Tensor;
use circuitseek::transformer::{init_params, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let c = t.cols();
    t.data()
        .chunks(c)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for (k, &x) in row.iter().enumerate() {
                for j in 0..n {
                    out[j] += x * b[k][j];
                }
            }
            out
        })
        .collect()
}

pub fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Soft patch applied at `positions`: component `c` writes
/// `w[c]·v + (1 − w[c])·alt[c][j]` at `positions[j]`.
pub struct RefPatch<'a> {
    pub positions: &'a [usize],
    pub weights: &'a [f64],
    pub alt: &'a [Mat],
}

pub struct RefRun {
    /// `[seq][vocab]`
    pub logits: Mat,
    /// Per component, `[seq][d]`, after any patching.
    pub writes: Vec<Mat>,
    /// Per layer, all heads computed together through the stacked output projection.
    pub attn_block: Vec<Mat>,
    pub embedding: Mat,
    pub final_resid: Mat,
}

pub fn reference_forward(p: &ModelParams, tokens: &[usize], patch: Option<&RefPatch>) -> RefRun {
    let cfg = &p.config;
    let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let t = tokens.len();
    let tok = to_mat(&p.tok_emb);
    let pos = to_mat(&p.pos_emb);
    let mut resid: Mat = (0..t)
        .map(|i| tok[tokens[i]].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let embedding = resid.clone();
    let mut writes = Vec::new();
    let mut attn_block = Vec::new();
    let mut ci = 0;

    let apply = |ci: usize, w: &mut Mat| {
        if let Some(pt) = patch {
            for (j, &pos) in pt.positions.iter().enumerate() {
                let wt = pt.weights[ci];
                for k in 0..d {
                    w[pos][k] = wt * w[pos][k] + (1.0 - wt) * pt.alt[ci][j][k];
                }
            }
        }
    };

    for layer in &p.layers {
        let gain = vec64(&layer.attn_norm);
        let h: Mat = resid.iter().map(|r| rmsnorm(r, &gain)).collect();
        let qkv = matmul(&h, &to_mat(&layer.w_qkv));
        let mut z_all: Mat = vec![vec![0.0; d]; t];
        let mut head_writes = Vec::new();
        for head in 0..nh {
            let q = |i: usize| &qkv[i][head * dh..(head + 1) * dh];
            let k = |i: usize| &qkv[i][d + head * dh..d + (head + 1) * dh];
            let v = |i: usize| &qkv[i][2 * d + head * dh..2 * d + (head + 1) * dh];
            let mut z: Mat = vec![vec![0.0; dh]; t];
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q(i).iter().zip(k(j)).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in 0..dh {
                        z[i][c] += e[j] / s * v(j)[c];
                    }
                }
                z_all[i][head * dh..(head + 1) * dh].copy_from_slice(&z[i]);
            }
            head_writes.push(matmul(&z, &to_mat(&layer.w_o[head])));
        }
        let stacked: Mat = layer.w_o.iter().flat_map(|w| to_mat(w)).collect();
        attn_block.push(matmul(&z_all, &stacked));
        for mut w in head_writes {
            apply(ci, &mut w);
            for i in 0..t {
                add_into(&mut resid[i], &w[i]);
            }
            writes.push(w);
            ci += 1;
        }
        let gain = vec64(&layer.mlp_norm);
        let h: Mat = resid.iter().map(|r| rmsnorm(r, &gain)).collect();
        let gate = matmul(&h, &to_mat(&layer.w_gate));
        let up = matmul(&h, &to_mat(&layer.w_up));
        let act: Mat = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(a, b)| silu(*a) * b).collect())
            .collect();
        let mut w = matmul(&act, &to_mat(&layer.w_down));
        apply(ci, &mut w);
        for i in 0..t {
            add_into(&mut resid[i], &w[i]);
        }
        writes.push(w);
        ci += 1;
    }
    let gain = vec64(&p.final_norm);
    let h: Mat = resid.iter().map(|r| rmsnorm(r, &gain)).collect();
    let logits = matmul(&h, &to_mat(&p.unembed));
    RefRun {
        logits,
        writes,
        attn_block,
        embedding,
        final_resid: resid,
    }
}

/// Small model with weights large enough that every component matters.
pub fn small_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_mlp: 32,
        vocab_size: 12,
        max_seq_len: 10,
        seed,
    };
    let mut p = init_params(&cfg, seed).unwrap();
    for t in p.tensors_mut() {
        if t.shape().len() == 2 {
            *t = t.map(|v| v * 15.0);
        }
    }
    p
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}
