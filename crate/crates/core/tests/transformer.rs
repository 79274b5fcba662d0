mod common;

use circuitseek::transformer::{
    enumerate_components, final_logits, forward, forward_traced, init_params, ComponentId,
    ModelConfig,
};
use common::*;

#[test]
fn forward_matches_reference() {
    let mut r = rng(1);
    for seed in 0..4 {
        let p = small_model(seed);
        let toks = random_tokens(&mut r, 9, 12);
        let got = forward(&p, &toks).unwrap();
        let want = reference_forward(&p, &toks, None);
        for i in 0..toks.len() {
            assert!(max_diff(got.row(i), &want.logits[i]) < 1e-4, "seed {seed} row {i}");
        }
    }
}

#[test]
fn residual_is_sum_of_component_writes() {
    let mut r = rng(2);
    for pair in 0..20u64 {
        let p = small_model(100 + pair);
        let toks = random_tokens(&mut r, 8, 12);
        let positions: Vec<usize> = (0..toks.len()).collect();
        let tr = forward_traced(&p, &toks, &positions).unwrap();
        assert_eq!(tr.contributions.len(), p.config.n_components());
        for (j, _) in positions.iter().enumerate() {
            let mut sum: Vec<f64> = tr.embedding[j].iter().map(|&v| v as f64).collect();
            for c in tr.contributions.values() {
                for (s, &v) in sum.iter_mut().zip(c.row(j)) {
                    *s += v as f64;
                }
            }
            let err = max_diff(&tr.final_residual[j], &sum);
            assert!(err < 1e-4, "pair {pair} position {j}: {err}");
        }
    }
}

#[test]
fn one_layer_residual_is_embedding_plus_heads_plus_mlp() {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_mlp: 16,
        vocab_size: 6,
        max_seq_len: 5,
        seed: 0,
    };
    let mut p = init_params(&cfg, 4).unwrap();
    for t in p.tensors_mut() {
        if t.shape().len() == 2 {
            *t = t.map(|v| v * 10.0);
        }
    }
    let toks = [1, 5, 0, 3, 2];
    let tr = forward_traced(&p, &toks, &[4]).unwrap();
    let refr = reference_forward(&p, &toks, None);
    let ids = [ComponentId::head(0, 0), ComponentId::head(0, 1), ComponentId::mlp(0)];
    let mut sum = refr.embedding[4].clone();
    for (k, id) in ids.iter().enumerate() {
        assert!(max_diff(tr.contributions[id].row(0), &refr.writes[k][4]) < 1e-4);
        for (s, v) in sum.iter_mut().zip(&refr.writes[k][4]) {
            *s += v;
        }
    }
    assert!(max_diff(&tr.final_residual[0], &sum) < 1e-4);
}

#[test]
fn per_head_writes_sum_to_fused_attention() {
    let mut r = rng(3);
    for seed in 0..5 {
        let p = small_model(seed);
        let toks = random_tokens(&mut r, 10, 12);
        let positions: Vec<usize> = (0..toks.len()).collect();
        let tr = forward_traced(&p, &toks, &positions).unwrap();
        let fused = reference_forward(&p, &toks, None).attn_block;
        for l in 0..p.config.n_layers {
            for j in 0..toks.len() {
                let mut sum = vec![0.0f32; p.config.d_model];
                for h in 0..p.config.n_heads {
                    for (s, v) in sum.iter_mut().zip(tr.contributions[&ComponentId::head(l, h)].row(j)) {
                        *s += v;
                    }
                }
                let err = max_diff(&sum, &fused[l][j]);
                assert!(err < 1e-5, "layer {l} position {j}: {err}");
            }
        }
    }
}

#[test]
fn attention_is_causal() {
    let mut r = rng(4);
    let p = small_model(7);
    for _ in 0..10 {
        let toks = random_tokens(&mut r, 10, 12);
        let base = forward(&p, &toks).unwrap();
        for j in 1..toks.len() {
            let mut changed = toks.clone();
            changed[j] = (changed[j] + 1) % 12;
            let out = forward(&p, &changed).unwrap();
            for i in 0..j {
                assert_eq!(base.row(i), out.row(i), "position {i} saw token {j}");
            }
        }
    }
}

#[test]
fn silent_components_leave_embedding_only() {
    let mut p = small_model(9);
    p.zero_output_projections();
    let toks = [3, 1, 4, 1, 5, 9];
    let got = forward(&p, &toks).unwrap();
    let tok = to_mat(&p.tok_emb);
    let pos = to_mat(&p.pos_emb);
    let gain: Vec<f64> = p.final_norm.data().iter().map(|&v| v as f64).collect();
    let unembed = to_mat(&p.unembed);
    for (i, &t) in toks.iter().enumerate() {
        let x: Vec<f64> = tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect();
        let want = &matmul(&vec![rmsnorm(&x, &gain)], &unembed)[0];
        assert!(max_diff(got.row(i), want) < 1e-5);
    }
}

#[test]
fn traced_forward_is_bit_identical() {
    let p = small_model(11);
    let toks = [0, 2, 4, 6, 8, 10, 1];
    let plain = forward(&p, &toks).unwrap();
    let traced = forward_traced(&p, &toks, &[0, 3, 6]).unwrap();
    assert_eq!(plain.data(), traced.logits.data());
}

#[test]
fn batched_final_logits_match_single_runs() {
    let mut r = rng(5);
    let p = small_model(12);
    let seqs: Vec<Vec<usize>> = (0..6).map(|_| random_tokens(&mut r, 7, 12)).collect();
    let batched = final_logits(&p, &seqs).unwrap();
    for (b, s) in seqs.iter().enumerate() {
        let single = forward(&p, s).unwrap();
        let diff = batched
            .row(b)
            .iter()
            .zip(single.row(6))
            .map(|(a, c)| (a - c).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5);
    }
}

#[test]
fn toy_config_has_thirty_six_components() {
    let cfg = ModelConfig::toy(18, 16);
    let ids = enumerate_components(&cfg);
    assert_eq!(ids.len(), 36);
    assert_eq!(ids[0].to_string(), "h0.0");
    assert_eq!(ids[8].to_string(), "mlp0");
    assert_eq!(ids[35].to_string(), "mlp3");
}
