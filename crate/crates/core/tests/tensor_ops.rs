use circuitseek::tensor::{grad_check, Tape, Tensor, Var};
use circuitseek::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

fn brute_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f64;
            for t in 0..k {
                s += a[i * k + t] as f64 * b[t * n + j] as f64;
            }
            c[i * n + j] = s as f32;
        }
    }
    c
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::<f32>::new();
    let i3 = tape.constant(Tensor::eye(3));
    let b = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let bv = tape.constant(b.clone());
    let c = tape.matmul(i3, bv).unwrap();
    assert_eq!(tape.value(c), &b);

    let a = tape.constant(Tensor::new([1, 1], vec![2.0]).unwrap());
    let b = tape.constant(Tensor::new([1, 1], vec![3.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[6.0]);
}

#[test]
fn matmul_matches_brute_force() {
    let a = Tensor::<f32>::randn([4, 5], 1.0, &mut rng(1));
    let b = Tensor::<f32>::randn([5, 3], 1.0, &mut rng(2));
    let expected = brute_matmul(a.data(), b.data(), 4, 5, 3);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(av, bv).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([4]));
    let y = tape.softmax_lastdim(x);
    assert_eq!(tape.value(y).data(), &[0.25; 4]);

    let x = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
    let y = tape.softmax_lastdim(x);
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-6 && d[1] < 1e-6 && d[1].is_finite());

    let raw: Vec<f32> = (0..7).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
    let x = tape.constant(Tensor::from_vec(raw.clone()));
    let y = tape.softmax_lastdim(x);
    let z: f64 = raw.iter().map(|&v| (v as f64).exp()).sum();
    for (p, &v) in tape.value(y).data().iter().zip(&raw) {
        assert!((*p as f64 - (v as f64).exp() / z).abs() < 1e-6);
    }
}

#[test]
fn rmsnorm_cases() {
    let mut tape = Tape::<f32>::new();
    let gain = tape.constant(Tensor::ones([5]));
    let x = tape.constant(Tensor::full([5], 3.0));
    let y = tape.rmsnorm(x, gain, 1e-12).unwrap();
    assert!(tape.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-6));

    let x = tape.constant(Tensor::zeros([5]));
    let y = tape.rmsnorm(x, gain, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let row: Vec<f32> = vec![0.3, -1.2, 2.5, 0.0, 0.7];
    let g: Vec<f32> = vec![1.0, 0.5, -2.0, 3.0, 1.5];
    let x = tape.constant(Tensor::from_vec(row.clone()));
    let gv = tape.constant(Tensor::from_vec(g.clone()));
    let y = tape.rmsnorm(x, gv, 1e-5).unwrap();
    let ms: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 5.0;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    for ((o, &v), &w) in tape.value(y).data().iter().zip(&row).zip(&g) {
        assert!((*o as f64 - v as f64 * inv * w as f64).abs() < 1e-6);
    }
}

#[test]
fn silu_embed_and_add_backward() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0]));
    let y = tape.silu(x);
    assert_eq!(tape.value(y).data(), &[0.0]);

    let table = tape.constant(Tensor::eye(5));
    let e = tape.embed(table, &[3]).unwrap();
    assert_eq!(tape.value(e).data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    assert!(matches!(
        tape.embed(table, &[5]),
        Err(Error::Index { index: 5, bound: 5, .. })
    ));

    let mut tape = Tape::<f32>::new();
    let a = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.param(Tensor::from_vec(vec![3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    let w = tape.constant(Tensor::from_vec(vec![5.0, -7.0]));
    let d = tape.mul(c, w).unwrap();
    let s = tape.sum(d);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[5.0, -7.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[5.0, -7.0]);
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::<f32>::new();
    let l = tape.constant(Tensor::zeros([10]));
    let ce = tape.cross_entropy(l, &[4]).unwrap();
    assert!((tape.value(ce).data()[0] - 10f32.ln()).abs() < 1e-6);

    let mut big = vec![0.0f32; 10];
    big[2] = 1000.0;
    let l = tape.constant(Tensor::from_vec(big));
    let ce = tape.cross_entropy(l, &[2]).unwrap();
    assert!(tape.value(ce).data()[0].abs() < 1e-6);

    let raw: Vec<f32> = (0..10).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.9).collect();
    let l = tape.constant(Tensor::from_vec(raw.clone()));
    let ce = tape.cross_entropy(l, &[6]).unwrap();
    let lse = raw.iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
    assert!((tape.value(ce).data()[0] as f64 - (lse - raw[6] as f64)).abs() < 1e-5);

    assert!(matches!(
        tape.cross_entropy(l, &[10]),
        Err(Error::Index { .. })
    ));
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));

    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));

    tape.reset();
    let c = tape.constant(Tensor::scalar(1.0));
    let s = tape.sum(c);
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
}

#[test]
fn blend_gradient_is_value_difference() {
    let v = vec![1.0f32, -2.0, 0.5];
    let va = vec![0.25f32, 3.0, -1.0];
    let mut tape = Tape::<f32>::new();
    let w = tape.param(Tensor::from_vec(vec![0.3]));
    let vv = tape.constant(Tensor::new([1, 3], v.clone()).unwrap());
    let av = tape.constant(Tensor::new([1, 3], va.clone()).unwrap());
    let out = tape.blend(vv, w, 0, av, &[0]).unwrap();
    let s = tape.sum(out);
    tape.backward(s).unwrap();
    let expected: f32 = v.iter().zip(&va).map(|(a, b)| a - b).sum();
    assert!((tape.grad(w).unwrap().data()[0] - expected).abs() < 1e-6);
}

#[test]
fn blend_rejects_duplicate_rows() {
    let mut tape = Tape::<f32>::new();
    let w = tape.param(Tensor::from_vec(vec![0.3]));
    let v = tape.constant(Tensor::zeros([2, 3]));
    let a = tape.constant(Tensor::zeros([2, 3]));
    assert!(tape.blend(v, w, 0, a, &[1, 1]).is_err());
}

// ---- gradient checks ---------------------------------------------------

const STEP: f64 = 1e-3;

fn check(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> f64 {
    grad_check(f, x, STEP).unwrap().max_rel_error
}

#[test]
fn grad_check_quadratic() {
    let x = rand_tensor(&[6], 0);
    let err = check(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &x,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_matmul_chain() {
    let b = rand_tensor(&[4, 3], 11);
    let c = rand_tensor(&[3, 2], 12);
    let x = rand_tensor(&[5, 4], 13);
    let err = check(
        |t, x| {
            let (b, c) = (t.constant(b.clone()), t.constant(c.clone()));
            let h = t.matmul(x, b)?;
            let h = t.matmul(h, c)?;
            let sq = t.mul(h, h)?;
            Ok(t.sum(sq))
        },
        &x,
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_rmsnorm_silu_chain() {
    let g = rand_tensor(&[6], 21);
    let x = rand_tensor(&[3, 6], 22);
    let err = check(
        |t, x| {
            let g = t.constant(g.clone());
            let h = t.rmsnorm(x, g, 1e-5)?;
            let h = t.silu(h);
            let sq = t.mul(h, h)?;
            Ok(t.mean(sq))
        },
        &x,
    );
    assert!(err < 1e-3, "{err}");
}

/// Builds a scalar from `y` whose gradient is generic in every coordinate.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let r = rand_tensor(&shape, seed ^ 0xABCD);
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

type OpCase = (&'static str, Vec<usize>, fn(&mut Tape<f64>, Var, u64) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul_lhs", vec![3, 4], |t, x, s| {
            let b = t.constant(rand_tensor(&[4, 5], s + 1));
            t.matmul(x, b)
        }),
        ("matmul_rhs", vec![4, 5], |t, x, s| {
            let a = t.constant(rand_tensor(&[3, 4], s + 1));
            t.matmul(a, x)
        }),
        ("add", vec![2, 3], |t, x, s| {
            let b = t.constant(rand_tensor(&[2, 3], s + 1));
            t.add(x, b)
        }),
        ("sub", vec![2, 3], |t, x, s| {
            let b = t.constant(rand_tensor(&[2, 3], s + 1));
            t.sub(b, x)
        }),
        ("mul", vec![2, 3], |t, x, _| t.mul(x, x)),
        ("affine", vec![5], |t, x, _| Ok(t.affine(x, -1.5, 0.25))),
        ("silu", vec![7], |t, x, _| Ok(t.silu(x))),
        ("sqrt", vec![6], |t, x, _| {
            let sq = t.mul(x, x)?;
            let pos = t.affine(sq, 1.0, 0.5);
            Ok(t.sqrt(pos))
        }),
        ("softmax", vec![3, 5], |t, x, _| Ok(t.softmax_lastdim(x))),
        ("rmsnorm_x", vec![3, 8], |t, x, s| {
            let g = t.constant(rand_tensor(&[8], s + 1));
            t.rmsnorm(x, g, 1e-5)
        }),
        ("rmsnorm_gain", vec![8], |t, g, s| {
            let x = t.constant(rand_tensor(&[3, 8], s + 1));
            t.rmsnorm(x, g, 1e-5)
        }),
        ("embed", vec![6, 4], |t, x, _| t.embed(x, &[1, 4, 1, 0])),
        ("cross_entropy", vec![3, 6], |t, x, _| {
            let ce = t.cross_entropy(x, &[0, 5, 2])?;
            Ok(t.scale(ce, 2.0))
        }),
        ("mean", vec![4, 2], |t, x, _| {
            let sq = t.mul(x, x)?;
            Ok(t.mean(sq))
        }),
        ("select_rows", vec![5, 3], |t, x, _| t.select_rows(x, &[4, 0, 4])),
        ("gather", vec![4, 3], |t, x, _| t.gather(x, &[(0, 2), (3, 1), (0, 2)])),
        ("attention_head", vec![2 * 5, 3 * 8], |t, x, _| {
            let h0 = t.attention_head(x, 1, 2, 2, 5)?;
            let h1 = t.attention_head(x, 0, 2, 2, 5)?;
            t.mul(h0, h1)
        }),
        ("blend_value", vec![4, 3], |t, x, s| {
            let w = t.constant(Tensor::from_vec(vec![0.9, 0.35]));
            let a = t.constant(rand_tensor(&[2, 3], s + 1));
            t.blend(x, w, 1, a, &[3, 1])
        }),
        ("blend_weight", vec![3], |t, w, s| {
            let v = t.constant(rand_tensor(&[4, 3], s + 1));
            let a = t.constant(rand_tensor(&[2, 3], s + 2));
            let y = t.blend(v, w, 2, a, &[0, 2])?;
            t.mul(y, y)
        }),
        ("blend_alt", vec![2, 3], |t, a, s| {
            let v = t.constant(rand_tensor(&[4, 3], s + 1));
            let w = t.constant(Tensor::from_vec(vec![0.4]));
            t.blend(v, w, 0, a, &[1, 3])
        }),
    ]
}

#[test]
fn every_op_passes_grad_check_on_ten_seeds() {
    for (name, shape, op) in op_cases() {
        for seed in 0..10u64 {
            let x = rand_tensor(&shape, 100 + seed);
            let err = check(
                |t, x| {
                    let y = op(t, x, seed)?;
                    project(t, y, seed)
                },
                &x,
            );
            assert!(err < 1e-3, "{name} seed {seed}: max relative error {err}");
        }
    }
}

#[test]
fn f32_and_f64_tapes_agree() {
    let x = Tensor::<f32>::randn([3, 4], 1.0, &mut rng(5));
    let b = Tensor::<f32>::randn([4, 4], 1.0, &mut rng(6));
    let run32 = {
        let mut t = Tape::<f32>::new();
        let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
        let h = t.matmul(x, b).unwrap();
        let h = t.softmax_lastdim(h);
        t.value(h).clone()
    };
    let run64 = {
        let mut t = Tape::<f64>::new();
        let (x, b) = (t.constant(x.cast()), t.constant(b.cast()));
        let h = t.matmul(x, b).unwrap();
        let h = t.softmax_lastdim(h);
        t.value(h).clone()
    };
    assert!(run32.cast::<f64>().max_abs_diff(&run64) < 1e-6);
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut r = rng(77);
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::randn([6, 24], 1.0, &mut r));
        let w = t.constant(Tensor::randn([24, 24], 0.3, &mut r));
        let g = t.constant(Tensor::ones([24]));
        let h = t.rmsnorm(x, g, 1e-5).unwrap();
        let qkv = t.matmul(h, w).unwrap();
        let qkv = t.select_rows(qkv, &[0, 1, 2, 3, 4, 5]).unwrap();
        let qkv72 = t.constant(Tensor::randn([6, 24], 1.0, &mut r));
        let sum = t.add(qkv, qkv72).unwrap();
        let a = t.attention_head(sum, 0, 2, 2, 3).unwrap();
        let s = t.sum(a);
        t.backward(s).unwrap();
        (t.value(s).data()[0].to_bits(), t.grad(x).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f32..50.0, 1..40)) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_vec(vals));
        let y = t.softmax_lastdim(x);
        let s: f32 = t.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(t.value(y).is_finite());
    }

    #[test]
    fn matmul_agrees_with_brute_force(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a: Vec<f32> = (0..m * k).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let expected = brute_matmul(&a, &b, m, k, n);
        let mut t = Tape::<f32>::new();
        let av = t.constant(Tensor::new([m, k], a).unwrap());
        let bv = t.constant(Tensor::new([k, n], b).unwrap());
        let c = t.matmul(av, bv).unwrap();
        for (x, y) in t.value(c).data().iter().zip(&expected) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }
}
