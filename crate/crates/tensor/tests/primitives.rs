use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simplefold_tensor::gradcheck::{grad_check, grad_check_params, spread_coords};
use simplefold_tensor::nn::{self, swiglu_hidden, AdaLn, Linear, SelfAttention, SwiGlu};
use simplefold_tensor::{Graph, Init, ParamTree, Result, RopeFreqs, RopeTable, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CONFIGS: u64 = 100;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random projection turning any output into a scalar, so every output
/// element contributes a distinct weight to the checked gradient.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_unary(
    name: &str,
    shape: &[usize],
    f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
) {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, shape);
        let report = grad_check(
            |g, v| {
                let y = (&f)(g, v)?;
                project(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(
            report.max_rel_err < TOL,
            "{name} seed {seed}: rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    check_unary("silu", &[3, 4], |g, x| Ok(g.silu(x)));
    check_unary("square", &[3, 4], |g, x| Ok(g.square(x)));
    check_unary("scale", &[5], |g, x| Ok(g.scale(x, -2.5)));
    check_unary("mul-self", &[2, 3], |g, x| g.mul(x, x));
    check_unary("sub", &[2, 3], |g, x| {
        let y = g.square(x);
        g.sub(x, y)
    });
    check_unary("mean", &[4, 2], |g, x| Ok(g.mean(x)));
}

#[test]
fn normalization_primitives_match_finite_differences() {
    check_unary("layer_norm", &[3, 6], |g, x| Ok(g.layer_norm(x, 1e-5)));
    check_unary("head_l2_norm", &[3, 8], |g, x| g.head_l2_norm(x, 2, 1e-6));
    check_unary("softmax", &[3, 5], |g, x| Ok(g.softmax_rows(x)));
}

#[test]
fn structural_primitives_match_finite_differences() {
    let seg = Arc::new(vec![0, 0, 1, 2, 2, 2]);
    check_unary("segment_mean", &[6, 3], move |g, x| g.segment_mean(x, seg.clone(), 3));
    let idx = Arc::new(vec![2, 0, 0, 1]);
    check_unary("gather_rows", &[3, 2], move |g, x| g.gather_rows(x, idx.clone()));
    check_unary("concat", &[3, 2], |g, x| {
        let y = g.square(x);
        g.concat_cols(&[x, y, x])
    });
    check_unary("slice", &[3, 6], |g, x| g.slice_cols(x, 1, 3));
    check_unary("reshape", &[3, 4], |g, x| g.reshape(x, &[2, 6]));
}

#[test]
fn linear_algebra_primitives_match_finite_differences() {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let r = rand_tensor(&mut rng, &[3]);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let rep = grad_check(
            |g, xv| {
                let wv = g.constant(w.clone());
                let rv = g.constant(r.clone());
                let y = g.matmul(xv, wv)?;
                let y = g.mul_row(y, rv)?;
                let y = g.add_row(y, rv)?;
                project(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "matmul wrt x seed {seed}: {}", rep.max_rel_err);
        // gradients with respect to the right operand and the broadcast row
        let mut tree = ParamTree::new();
        tree.insert("w", w.clone()).unwrap();
        tree.insert("r", r.clone()).unwrap();
        tree.insert("s", Tensor::scalar(rng.random_range(0.5..2.0))).unwrap();
        let coords = spread_coords(&tree, 12);
        let rep = grad_check_params(
            |g| {
                let xv = g.constant(x.clone());
                let wv = g.param("w")?;
                let rv = g.param("r")?;
                let sv = g.param("s")?;
                let y = g.matmul(xv, wv)?;
                let y = g.mul_row(y, rv)?;
                let y = g.add_row(y, rv)?;
                let y = g.scale_by(y, sv)?;
                project(g, y, seed)
            },
            &tree,
            &coords,
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "matmul params seed {seed}: {}", rep.max_rel_err);
    }
}

#[test]
fn linear_gradient_is_weight_transpose_times_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let x = rand_tensor(&mut rng, &[2, 4]);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.constant(w.clone());
    let y = g.matmul(xv, wv).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(xv).unwrap();
    for r in 0..2 {
        for i in 0..4 {
            let want: f64 = (0..3).map(|j| w.data()[i * 3 + j]).sum();
            assert!((grad[r * 4 + i] - want).abs() < 1e-12);
        }
    }
    let rep = grad_check(
        |g, xv| {
            let wv = g.constant(w.clone());
            let y = g.matmul(xv, wv)?;
            Ok(g.sum(y))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(rep.max_rel_err < TOL);
}

#[test]
fn attention_and_rotary_match_finite_differences() {
    let n = 5;
    let heads = 2;
    let dh = 4;
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rand_tensor(&mut rng, &[n, heads * dh]);
        let v = rand_tensor(&mut rng, &[n, heads * dh]);
        let q = rand_tensor(&mut rng, &[n, heads * dh]);
        let mut mask = Tensor::<f64>::zeros(&[n, n]);
        mask.data_mut()[1] = -1e9;
        mask.data_mut()[n * 3 + 4] = -1e9;
        let pos: Vec<f64> = (0..n).map(|i| i as f64 * 1.3).collect();
        let table = Arc::new(RopeTable::one_d(&pos, dh, RopeFreqs::default()).unwrap());
        let rep = grad_check(
            |g, qv| {
                let kv = g.constant(k.clone());
                let vv = g.constant(v.clone());
                let qr = g.rotary(qv, table.clone(), heads)?;
                let o = g.attention(qr, kv, vv, Some(&mask), heads)?;
                project(g, o, seed)
            },
            &q,
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "attention wrt q seed {seed}: {}", rep.max_rel_err);
        let rep = grad_check(
            |g, kv| {
                let qv = g.constant(q.clone());
                let vv = g.input(v.clone());
                let vv = g.square(vv);
                let kr = g.rotary(kv, table.clone(), heads)?;
                let o = g.attention(qv, kr, vv, Some(&mask), heads)?;
                project(g, o, seed)
            },
            &k,
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "attention wrt k seed {seed}: {}", rep.max_rel_err);
        let rep = grad_check(
            |g, vv| {
                let qv = g.constant(q.clone());
                let kv = g.constant(k.clone());
                let o = g.attention(qv, kv, vv, None, heads)?;
                project(g, o, seed)
            },
            &v,
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "attention wrt v seed {seed}: {}", rep.max_rel_err);
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let targets = [Some(1), None, Some(3), Some(0)];
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 5]);
        let rep = grad_check(|g, v| g.cross_entropy(v, &targets), &x, H).unwrap();
        assert!(rep.max_rel_err < TOL, "seed {seed}: {}", rep.max_rel_err);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 7], 3.25));
    let y = g.layer_norm(x, 1e-5);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[6, 9]).map(|v| v * 20.0));
    let y = g.softmax_rows(x);
    for row in g.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn diagonal_mask_returns_values() {
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mask = Tensor::<f64>::full(&[n, n], -1e9);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[n, 8]));
    let k = g.constant(rand_tensor(&mut rng, &[n, 8]));
    let vt = rand_tensor(&mut rng, &[n, 8]);
    let v = g.constant(vt.clone());
    let o = g.attention(q, k, v, Some(&mask), 2).unwrap();
    for (a, b) in g.value(o).data().iter().zip(vt.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let w = g.attention_weights(o).unwrap();
    for h in 0..2 {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    assert!(w[h * n * n + i * n + j] < 1e-30);
                }
            }
        }
    }
}

#[test]
fn two_token_attention_matches_closed_form() {
    // single head, d = 1: logits q_i k_j, weights are a two-way softmax
    let (q, k, v): ([f64; 2], [f64; 2], [f64; 2]) = ([0.5, -1.0], [2.0, 0.3], [1.0, -3.0]);
    let mut g = Graph::<f64>::new();
    let qv = g.constant(Tensor::from_f64(&[2, 1], &q).unwrap());
    let kv = g.constant(Tensor::from_f64(&[2, 1], &k).unwrap());
    let vv = g.constant(Tensor::from_f64(&[2, 1], &v).unwrap());
    let o = g.attention(qv, kv, vv, None, 1).unwrap();
    for i in 0..2 {
        let a = (q[i] * k[0]).exp();
        let b = (q[i] * k[1]).exp();
        let want = (a * v[0] + b * v[1]) / (a + b);
        assert!((g.value(o).data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn attention_is_invariant_to_key_permutation() {
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let q = rand_tensor(&mut rng, &[n, 8]);
    let k = rand_tensor(&mut rng, &[n, 8]);
    let v = rand_tensor(&mut rng, &[n, 8]);
    let mut mask = Tensor::<f64>::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if (i + 2 * j) % 5 == 0 && i != j {
                mask.data_mut()[i * n + j] = -1e9;
            }
        }
    }
    let perm = [3, 0, 5, 1, 4, 2];
    let permute_rows = |t: &Tensor<f64>| {
        let mut d = Vec::new();
        for &p in &perm {
            d.extend_from_slice(t.row(p));
        }
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let mut pmask = Tensor::<f64>::zeros(&[n, n]);
    for i in 0..n {
        for (jj, &j) in perm.iter().enumerate() {
            pmask.data_mut()[i * n + jj] = mask.data()[i * n + j];
        }
    }
    let run = |k: Tensor<f64>, v: Tensor<f64>, m: &Tensor<f64>| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k), g.constant(v));
        let o = g.attention(qv, kv, vv, Some(m), 2).unwrap();
        g.value(o).clone()
    };
    let a = run(k.clone(), v.clone(), &mask);
    let b = run(permute_rows(&k), permute_rows(&v), &pmask);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn swiglu_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tree = ParamTree::<f64>::new();
    let d = 12;
    let mlp = SwiGlu::new(&mut tree, "mlp", d, swiglu_hidden(d), &mut rng).unwrap();
    let mut g = Graph::new().bind(&tree, false);
    let x = g.constant(Tensor::zeros(&[3, d]));
    let y = mlp.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = rand_tensor(&mut rng, &[3, d]);
    let coords = spread_coords(&tree, 10);
    let rep = grad_check_params(
        |g| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, xv)?;
            project(g, y, 9)
        },
        &tree,
        &coords,
        H,
    )
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{}", rep.max_rel_err);
}

#[test]
fn swiglu_hidden_width_keeps_ffn_parameter_parity() {
    for d in [8usize, 16, 64, 96, 128, 256, 768] {
        let h = swiglu_hidden(d);
        assert_eq!(h % 8, 0);
        let swiglu = 3 * d * h;
        let ffn = 2 * d * 4 * d;
        // nearest multiple of 8 is at most 4 away from 8d/3
        assert!((swiglu as i64 - ffn as i64).abs() <= (3 * d * 4) as i64, "d={d}");
    }
    assert_eq!(swiglu_hidden(64), 168);
    assert_eq!(swiglu_hidden(128), 344);
}

fn block_like(
    g: &mut Graph<'_, f64>,
    ada: &AdaLn,
    attn: &SelfAttention,
    x: Var,
    cond: Var,
) -> Result<Var> {
    let m = ada.forward(g, cond)?;
    let h = nn::modulate(g, x, &m[0])?;
    let a = attn.forward(g, h, None, None)?;
    nn::gated_residual(g, x, a, m[0].gate)
}

#[test]
fn adaln_starts_as_identity_and_conditions_after_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tree = ParamTree::<f64>::new();
    let (d, dc) = (8, 6);
    let ada = AdaLn::new(&mut tree, "ada", dc, d, 1, &mut rng).unwrap();
    let attn = SelfAttention::new(&mut tree, "attn", d, 2, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[4, d]);
    let c1 = rand_tensor(&mut rng, &[1, dc]);
    let c2 = rand_tensor(&mut rng, &[1, dc]);

    let run = |tree: &ParamTree<f64>, c: &Tensor<f64>| {
        let mut g = Graph::new().bind(tree, false);
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        let y = block_like(&mut g, &ada, &attn, xv, cv).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&tree, &c1), x);

    // perturb the modulation weights as training would
    for (path, t) in tree.iter_mut() {
        if path.starts_with("ada") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    assert_ne!(run(&tree, &c1), run(&tree, &c2));

    // gradient with respect to the conditioning vector through a bound graph
    let mut cond_tree = tree.clone();
    cond_tree.insert("cond", c1.clone()).unwrap();
    let coords: Vec<_> = (0..dc).map(|i| ("cond".to_string(), i)).collect();
    let rep = grad_check_params(
        |g| {
            let xv = g.constant(x.clone());
            let cv = g.param("cond")?;
            let y = block_like(g, &ada, &attn, xv, cv)?;
            project(g, y, 4)
        },
        &cond_tree,
        &coords,
        H,
    )
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{}", rep.max_rel_err);
}

#[test]
fn rope_zero_position_is_identity() {
    let table = RopeTable::<f64>::one_d(&[0.0, 0.0], 8, RopeFreqs::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[2, 16]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.rotary(xv, Arc::new(table), 2).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn rope_quarter_turn() {
    let freqs = RopeFreqs {
        scale: std::f64::consts::FRAC_PI_2,
        base: 10_000.0,
    };
    let table = RopeTable::<f64>::one_d(&[1.0], 2, freqs).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::from_f64(&[1, 2], &[0.3, -0.7]).unwrap());
    let y = g.rotary(xv, Arc::new(table), 1).unwrap();
    let out = g.value(y).data();
    assert!((out[0] - 0.7).abs() < 1e-12 && (out[1] - 0.3).abs() < 1e-12);
}

#[test]
fn rope_rejects_odd_dims() {
    assert!(RopeTable::<f64>::one_d(&[1.0], 5, RopeFreqs::default()).is_err());
    assert!(RopeTable::<f64>::axial_4d(&[[0.0; 3]], &[0.0], 12, RopeFreqs::default(), RopeFreqs::default()).is_err());
}

fn rotated_dot(q: &Tensor<f64>, k: &Tensor<f64>, pm: f64, pn: f64, d: usize) -> f64 {
    let tq = Arc::new(RopeTable::one_d(&[pm], d, RopeFreqs::default()).unwrap());
    let tk = Arc::new(RopeTable::one_d(&[pn], d, RopeFreqs::default()).unwrap());
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let kv = g.constant(k.clone());
    let qr = g.rotary(qv, tq, 1).unwrap();
    let kr = g.rotary(kv, tk, 1).unwrap();
    g.value(qr)
        .data()
        .iter()
        .zip(g.value(kr).data())
        .map(|(a, b)| a * b)
        .sum()
}

#[test]
fn rope_depends_only_on_relative_position() {
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let q = rand_tensor(&mut rng, &[1, d]);
        let k = rand_tensor(&mut rng, &[1, d]);
        let m = rng.random_range(0..200) as f64;
        let n = rng.random_range(0..200) as f64;
        let c = rng.random_range(-100..100) as f64;
        let a = rotated_dot(&q, &k, m, n, d);
        let b = rotated_dot(&q, &k, m + c, n + c, d);
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn axial_rope_quarters_are_separate() {
    let d = 16;
    let coords = [[0.3, -0.2, 0.5]];
    let base = RopeTable::<f64>::axial_4d(&coords, &[2.0], d, RopeFreqs::default(), RopeFreqs::default()).unwrap();
    let moved = RopeTable::<f64>::axial_4d(&[[0.9, -0.2, 0.5]], &[2.0], d, RopeFreqs::default(), RopeFreqs::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, d]);
    let apply = |t: RopeTable<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.rotary(xv, Arc::new(t), 1).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (apply(base), apply(moved));
    for c in 0..d {
        let changed = (a.data()[c] - b.data()[c]).abs() > 1e-12;
        assert_eq!(changed, c < d / 4, "channel {c}");
    }
    let zero = RopeTable::<f64>::axial_4d(&[[0.0; 3]], &[0.0], d, RopeFreqs::default(), RopeFreqs::default()).unwrap();
    assert_eq!(apply(zero), x);
}

#[test]
fn axial_rope_commutes_with_token_permutation() {
    let d = 8;
    let coords = [[0.1, 0.2, 0.3], [-0.5, 0.0, 0.4], [0.7, -0.7, 0.0]];
    let idx = [0.0, 1.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 2 * d]);
    let perm = [2, 0, 1];
    let t = RopeTable::<f64>::axial_4d(&coords, &idx, d, RopeFreqs::default(), RopeFreqs::default()).unwrap();
    let pc: Vec<_> = perm.iter().map(|&p| coords[p]).collect();
    let pi: Vec<_> = perm.iter().map(|&p| idx[p]).collect();
    let tp = RopeTable::<f64>::axial_4d(&pc, &pi, d, RopeFreqs::default(), RopeFreqs::default()).unwrap();
    let mut px = Vec::new();
    for &p in &perm {
        px.extend_from_slice(x.row(p));
    }
    let px = Tensor::new(vec![3, 2 * d], px).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = g.constant(px);
    let y = g.rotary(xv, Arc::new(t), 2).unwrap();
    let yp = g.rotary(pv, Arc::new(tp), 2).unwrap();
    for (r, &p) in perm.iter().enumerate() {
        assert_eq!(g.value(yp).row(r), g.value(y).row(p));
    }
}

#[test]
fn grad_check_of_half_squared_norm_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[10]);
    let rep = grad_check(
        |g, v| {
            let s = g.square(v);
            let s = g.sum(s);
            Ok(g.scale(s, 0.5))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-8, "{}", rep.max_rel_err);
}

#[test]
fn grad_check_reports_relu_kink() {
    let x = Tensor::from_f64(&[3], &[0.0, 0.5, -0.5]).unwrap();
    let rep = grad_check(|g, v| {
        let r = g.relu(v);
        Ok(g.sum(r))
    }, &x, H)
    .unwrap();
    assert_eq!(rep.skipped, vec!["x[0]".to_string()]);
    assert_eq!(rep.checked, 2);
    assert!(rep.max_rel_err < 1e-8);
}

#[test]
fn frozen_trees_receive_no_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut frozen = ParamTree::<f64>::new();
    let mut live = ParamTree::<f64>::new();
    let a = Linear::new(&mut frozen, "fold", 3, 3, true, &mut rng).unwrap();
    let b = Linear::new(&mut live, "head", 3, 1, true, &mut rng).unwrap();
    let mut g = Graph::new().bind(&frozen, false).bind(&live, true);
    let x = g.constant(rand_tensor(&mut rng, &[2, 3]));
    let h = a.forward(&mut g, x).unwrap();
    let y = b.forward(&mut g, h).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grads = g.param_grads();
    assert!(grads.paths().all(|p| p.starts_with("head")));
    assert_eq!(grads.len(), 2);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, a).is_err());
    assert!(g.matmul(a, b).is_ok());
    let mut tree = ParamTree::<f64>::new();
    tree.init("w", &[2, 2], Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(tree.init("w", &[2, 2], Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    let s = g.sum(a);
    let _ = s;
    assert!(g.backward(a).is_err());
}
