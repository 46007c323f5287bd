mod common;

use advsdf_core::advtrain::loss_gradients;
use advsdf_core::diffcore::{Graph, Tensor, Var};
use advsdf_core::featpipe::{attend_pool, macro_encode, AttentionParams, LstmParams};
use common::{micro, numeric_gradients, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares reverse-mode gradients of `build` against central differences.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().enumerate().map(|(k, t)| g.leaf(format!("x{k}"), t.clone())).collect();
        let out = build(&mut g, &vars);
        (g.value(out).item().unwrap(), g.backward(out).unwrap(), vars)
    };
    let (_, grads, vars) = eval(&inputs);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        for j in 0..t.len() {
            let bump = |d: f64| {
                let mut xs = inputs.clone();
                let mut data = xs[k].data().to_vec();
                data[j] += d;
                xs[k] = Tensor::new(t.shape().to_vec(), data).unwrap();
                eval(&xs).0
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let e = rel_err(analytic.data()[j], numeric, 1e-6);
            assert!(e < 1e-6, "input {k} entry {j}: analytic {} numeric {numeric}", analytic.data()[j]);
        }
    }
}

#[test]
fn full_pipeline_matches_finite_differences() {
    let m = micro(11);
    let lambda = 1e-3;
    let (_, analytic) = loss_gradients(&m.model, &m.batch, lambda).unwrap();
    let numeric = numeric_gradients(&m.model, &m.batch, lambda, 1e-6);
    assert_eq!(analytic.len(), numeric.len());
    for ((name, a), n) in analytic.iter().zip(&numeric) {
        assert!(a.data().iter().any(|v| *v != 0.0), "{name} receives no gradient");
        for (j, (x, y)) in a.data().iter().zip(n).enumerate() {
            let e = rel_err(*x, *y, 1e-7);
            assert!(e < 1e-5, "{name}[{j}]: analytic {x}, numeric {y}, rel {e}");
        }
    }
    let names: Vec<&str> = analytic.iter().map(|(n, _)| n.as_str()).collect();
    for required in ["attention.W", "attention.b", "attention.v", "lstm.W_i", "lstm.W_f", "lstm.W_o", "lstm.W_g", "cond.W1"] {
        assert!(names.contains(&required), "{required} missing");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let p = g.mul(d, v[1]).unwrap();
        let t = g.tanh(p).unwrap();
        let q = g.sigmoid(t).unwrap();
        let r = g.scale_shift(q, 1.7, -0.3).unwrap();
        g.sq_norm(r).unwrap()
    });
    // keep relu inputs away from the kink
    let shifted = Tensor::new(vec![3, 4], a.data().iter().map(|x| x + x.signum() * 0.1).collect()).unwrap();
    check(vec![shifted], |g, v| {
        let r = g.relu(v[0]).unwrap();
        let m = g.mean(r).unwrap();
        g.scale(m, 3.0).unwrap()
    });
}

#[test]
fn linear_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, w, b, c) = (
        random(&mut rng, &[5, 3]),
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[4]),
        random(&mut rng, &[3, 2]),
    );
    check(vec![x.clone(), w, b], |g, v| {
        let y = g.affine(v[0], v[1], Some(v[2])).unwrap();
        let t = g.tanh(y).unwrap();
        g.sq_norm(t).unwrap()
    });
    check(vec![x, c], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        let r = g.reshape(y, &[10]).unwrap();
        let s = g.softmax(r).unwrap();
        let l = g.sq_norm(s).unwrap();
        g.scale(l, 10.0).unwrap()
    });
}

#[test]
fn row_and_segment_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, s, y, z) = (
        random(&mut rng, &[6, 3]),
        random(&mut rng, &[6]),
        random(&mut rng, &[6, 2]),
        random(&mut rng, &[4, 3]),
    );
    let seg = [0, 0, 2, 2, 2, 1];
    check(vec![x.clone(), s.clone()], |g, v| {
        let a = g.segment_softmax(v[1], &seg, 3).unwrap();
        let w = g.scale_rows(v[0], a).unwrap();
        let p = g.segment_sum(w, &seg, 4).unwrap();
        let t = g.tanh(p).unwrap();
        g.sq_norm(t).unwrap()
    });
    check(vec![x, y, z], |g, v| {
        let c = g.concat(&[v[0], v[1]]).unwrap();
        let picked = g.gather_rows(v[2], &[3, 0, 0, 1, 3, 2]).unwrap();
        let c2 = g.concat(&[c, picked]).unwrap();
        let sm = g.softmax(c2).unwrap();
        let t = g.mul(sm, sm).unwrap();
        let tot = g.sum(t).unwrap();
        g.scale(tot, 5.0).unwrap()
    });
    check(vec![s.clone(), random(&mut rng, &[4])], |g, v| {
        let c = g.concat(&[v[0], v[1]]).unwrap();
        let t = g.tanh(c).unwrap();
        g.sq_norm(t).unwrap()
    });
}

#[test]
fn backward_requires_a_scalar() {
    let mut g = Graph::new();
    let x = g.leaf("x", Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(g.backward(x).is_err());
}

#[test]
fn attention_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = AttentionParams::init(&mut rng, 5, 3);
    let p = AttentionParams {
        b: random(&mut rng, &[5]),
        ..p
    };
    let e: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let (pooled, alpha) = attend_pool(&e, &p).unwrap().unwrap();
    let scores: Vec<f64> = e
        .iter()
        .map(|row| {
            (0..5)
                .map(|a| {
                    let z: f64 = (0..3).map(|j| p.w.get(a, j) * row[j]).sum::<f64>() + p.b.data()[a];
                    p.v.data()[a] * z.tanh()
                })
                .sum()
        })
        .collect();
    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let tot: f64 = ex.iter().sum();
    for k in 0..4 {
        assert!((alpha[k] - ex[k] / tot).abs() < 1e-14);
    }
    for j in 0..3 {
        let want: f64 = (0..4).map(|k| ex[k] / tot * e[k][j]).sum();
        assert!((pooled[j] - want).abs() < 1e-13);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM cell loop.
fn lstm_oracle(window: &[Vec<f64>], p: &LstmParams) -> Vec<f64> {
    let hdim = p.hidden();
    let (mut h, mut c) = (vec![0.0; hdim], vec![0.0; hdim]);
    for x in window {
        let xh: Vec<f64> = x.iter().chain(&h).cloned().collect();
        let gate = |w: &Tensor, b: &Tensor, r: usize| (0..xh.len()).map(|j| w.get(r, j) * xh[j]).sum::<f64>() + b.data()[r];
        let mut nh = vec![0.0; hdim];
        for r in 0..hdim {
            let i = sigmoid(gate(&p.w_i, &p.b_i, r));
            let f = sigmoid(gate(&p.w_f, &p.b_f, r));
            let o = sigmoid(gate(&p.w_o, &p.b_o, r));
            let g = gate(&p.w_g, &p.b_g, r).tanh();
            c[r] = f * c[r] + i * g;
            nh[r] = o * c[r].tanh();
        }
        h = nh;
    }
    h
}

#[test]
fn lstm_matches_scalar_oracle_and_is_order_sensitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = LstmParams::init(&mut rng, 3, 4);
    p.b_f = random(&mut rng, &[4]);
    p.b_g = random(&mut rng, &[4]);
    let window: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let h = macro_encode(&window, &p).unwrap();
    let want = lstm_oracle(&window, &p);
    for (a, b) in h.iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
    let reversed: Vec<Vec<f64>> = window.iter().rev().cloned().collect();
    let hr = macro_encode(&reversed, &p).unwrap();
    assert!(h.iter().zip(&hr).any(|(a, b)| (a - b).abs() > 1e-6));
    assert_eq!(macro_encode(&window, &LstmParams::zeros(3, 4)).unwrap(), vec![0.0; 4]);
}
