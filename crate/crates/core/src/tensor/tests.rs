use super::*;
use crate::gradcheck::check_params;
use crate::Error;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
    let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(1, 0);
    let (a, b) = (randn(&mut rng, &[4, 3]), randn(&mut rng, &[3, 5]));
    let mut oracle = vec![0.0; 20];
    for i in 0..4 {
        for j in 0..5 {
            for k in 0..3 {
                oracle[i * 5 + j] += a.at(&[i, k]) * b.at(&[k, j]);
            }
        }
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let p = g.matmul(va, vb).unwrap();
    close(g.value(p).data(), &oracle, 1e-12);
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[4], vec![0.0; 4]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y).data(), &[0.25; 4], 1e-15);

    let x = g.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y).data(), &[0.25, 0.75], 1e-12);
}

#[test]
fn softmax_shift_invariance_and_row_sums() {
    let mut rng = Rng::new(2, 0);
    for _ in 0..20 {
        let x = randn(&mut rng, &[3, 7]);
        let c = rng.normal() * 10.0;
        let shifted = Tensor::from_fn(&[3, 7], |i| x.data()[i] + c);
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(shifted));
        let (ya, yb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
        close(g.value(ya).data(), g.value(yb).data(), 1e-12);
        for row in g.value(ya).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn softmax_large_logits_stay_finite() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[3], vec![1000.0, 1001.0, 999.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert!(g.value(y).all_finite());
}

fn ln_params(n: usize) -> (Tensor<f64>, Tensor<f64>) {
    (Tensor::from_fn(&[n], |_| 1.0), Tensor::zeros(&[n]))
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let (gain, bias) = ln_params(4);
    let (gv, bv) = (g.constant(gain), g.constant(bias));
    let x = g.constant(Tensor::new(&[4], vec![3.0; 4]).unwrap());
    let y = g.layer_norm(x, gv, bv, 1e-5).unwrap();
    close(g.value(y).data(), &[0.0; 4], 1e-12);

    let (gain, bias) = ln_params(2);
    let (gv, bv) = (g.constant(gain), g.constant(bias));
    let x = g.constant(Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gv, bv, 1e-12).unwrap();
    close(g.value(y).data(), &[1.0, -1.0], 1e-9);
}

#[test]
fn layer_norm_moments() {
    let mut rng = Rng::new(3, 0);
    let x = Tensor::from_fn(&[32], |_| 5.0 + 3.0 * rng.normal());
    let mut g = Graph::<f64>::new();
    let (gain, bias) = ln_params(32);
    let (gv, bv) = (g.constant(gain), g.constant(bias));
    let xv = g.constant(x);
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 32.0;
    let var = d.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / 32.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-3);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[1, 52]));
    let l = g.cross_entropy(logits, &[7]).unwrap();
    assert!((g.value(l).item() - 52f64.ln()).abs() < 1e-12);

    let logits = g.constant(Tensor::new(&[1, 2], vec![0.0, 20.0]).unwrap());
    let l = g.cross_entropy(logits, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-8);

    let logits = g.constant(Tensor::zeros(&[1, 10]));
    assert!(matches!(g.cross_entropy(logits, &[10]), Err(Error::Index { .. })));
}

#[test]
fn cross_entropy_matches_log_softmax_oracle() {
    let mut rng = Rng::new(4, 0);
    let logits = randn(&mut rng, &[6, 9]);
    let targets: Vec<usize> = (0..6).map(|_| rng.below(9)).collect();
    let mut oracle = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = (0..9).map(|j| logits.at(&[r, j])).collect();
        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
        oracle += lse - row[t];
    }
    oracle /= 6.0;
    let mut g = Graph::new();
    let lv = g.constant(logits);
    let l = g.cross_entropy(lv, &targets).unwrap();
    assert!((g.value(l).item() - oracle).abs() < 1e-10);
}

#[test]
fn mse_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let l = g.mse(p, &Tensor::new(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(g.value(l).item(), 12.5);
    let same = Tensor::new(&[2], vec![1.5, -2.0]).unwrap();
    let p = g.constant(same.clone());
    let l = g.mse(p, &same).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let mut rng = Rng::new(5, 0);
    let (a, b) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[3, 4]));
    let oracle = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 12.0;
    let p = g.constant(a);
    let l = g.mse(p, &b).unwrap();
    assert!((g.value(l).item() - oracle).abs() < 1e-12);
    let p = g.constant(Tensor::zeros(&[2]));
    assert!(g.mse(p, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn backward_square() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0], "repeated backward accumulates");
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn dropout_modes() {
    let mut rng = Rng::new(6, 0);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[100], |i| i as f64));
    let y = g.dropout(x, 0.0, &mut rng, true).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    let y = g.dropout(x, 0.3, &mut rng, false).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    assert!(g.dropout(x, 1.0, &mut rng, true).is_err());

    let n = 100_000;
    let ones = g.constant(Tensor::from_fn(&[n], |_| 1.0));
    let y = g.dropout(ones, 0.5, &mut rng, true).unwrap();
    let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
    // Each element is 0 or 2: variance 1, so sigma of the mean is 1/sqrt(n).
    let sigma = 1.0 / (n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sigma, "{mean}");
}

#[test]
fn dropout_reproducible() {
    let run = || {
        let mut rng = Rng::new(9, rng::stream::DROPOUT);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[64], |i| i as f32));
        let y = g.dropout(x, 0.4, &mut rng, true).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}

/// Registers `tensors` as parameters and checks `f` by finite differences.
fn grad_check(tensors: Vec<Tensor<f64>>, tol: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut store = ParamStore::new();
    let ids: Vec<_> = tensors.into_iter().enumerate().map(|(i, t)| store.add(format!("p{i}"), t).unwrap()).collect();
    let report = check_params(&mut store, 1e-5, |s, g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        Ok(f(g, &vars))
    })
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(worst.max_rel_err < tol, "{worst:?}");
}

/// Scalarizes an output with fixed random weights so every element matters.
fn probe_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = Rng::new(seed, 99);
    let w = Tensor::from_fn(g.shape(y), |_| rng.normal());
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn grad_linear_ops() {
    let mut rng = Rng::new(10, 0);
    let (a, b, c) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2]), randn(&mut rng, &[2]));
    grad_check(vec![a.clone(), b, c], 1e-6, |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        probe_sum(g, y, 1)
    });
    let (x, y) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[2, 4]));
    grad_check(vec![a, x, y], 1e-6, |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let s = g.scale(s, 0.7);
        let c = g.concat_rows(s, v[2]).unwrap();
        let r = g.gather_rows(c, &[4, 0, 0, 2]).unwrap();
        let m = g.segment_mean(r, 2).unwrap();
        let m = g.reshape(m, &[8]).unwrap();
        probe_sum(g, m, 2)
    });
}

#[test]
fn grad_matmul_chain() {
    let mut rng = Rng::new(11, 0);
    let ts = vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2])];
    grad_check(ts, 1e-6, |g, v| {
        let ab = g.matmul(v[0], v[1]).unwrap();
        let abc = g.matmul(ab, v[2]).unwrap();
        probe_sum(g, abc, 3)
    });
}

#[test]
fn grad_nonlinear_ops() {
    let mut rng = Rng::new(12, 0);
    let x = randn(&mut rng, &[3, 5]);
    let gain = Tensor::from_fn(&[5], |_| 1.0 + 0.3 * rng.normal());
    let bias = randn(&mut rng, &[5]);
    grad_check(vec![x.clone(), gain, bias], 1e-6, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        probe_sum(g, y, 4)
    });
    grad_check(vec![x.clone()], 1e-6, |g, v| {
        let y = g.gelu(v[0]);
        probe_sum(g, y, 5)
    });
    grad_check(vec![x.clone()], 1e-6, |g, v| {
        let y = g.softmax(v[0], 0).unwrap();
        probe_sum(g, y, 6)
    });
    let other = randn(&mut rng, &[3, 2]);
    grad_check(vec![x, other], 1e-6, |g, v| {
        let y = g.concat_cols(v[0], v[1]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.mean(y)
    });
}

#[test]
fn grad_losses() {
    let mut rng = Rng::new(13, 0);
    let logits = randn(&mut rng, &[4, 6]);
    grad_check(vec![logits.clone()], 1e-6, |g, v| g.cross_entropy(v[0], &[1, 5, 0, 3]).unwrap());
    let target = randn(&mut rng, &[4, 6]);
    grad_check(vec![logits.clone()], 1e-6, |g, v| g.mse(v[0], &target).unwrap());
    grad_check(vec![randn(&mut rng, &[5])], 1e-6, |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0]).unwrap());
}

#[test]
fn grad_attention() {
    let mut rng = Rng::new(14, 0);
    let shape = [6, 4];
    let ts = vec![randn(&mut rng, &shape), randn(&mut rng, &shape), randn(&mut rng, &shape)];
    grad_check(ts, 1e-6, |g, v| {
        let y = g.attention(v[0], v[1], v[2], 3, 2).unwrap();
        probe_sum(g, y, 7)
    });
}

#[test]
fn attention_matches_direct_formula() {
    // One head, n = 3, d = 2.
    let q = Tensor::<f64>::from_rows(&[&[1.0, 0.5], &[-0.3, 0.2], &[0.0, 1.0]]);
    let k = Tensor::<f64>::from_rows(&[&[0.4, -1.0], &[0.9, 0.1], &[-0.2, 0.3]]);
    let v = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        let scores: Vec<f64> =
            (0..3).map(|j| (q.at(&[i, 0]) * k.at(&[j, 0]) + q.at(&[i, 1]) * k.at(&[j, 1])) / 2f64.sqrt()).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..3 {
            let p = scores[j].exp() / z;
            expected[i * 2] += p * v.at(&[j, 0]);
            expected[i * 2 + 1] += p * v.at(&[j, 1]);
        }
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let y = g.attention(qv, kv, vv, 3, 1).unwrap();
    close(g.value(y).data(), &expected, 1e-10);
}

#[test]
fn f32_and_f64_agree_on_matmul() {
    let mut rng = Rng::new(15, 0);
    let (a, b) = (randn(&mut rng, &[5, 7]), randn(&mut rng, &[7, 3]));
    let mut g64 = Graph::<f64>::new();
    let (x, y) = (g64.constant(a.clone()), g64.constant(b.clone()));
    let p64 = g64.matmul(x, y).unwrap();
    let mut g32 = Graph::<f32>::new();
    let (x, y) = (g32.constant(a.cast()), g32.constant(b.cast()));
    let p32 = g32.matmul(x, y).unwrap();
    for (u, v) in g64.value(p64).data().iter().zip(g32.value(p32).data()) {
        assert!((u - *v as f64).abs() < 1e-4);
    }
}
