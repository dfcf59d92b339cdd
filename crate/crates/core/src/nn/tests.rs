use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

struct Tiny {
    store: ParamStore,
    l1: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    ln: LayerNorm,
    token: ParamId,
    head: Linear,
}

fn tiny() -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::default();
    let l1 = Linear::new(&mut store, &mut rng, "l1", 3, 8);
    let q = Linear::new(&mut store, &mut rng, "q", 8, 8);
    let k = Linear::new(&mut store, &mut rng, "k", 8, 8);
    let v = Linear::new(&mut store, &mut rng, "v", 8, 8);
    let ln = LayerNorm::new(&mut store, "ln", 8);
    // perturb the affine so its gradients are exercised away from 1/0
    store.get_mut(ln.gamma).mapv_inplace(|x| x * 1.3);
    store.get_mut(ln.beta).fill(0.2);
    let token = store.add("token", normal(&mut rng, 1.0, 1, 8));
    let head = Linear::new(&mut store, &mut rng, "head", 25, 2);
    Tiny { store, l1, q, k, v, ln, token, head }
}

/// Exercises every op once; returns the scalar loss and the input handle.
fn run(net: &Tiny, store: &ParamStore, x: &Array2<f64>) -> (f64, Gradients, Var) {
    let mut g = Graph::new(store);
    let xi = g.input(x.clone());
    // 4 samples, 3 tokens each, gathered from 6 input rows
    let gathered = g.gather(xi, &[0, 1, 2, 3, 4, 5, 5, 4, 3, 2, 1, 0]);
    let h = net.l1.forward(&mut g, gathered);
    let h = g.silu(h);
    let h = g.substitute(h, net.token, &[false, true, false, false, false, false, true, false, false, false, false, true]);
    let q = net.q.forward(&mut g, h);
    let k = net.k.forward(&mut g, h);
    let v = net.v.forward(&mut g, h);
    let a = g.attention(q, k, v, 3, 2);
    let a = g.add(a, h);
    let a = net.ln.forward(&mut g, a);
    let pooled = g.max_pool(a, 3);
    let r = g.relu(pooled);
    let stacked = g.stack(&[r, pooled]);
    let flat = g.reshape(stacked, 4, 16);
    let first = g.gather(xi, &[0, 1, 2, 3]);
    let extra = g.gather(xi, &[4, 5, 0, 1]);
    let extra = g.reshape(extra, 2, 6);
    let extra = g.gather(extra, &[0, 1, 0, 1]);
    let cat = g.concat(&[flat, first, extra]);
    let y = net.head.forward(&mut g, cat);
    let target = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 - j as f64) * 0.3);
    let mask = Array2::from_shape_fn((4, 2), |(i, j)| if i == 1 && j == 0 { 0.0 } else { 1.0 });
    let loss = g.masked_mse(y, target, mask);
    let grads = g.backward(loss);
    (g.scalar(loss), grads, xi)
}

#[test]
fn backprop_matches_finite_differences() {
    let net = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = normal(&mut rng, 1.0, 6, 3);
    let (_, grads, xi) = run(&net, &net.store, &x);
    let h = 1e-6;
    let mut checked = 0;
    for id in 0..net.store.len() {
        let n = net.store.get(id).len();
        for e in 0..n.min(6) {
            let eval = |delta: f64| {
                let mut s = net.store.clone();
                s.get_mut(id).as_slice_mut().unwrap()[e] += delta;
                run(&net, &s, &x).0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.param(id).map_or(0.0, |g| g.as_slice().unwrap()[e]);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(err < 1e-5 || (fd - an).abs() < 1e-9, "{} [{e}]: fd {fd} vs {an}", net.store.name(id));
            checked += 1;
        }
    }
    assert!(checked > 50);
    let gx = grads.node(xi).unwrap();
    for e in 0..x.len() {
        let eval = |delta: f64| {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[e] += delta;
            run(&net, &net.store, &xp).0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an = gx.as_slice().unwrap()[e];
        assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "input {e}: {fd} vs {an}");
    }
}

#[test]
fn token_gradient_only_from_substituted_rows() {
    let net = tiny();
    let x = normal(&mut ChaCha8Rng::seed_from_u64(1), 1.0, 6, 3);
    let (_, grads, _) = run(&net, &net.store, &x);
    assert!(grads.param(net.token).unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn dropout_is_identity_in_eval_and_scaled_in_training() {
    let store = ParamStore::default();
    let x = Array2::ones((50, 40));
    let mut g = Graph::new(&store);
    let xi = g.input(x.clone());
    let y = g.dropout(xi, 0.5);
    assert_eq!(g.value(y), &x);
    let mut g = Graph::training(&store, ChaCha8Rng::seed_from_u64(0));
    let xi = g.input(x);
    let y = g.dropout(xi, 0.25);
    let vals = g.value(y);
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    let kept = vals.iter().filter(|&&v| v > 0.0).count() as f64 / 2000.0;
    assert!((kept - 0.75).abs() < 0.05);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::default();
    let lin = Linear::new(&mut store, &mut rng, "l", 2, 1);
    let x = Array2::from_shape_vec((4, 2), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0]).unwrap();
    let target = x.dot(&Array2::from_shape_vec((2, 1), vec![2.0, -3.0]).unwrap()) + 0.5;
    let mut adam = Adam::new(&store, 0.05);
    let mut last = f64::INFINITY;
    for _ in 0..2000 {
        let mut g = Graph::new(&store);
        let xi = g.input(x.clone());
        let y = lin.forward(&mut g, xi);
        let loss = g.masked_mse(y, target.clone(), Array2::ones((4, 1)));
        last = g.scalar(loss);
        let grads = g.backward(loss);
        adam.step(&mut store, &grads);
    }
    assert!(last < 1e-8, "{last}");
    assert!((store.get(lin.b)[(0, 0)] - 0.5).abs() < 1e-3);
}

#[test]
fn tensor_round_trip_matches_by_name() {
    let net = tiny();
    let set = net.store.to_tensors();
    let mut other = tiny().store;
    other.get_mut(0).fill(0.0);
    other.load_tensors(&set).unwrap();
    assert_eq!(other, net.store);
    let mut fewer = set.clone();
    fewer.tensors.pop();
    assert!(other.load_tensors(&fewer).is_err());
}
