use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny_config() -> NetConfig {
    NetConfig {
        profile: "tiny".into(),
        hidden: 12,
        embed: 8,
        time_encoding: 6,
        heads: 2,
        feed_forward: 10,
        blocks: 1,
        global: 10,
        decoder_width: 9,
        decoder_layers: 7,
        dropout: 0.1,
        object: None,
    }
}

fn random_batch(rng: &mut impl Rng, b: usize) -> Batch<'static> {
    Batch {
        x_t: Array2::from_shape_simple_fn((b, HAND_DIM), || rng.random_range(-1.0..1.0)),
        cond: Array2::from_shape_simple_fn((b, HAND_DIM), || rng.random_range(-1.0..1.0)),
        dropped: (0..b).map(|i| i % 2 == 1).collect(),
        t: (0..b).map(|i| 1 + 37 * i).collect(),
        objects: vec![],
    }
}

#[test]
fn output_shape_and_null_token_effect() {
    let net = DenoiserNet::new(NetConfig::small(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batch = random_batch(&mut rng, 2);
    let (c0, x0) = (batch.cond.row(0).to_owned(), batch.x_t.row(0).to_owned());
    batch.cond.row_mut(1).assign(&c0);
    batch.x_t.row_mut(1).assign(&x0);
    batch.t = vec![50, 50];
    let out = net.predict(&batch).unwrap();
    assert_eq!(out.dim(), (2, HAND_DIM));
    assert!(out.iter().all(|v| v.is_finite()));
    let diff = (&out.row(0) - &out.row(1)).mapv(f64::abs).fold(0.0, |m: f64, v| m.max(*v));
    assert!(diff > 0.0);
    assert_eq!(net.predict(&batch).unwrap(), out);
}

#[test]
fn shape_errors_are_reported() {
    let net = DenoiserNet::new(tiny_config(), 0);
    let mut batch = random_batch(&mut ChaCha8Rng::seed_from_u64(1), 3);
    batch.t.pop();
    assert!(matches!(net.predict(&batch), Err(Error::ShapeMismatch(_))));
    let obj_net = DenoiserNet::new(tiny_config().with_object(), 0);
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(1), 3);
    assert!(matches!(obj_net.predict(&batch), Err(Error::MissingObject)));
}

#[test]
fn one_weight_per_layer_matches_finite_differences() {
    let mut net = DenoiserNet::new(tiny_config().with_object(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud: Vec<Vector3<f64>> = (0..64)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)))
        .collect();
    let prepared = net.prepare_object(&cloud).unwrap();
    let mut batch = random_batch(&mut rng, 3);
    batch.objects = vec![&prepared; 3];
    let target = Array2::from_shape_simple_fn((3, HAND_DIM), || rng.random_range(-1.0..1.0));
    let mask = Array2::ones((3, HAND_DIM));
    let loss_of = |store: &ParamStore, net: &DenoiserNet| {
        let mut g = Graph::new(store);
        let out = net.forward(&mut g, &batch).unwrap();
        let l = g.masked_mse(out, target.clone(), mask.clone());
        (g.scalar(l), g.backward(l))
    };
    let (_, grads) = loss_of(&net.store, &net);
    let h = 1e-4;
    let store = net.store.clone();
    for id in 0..store.len() {
        let Some(gp) = grads.param(id) else { continue };
        let e = (0..gp.len())
            .max_by(|&a, &b| gp.as_slice().unwrap()[a].abs().total_cmp(&gp.as_slice().unwrap()[b].abs()))
            .unwrap();
        let an = gp.as_slice().unwrap()[e];
        let mut plus = store.clone();
        plus.get_mut(id).as_slice_mut().unwrap()[e] += h;
        let mut minus = store.clone();
        minus.get_mut(id).as_slice_mut().unwrap()[e] -= h;
        net.store = plus.clone();
        let lp = loss_of(&plus, &net).0;
        net.store = minus.clone();
        let lm = loss_of(&minus, &net).0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
        assert!(rel < 1e-2, "{}: fd {fd} vs {an}", store.name(id));
    }
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let mut net = DenoiserNet::new(tiny_config(), 5);
    net.store.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path(), &ScheduleSpec::default(), serde_json::Value::Null).unwrap();
    let (back, sched, _) = DenoiserNet::load(dir.path()).unwrap();
    assert_eq!(sched.steps(), 256);
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(2), 4);
    assert_eq!(back.predict(&batch).unwrap(), net.predict(&batch).unwrap());
}

#[test]
fn sinusoid_layout() {
    let e = time_encoding(3, 8);
    assert_eq!(e[0], 3f64.sin());
    assert_eq!(e[4], 3f64.cos());
    assert!((e[1] - (3.0 * 10000f64.powf(-0.25)).sin()).abs() < 1e-12);
}
