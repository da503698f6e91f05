use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(f(inputs) ⊙ r)` for a fixed random `r` and compares leaf
/// gradients with central differences. Returns the max relative error.
fn check_inputs<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let build = |g: &mut Graph, xs: &[Tensor], r: Option<&Tensor>| -> (Vec<Var>, Var, Tensor) {
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone().with_grad())).collect();
        let out = f(g, &vars);
        let shape = g.value(out).shape().to_vec();
        let weights = r.cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let wv = g.leaf(weights.clone());
        let prod = g.mul(out, wv).unwrap();
        (vars, g.sum_all(prod), weights)
    };
    let mut g = Graph::new();
    let (_, _, zeros) = build(&mut g, inputs, None);
    let r = random(zeros.shape(), &mut rng);
    let mut g = Graph::new();
    let (vars, loss, _) = build(&mut g, inputs, Some(&r));
    let grads = g.gradients(loss).unwrap();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for j in 0..x.len() {
            let eval = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[j] += delta;
                let mut g = Graph::new();
                let (_, loss, _) = build(&mut g, &xs, Some(&r));
                g.value(loss).data()[0]
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

#[test]
fn affine_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 2], &[1.0, 2.0]));
    let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero = g.leaf(Tensor::zeros(&[2]));
    let y = g.affine(x, eye, zero).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let w = g.leaf(t(&[1, 2], &[1.0, 1.0]));
    let b = g.leaf(t(&[1], &[0.5]));
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.5]);

    let zx = g.leaf(Tensor::zeros(&[3, 2]));
    let b2 = g.leaf(t(&[2], &[0.25, -1.0]));
    let y = g.affine(zx, eye, b2).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);
}

#[test]
fn affine_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[4, 3]));
    let w = g.leaf(Tensor::zeros(&[2, 5]));
    let b = g.leaf(Tensor::zeros(&[2]));
    match g.affine(x, w, b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![4, 3]);
            assert_eq!(right, vec![2, 5]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3, 1], &[1.0, 2.0, 3.0]));
    let id = g.leaf(t(&[1, 1, 1], &[1.0]));
    let zb = g.leaf(Tensor::zeros(&[1]));
    let y = g.conv1d(x, id, zb).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

    let ones = g.leaf(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
    let y = g.conv1d(x, ones, zb).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);

    let zx = g.leaf(Tensor::zeros(&[3, 1]));
    let half = g.leaf(t(&[1], &[0.5]));
    let y = g.conv1d(zx, ones, half).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5]);
}

#[test]
fn conv1d_even_kernel_is_a_config_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3, 1]));
    let w = g.leaf(Tensor::zeros(&[1, 1, 2]));
    let b = g.leaf(Tensor::zeros(&[1]));
    assert!(matches!(g.conv1d(x, w, b), Err(Error::Config(_))));
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let id = g.leaf(t(&[1, 1, 1, 1], &[1.0]));
    let zb = g.leaf(Tensor::zeros(&[1]));
    let y = g.conv2d(x, id, zb).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let ones = g.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, ones, zb).unwrap();
    assert_eq!(g.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);

    let zx = g.leaf(Tensor::zeros(&[1, 3, 2]));
    let b = g.leaf(t(&[1], &[-0.75]));
    let y = g.conv2d(zx, ones, b).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == -0.75));

    let two_ch = g.leaf(Tensor::zeros(&[2, 1, 1, 1]));
    let b2 = g.leaf(Tensor::zeros(&[2]));
    let wrong = g.leaf(Tensor::zeros(&[3, 2, 2]));
    assert!(matches!(g.conv2d(wrong, two_ch, b2), Err(Error::Dimension { .. })));
}

#[test]
fn identity_kernels_reproduce_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x1 = random(&[7, 3], &mut rng);
    let mut k1 = vec![0.0; 3 * 3 * 5];
    for c in 0..3 {
        k1[(c * 3 + c) * 5 + 2] = 1.0;
    }
    let xv = g.leaf(x1.clone());
    let kv = g.leaf(t(&[3, 3, 5], &k1));
    let bv = g.leaf(Tensor::zeros(&[3]));
    let y = g.conv1d(xv, kv, bv).unwrap();
    assert_eq!(g.value(y), &x1);

    let x2 = random(&[2, 4, 5], &mut rng);
    let mut k2 = vec![0.0; 2 * 2 * 9];
    for c in 0..2 {
        k2[(c * 2 + c) * 9 + 4] = 1.0;
    }
    let xv = g.leaf(x2.clone());
    let kv = g.leaf(t(&[2, 2, 3, 3], &k2));
    let bv = g.leaf(Tensor::zeros(&[2]));
    let y = g.conv2d(xv, kv, bv).unwrap();
    assert_eq!(g.value(y), &x2);
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let z = g.leaf(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);

    let zz = g.leaf(Tensor::zeros(&[1, 2]));
    let sm = g.softmax(zz);
    assert_eq!(g.value(sm).data(), &[0.5, 0.5]);

    let x = g.leaf(t(&[3], &[1.0, -2.0, 3.0]));
    let d = g.dropout::<ChaCha8Rng>(x, 0.2, None).unwrap();
    assert_eq!(g.value(d), g.value(x));
    assert!(matches!(g.dropout::<ChaCha8Rng>(x, 1.0, None), Err(Error::Config(_))));

    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[1.0, 0.0, 3.0]);
}

#[test]
fn training_dropout_scales_survivors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::filled(&[1000], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = g.dropout(x, 0.2, Some(&mut rng)).unwrap();
    let vals = g.value(d).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
    let dropped = vals.iter().filter(|&&v| v == 0.0).count();
    assert!((150..250).contains(&dropped), "{dropped}");
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.leaf(random(&[20, 5], &mut rng).map(|v| 30.0 * v));
    let y = g.softmax(x);
    for row in g.value(y).rows() {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::scalar(2.0)).unwrap();
    let unused = store.insert("unused", Tensor::filled(&[2], 7.0)).unwrap();
    store.get_mut(unused).grad = Tensor::filled(&[2], 9.0);
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let x = g.leaf(Tensor::scalar(3.0));
    let loss = g.mul(wv, x).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[3.0]);
    assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);

    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::scalar(0.0)).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let s = g.sigmoid(wv);
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[0.25]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.gradients(x), Err(Error::Contract(_))));
}

#[test]
fn mean_conv1d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.insert("w", random(&[2, 3, 3], &mut rng)).unwrap();
    let b = store.insert("b", random(&[2], &mut rng)).unwrap();
    let input = random(&[6, 3], &mut rng);

    struct MeanConv {
        store: ParamStore,
        w: ParamId,
        b: ParamId,
    }
    impl Objective for MeanConv {
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn loss(&self, g: &mut Graph, input: &Tensor) -> crate::Result<Var> {
            let x = g.leaf(input.clone());
            let w = g.param(&self.store, self.w);
            let b = g.param(&self.store, self.b);
            let y = g.conv1d(x, w, b)?;
            let y = g.mul(y, y)?;
            Ok(g.mean_all(y))
        }
    }
    let mut m = MeanConv { store, w, b };
    let report = finite_difference_check(&mut m, &input, 1e-5);
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
    assert_eq!(report.checked, 20);
}

#[test]
fn every_op_matches_finite_differences_over_ten_seeds() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut errs: Vec<(&str, f64)> = Vec::new();

        let ins = [random(&[4, 3], &mut rng), random(&[5, 3], &mut rng), random(&[5], &mut rng)];
        errs.push(("affine", check_inputs(&ins, seed, |g, v| g.affine(v[0], v[1], v[2]).unwrap())));

        let ins = [random(&[6, 3], &mut rng), random(&[4, 3, 3], &mut rng), random(&[4], &mut rng)];
        errs.push(("conv1d", check_inputs(&ins, seed, |g, v| g.conv1d(v[0], v[1], v[2]).unwrap())));

        let ins = [random(&[2, 5, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)];
        errs.push(("conv2d k3", check_inputs(&ins, seed, |g, v| g.conv2d(v[0], v[1], v[2]).unwrap())));

        let ins = [random(&[2, 6, 6], &mut rng), random(&[2, 2, 5, 5], &mut rng), random(&[2], &mut rng)];
        errs.push(("conv2d k5", check_inputs(&ins, seed, |g, v| g.conv2d(v[0], v[1], v[2]).unwrap())));

        let ins = [random(&[4, 5], &mut rng), random(&[5], &mut rng), random(&[5], &mut rng)];
        errs.push(("layer_norm", check_inputs(&ins, seed, |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap())));

        let ins = [random(&[3, 4], &mut rng)];
        errs.push(("sigmoid", check_inputs(&ins, seed, |g, v| g.sigmoid(v[0]))));
        errs.push(("softmax", check_inputs(&ins, seed, |g, v| g.softmax(v[0]))));
        errs.push(("relu", check_inputs(&ins, seed, |g, v| g.relu(v[0]))));
        errs.push(("abs", check_inputs(&ins, seed, |g, v| g.abs(v[0]))));
        errs.push(("scale", check_inputs(&ins, seed, |g, v| g.scale(v[0], -1.5))));
        errs.push(("mean_rows", check_inputs(&ins, seed, |g, v| g.mean_rows(v[0]).unwrap())));
        errs.push(("mean_all", check_inputs(&ins, seed, |g, v| g.mean_all(v[0]))));
        errs.push(("reshape", check_inputs(&ins, seed, |g, v| g.reshape(v[0], &[1, 3, 4]).unwrap())));

        let ins = [random(&[4, 3], &mut rng), random(&[4, 3], &mut rng)];
        errs.push(("add", check_inputs(&ins, seed, |g, v| g.add(v[0], v[1]).unwrap())));
        errs.push(("sub", check_inputs(&ins, seed, |g, v| g.sub(v[0], v[1]).unwrap())));
        errs.push(("mul", check_inputs(&ins, seed, |g, v| g.mul(v[0], v[1]).unwrap())));
        errs.push((
            "temporal_difference",
            check_inputs(&ins, seed, |g, v| g.temporal_difference(v[0], v[1]).unwrap()),
        ));

        let logits = [random(&[3, 2], &mut rng)];
        errs.push((
            "weighted_nll",
            check_inputs(&logits, seed, |g, v| {
                let p = g.softmax(v[0]);
                let m = g.mean_rows(p).unwrap();
                g.weighted_nll(m, (seed % 2) as usize, 9.0).unwrap()
            }),
        ));

        for (name, err) in errs {
            assert!(err <= 1e-4, "seed {seed}: {name} relative error {err}");
        }
    }
}

#[test]
fn replayed_trace_gives_identical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let w = store.insert("w", random(&[3, 2, 3, 3], &mut rng)).unwrap();
    let b = store.insert("b", random(&[3], &mut rng)).unwrap();
    let x = random(&[2, 5, 5], &mut rng);
    let run = |store: &mut ParamStore| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let y = g.conv2d(xv, wv, bv).unwrap();
        let y = g.sigmoid(y);
        let l = g.mean_all(y);
        g.backward(l, store).unwrap();
        (store.get(w).grad.clone(), store.get(b).grad.clone())
    };
    let first = run(&mut store);
    let second = run(&mut store);
    assert_eq!(first, second);
}

#[test]
fn single_affine_gradcheck_is_exact() {
    struct Lin {
        store: ParamStore,
    }
    impl Objective for Lin {
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn loss(&self, g: &mut Graph, input: &Tensor) -> crate::Result<Var> {
            let x = g.leaf(input.clone());
            let w = g.param(&self.store, self.store.require("w")?);
            let b = g.param(&self.store, self.store.require("b")?);
            let y = g.affine(x, w, b)?;
            Ok(g.sum_all(y))
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.insert("w", random(&[3, 4], &mut rng)).unwrap();
    store.insert("b", random(&[3], &mut rng)).unwrap();
    let mut lin = Lin { store };
    let input = random(&[5, 4], &mut rng);
    let report = finite_difference_check(&mut lin, &input, 1e-4);
    assert!(report.max_rel_error <= 1e-8, "{report:?}");

    let mut analytic = analytic_gradients(&lin, &input).unwrap();
    analytic[0].data_mut().iter_mut().for_each(|g| *g *= 2.0);
    let report = compare_with_finite_differences(&mut lin, &input, 1e-4, &analytic);
    assert!(report.max_rel_error > 0.1);
    assert!(report.worst_param.starts_with("w["));
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(store.insert("a", Tensor::scalar(2.0)), Err(Error::Validation(_))));
}
