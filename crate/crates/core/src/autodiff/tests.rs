use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::rng::stream;
use crate::Error;

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = stream(seed, &[shape.0 as u64, shape.1 as u64]);
    let v = (0..shape.0 * shape.1).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape, v).unwrap().trainable()
}

fn positive(shape: Shape, seed: u64) -> Tensor {
    let mut t = random(shape, seed);
    t.values.iter_mut().for_each(|v| *v = v.abs() + 0.5);
    t
}

/// Builds `build` on fresh leaves, reduces it with fixed random weights and
/// compares tape gradients with central differences.
fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let forward = |ins: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t)).collect();
        let y = build(&mut g, &vars);
        (g, vars, y)
    };
    let (g0, _, y0) = forward(inputs);
    let weights = random(g0.shape(y0), 99).values;
    let loss_of = |g: &Graph, y: Var| -> f64 { g.value(y).iter().zip(&weights).map(|(a, b)| a * b).sum() };

    let (mut g, vars, y) = forward(inputs);
    let w = g.constant(g.shape(y), weights.clone()).unwrap();
    let prod = g.mul(y, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss, &mut ParameterStore::new()).unwrap();

    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].values[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].values[i] -= h;
            let (gp, _, yp) = forward(&plus);
            let (gm, _, ym) = forward(&minus);
            let fd = (loss_of(&gp, yp) - loss_of(&gm, ym)) / (2.0 * h);
            let a = analytic[i];
            let tol = 1e-6 * fd.abs().max(a.abs()).max(1.0);
            assert!((fd - a).abs() < tol, "input {k} entry {i}: fd {fd} tape {a}");
        }
    }
}

#[test]
fn grad_matmul_family() {
    check(&[random((3, 4), 1), random((4, 2), 2)], |g, v| g.matmul(v[0], v[1]).unwrap());
    check(&[random((3, 4), 1), random((5, 4), 2)], |g, v| g.matmul_t(v[0], v[1]).unwrap());
    check(&[random((3, 4), 1), random((5, 4), 2), random((1, 5), 3)], |g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    });
}

#[test]
fn grad_elementwise() {
    let (a, b) = (random((2, 3), 4), random((2, 3), 5));
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone(), random((2, 3), 6)], |g, v| g.add_n(v).unwrap());
    check(&[a.clone(), random((1, 3), 7)], |g, v| g.add_row(v[0], v[1]).unwrap());
    check(&[a.clone(), random((1, 3), 7)], |g, v| g.mul_row(v[0], v[1]).unwrap());
    check(&[a.clone()], |g, v| g.scale(v[0], -2.5));
    check(&[a.clone()], |g, v| g.sin(v[0]));
    check(&[a.clone()], |g, v| g.cos(v[0]));
    check(&[a.clone()], |g, v| g.tanh(v[0]));
    check(&[a.clone()], |g, v| g.exp(v[0]));
    check(&[positive((2, 3), 8)], |g, v| g.log(v[0]));
    // keep relu inputs away from the kink
    let mut r = random((2, 3), 9);
    r.values.iter_mut().for_each(|x| *x += x.signum() * 0.1);
    check(&[r], |g, v| g.relu(v[0]));
}

#[test]
fn grad_reductions_and_reshapes() {
    let a = random((3, 4), 10);
    check(&[a.clone()], |g, v| g.mean(v[0]));
    check(&[a.clone()], |g, v| g.sum(v[0]));
    check(&[a.clone()], |g, v| g.mean_rows(v[0]));
    check(&[a.clone(), random((3, 2), 11)], |g, v| g.concat_cols(v).unwrap());
    check(&[a.clone(), random((2, 4), 12)], |g, v| g.concat_rows(v).unwrap());
    check(&[a.clone()], |g, v| g.slice_cols(v[0], 1, 2).unwrap());
    check(&[a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2]).unwrap());
    check(&[a.clone()], |g, v| g.reshape(v[0], (2, 6)).unwrap());
}

#[test]
fn grad_attention_ops() {
    let mask = [false, true, false, false, false, false, true, false];
    check(&[random((2, 4), 13)], |g, v| g.masked_softmax(v[0], None).unwrap());
    check(&[random((2, 4), 13)], |g, v| g.masked_softmax(v[0], Some(&mask)).unwrap());
    check(&[random((6, 4), 14), random((6, 4), 15)], |g, v| g.block_matmul_t(v[0], v[1], 3).unwrap());
    check(&[random((6, 3), 16), random((6, 5), 17)], |g, v| g.block_matmul(v[0], v[1], 3).unwrap());
    check(&[random((1, 6), 18), random((4, 6), 19)], |g, v| g.head_scores(v[0], v[1], 3).unwrap());
    check(&[random((3, 4), 20), random((4, 6), 21)], |g, v| g.head_mix(v[0], v[1], 3).unwrap());
}

#[test]
fn grad_normalisation_and_dropout() {
    let x = random((5, 3), 22);
    let (gamma, beta) = (random((1, 3), 23), random((1, 3), 24));
    check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        g.batchnorm(v[0], v[1], v[2], NormMode::Train).unwrap().0
    });
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    check(&[x.clone(), gamma, beta], |g, v| {
        g.batchnorm(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var }).unwrap().0
    });
    check(&[x], |g, v| g.dropout(v[0], 0.3, true, &mut stream(5, &[])).unwrap());
}

#[test]
fn masked_softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant((1, 3), vec![0.0, 0.0, 0.0]).unwrap();
    let p = g.masked_softmax(x, Some(&[false, true, false])).unwrap();
    assert_eq!(g.value(p), &[0.5, 0.0, 0.5]);
    let big = g.constant((1, 2), vec![1000.0, 0.0]).unwrap();
    let p = g.masked_softmax(big, None).unwrap();
    assert!(g.value(p)[0] > 0.999_999 && g.value(p).iter().all(|v| v.is_finite()));
    assert!(matches!(
        g.masked_softmax(x, Some(&[true, true, true])),
        Err(Error::Contract(_))
    ));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant((2, 3), vec![0.0; 6]).unwrap();
    let b = g.constant((2, 3), vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!((op, lhs, rhs), ("matmul", (2, 3), (2, 3)));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn backward_accumulates_and_requires_scalar() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::new((1, 2), vec![1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, "w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad, vec![2.0, 4.0]);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad, vec![4.0, 8.0]);
    assert!(matches!(g.backward(sq, &mut store), Err(Error::Contract(_))));
}

#[test]
fn batchnorm_normalises_large_batches() {
    let mut rng = stream(77, &[]);
    let x: Vec<f64> = (0..1024 * 4).map(|i| rng.gen::<f64>() * 10.0 + i as f64 % 7.0).collect();
    let mut g = Graph::new();
    let xv = g.constant((1024, 4), x).unwrap();
    let gamma = g.constant((1, 4), vec![1.0; 4]).unwrap();
    let beta = g.constant((1, 4), vec![0.0; 4]).unwrap();
    let (y, stats) = g.batchnorm(xv, gamma, beta, NormMode::Train).unwrap();
    assert!(stats.is_some());
    let y = g.value(y);
    for j in 0..4 {
        let col: Vec<f64> = (0..1024).map(|i| y[i * 4 + j]).collect();
        let mean = col.iter().sum::<f64>() / 1024.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 1024.0;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn dropout_is_identity_outside_training() {
    let mut g = Graph::new();
    let x = g.constant((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
    let y = g.dropout(x, 0.5, false, &mut stream(1, &[])).unwrap();
    assert_eq!(y, x);
    assert!(g.dropout(x, 1.0, true, &mut stream(1, &[])).is_err());
}
