use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

/// Magnitudes in [0.5, 1.5] with random sign; keeps gradient elements away
/// from zero so central differences are not dominated by round-off.
fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    t(shape, &v)
}

/// Contracts `y` with fixed random weights so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn identity_matmul_returns_vector() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let v = tape.constant(t(&[3, 1], &[0.3, -2.0, 7.5]));
    let y = tape.matmul(eye, v).unwrap();
    assert_eq!(tape.value(y).data(), &[0.3, -2.0, 7.5]);
}

#[test]
fn tanh_of_zero_is_zero() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[2, 4]));
    let y = tape.tanh(z).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn segment_sum_matches_loop() {
    let data = [1.0, 2.0, 3.0];
    let seg = [0usize, 0, 1];
    let mut expected = [0.0; 2];
    for (v, s) in data.iter().zip(seg) {
        expected[s] += v;
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &data));
    let y = tape.segment_sum(x, &seg, 2).unwrap();
    assert_eq!(tape.value(y).data(), &expected);
    assert_eq!(expected, [3.0, 3.0]);
}

#[test]
fn square_sum_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn tanh_gradient_at_zero() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[1], &[0.0]));
    let y = tape.tanh(w).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0]);
}

#[test]
fn shared_use_accumulates() {
    // f = sum(a·w) + sum(b·w) must give grad a + b.
    let a = [0.5, -1.0, 2.0];
    let b = [3.0, 0.25, -0.75];
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[3], &[0.1, 0.2, 0.3]));
    let av = tape.constant(t(&[3], &a));
    let bv = tape.constant(t(&[3], &b));
    let p = tape.mul(av, w).unwrap();
    let q = tape.mul(bv, w).unwrap();
    let sp = tape.sum(p).unwrap();
    let sq = tape.sum(q).unwrap();
    let f = tape.add(sp, sq).unwrap();
    let g = tape.backward(f).unwrap();
    let expected: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    assert_eq!(g.get(w).unwrap().data(), expected.as_slice());
}

#[test]
fn unused_param_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.sum(w).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}

type Prim = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Prim)> {
    vec![
        ("linear", vec![vec![4, 3], vec![5, 3]], |t, v| t.linear(v[0], v[1])),
        ("linear_vec", vec![vec![2, 3, 4], vec![3, 4]], |t, v| {
            t.linear(v[0], v[1])
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![vec![3, 2], vec![3, 2]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 2], vec![3, 2]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 2], vec![3, 2]], |t, v| t.mul(v[0], v[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v| t.add_bias(v[0], v[1])),
        ("scale", vec![vec![5]], |t, v| t.scale(v[0], -2.5)),
        ("concat", vec![vec![3, 2], vec![3, 4]], |t, v| t.concat(v[0], v[1])),
        ("slice_cols", vec![vec![3, 5]], |t, v| t.slice_cols(v[0], 1, 3)),
        ("tanh", vec![vec![6]], |t, v| t.tanh(v[0])),
        ("silu", vec![vec![6]], |t, v| t.silu(v[0])),
        ("exp", vec![vec![6]], |t, v| t.exp(v[0])),
        ("abs", vec![vec![6]], |t, v| t.abs(v[0])),
        ("norm_spatial", vec![vec![2, 3, 4]], |t, v| t.norm_spatial(v[0])),
        ("scale_vectors", vec![vec![2, 3, 4], vec![2, 4]], |t, v| {
            t.scale_vectors(v[0], v[1])
        }),
        ("outer", vec![vec![3, 4], vec![3, 3]], |t, v| t.outer(v[0], v[1])),
        ("gather", vec![vec![4, 3]], |t, v| t.gather(v[0], &[2, 0, 2, 3, 1, 2])),
        ("segment_sum", vec![vec![5, 2]], |t, v| {
            t.segment_sum(v[0], &[1, 0, 1, 2, 1], 3)
        }),
        ("segment_mean", vec![vec![5, 2]], |t, v| {
            t.segment_mean(v[0], &[1, 0, 1, 2, 1], 3)
        }),
        ("sum", vec![vec![4]], |t, v| t.sum(v[0])),
        ("mean", vec![vec![4]], |t, v| t.mean(v[0])),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, prim) in primitives() {
        for trial in 0..5 {
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let seed = 1000 + trial;
            let err = gradcheck(
                |tape, vars| {
                    let y = prim(tape, vars)?;
                    weighted_sum(tape, y, seed)
                },
                &params,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: relative error {err:e}");
        }
    }
}

fn two_layer(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
    // v: x [4,3], w1 [5,3], b1 [5], w2 [2,5]
    let h = tape.linear(v[0], v[1])?;
    let h = tape.add_bias(h, v[2])?;
    let h = tape.silu(h)?;
    let h = tape.linear(h, v[3])?;
    let h = tape.tanh(h)?;
    let h = tape.mul(h, h)?;
    tape.sum(h)
}

#[test]
fn random_two_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let params = vec![
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[5, 3]),
            random(&mut rng, &[5]),
            random(&mut rng, &[2, 5]),
        ];
        let err = gradcheck(two_layer, &params, 1e-6).unwrap();
        assert!(err < 1e-6, "relative error {err:e}");
    }
}

#[test]
fn gradcheck_linear_map_is_tight() {
    let a = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
    let err = gradcheck(
        |tape, v| {
            let m = tape.constant(a.clone());
            let y = tape.matmul(m, v[0])?;
            let w = tape.constant(t(&[2, 1], &[1.5, -0.5]));
            let y = tape.mul(y, w)?;
            tape.sum(y)
        },
        &[t(&[3, 1], &[0.2, 0.4, -0.9])],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn corrupted_rule_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = vec![
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[5, 3]),
        random(&mut rng, &[5]),
        random(&mut rng, &[2, 5]),
    ];
    // Re-run the analytic half by hand with a corrupted tanh rule.
    let mut tape = Tape::<f64>::strict();
    tape.corrupt_backward("tanh");
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = two_layer(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for (p, var) in vars.iter().enumerate() {
        let g = grads.get(*var).unwrap().data().to_vec();
        for k in 0..params[p].len() {
            let mut plus = params.clone();
            plus[p].data_mut()[k] += h;
            let mut minus = params.clone();
            minus[p].data_mut()[k] -= h;
            let eval = |ps: &[Tensor<f64>]| {
                let mut t2 = Tape::<f64>::new();
                let vs: Vec<Var> = ps.iter().map(|p| t2.constant(p.clone())).collect();
                let o = two_layer(&mut t2, &vs).unwrap();
                t2.value(o).data()[0]
            };
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(relative_error(g[k], num));
        }
    }
    assert!(worst > 1e-2, "fault went unnoticed: {worst:e}");
}

#[test]
fn forward_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[5, 3]),
        random(&mut rng, &[5]),
        random(&mut rng, &[2, 5]),
    ];
    let run = || {
        let mut tape = Tape::<f64>::new();
        let vs: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let o = two_layer(&mut tape, &vs).unwrap();
        tape.value(o).data()[0].to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(TensorError::Shape { .. })));
    assert!(matches!(tape.linear(a, b), Err(TensorError::Shape { .. })));
    assert!(tape.matmul(a, b).is_ok());
    assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn index_errors_are_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.gather(a, &[0, 2]), Err(TensorError::Index { .. })));
    assert!(matches!(
        tape.segment_sum(a, &[0, 5], 2),
        Err(TensorError::Index { .. })
    ));
    assert!(matches!(
        tape.segment_mean(a, &[0, 0], 2),
        Err(TensorError::EmptySegment { segment: 1 })
    ));
}

#[test]
fn strict_mode_rejects_non_finite() {
    let mut tape = Tape::<f64>::strict();
    let a = tape.constant(t(&[2], &[1.0, f64::NAN]));
    assert!(matches!(tape.tanh(a), Err(TensorError::NonFinite(_))));
    let mut lax = Tape::<f64>::new();
    let a = lax.constant(t(&[2], &[1.0, f64::NAN]));
    assert!(lax.tanh(a).is_ok());
}

#[test]
fn backward_rejects_bad_outputs() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.tanh(w).unwrap();
    assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));

    let mut other = Tape::<f64>::new();
    let foreign = other.param(t(&[1], &[1.0]));
    let mut tape = Tape::<f64>::new();
    let _ = tape.param(t(&[1], &[1.0]));
    assert!(matches!(tape.backward(foreign), Err(TensorError::ForeignVar)));
}

#[test]
fn f32_tape_runs() {
    let mut tape = Tape::<f32>::new();
    let w = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[2.0f32, 4.0]);
}
