use super::*;
use crate::error::Result;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    let s = tape.add(a, b).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    let r = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(r);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(t(&[1], &[0.0]));
    let e = tape.exp(z);
    assert_eq!(tape.value(e).data(), &[1.0]);
    assert!(tape.add(a, r).is_err());
    let bad = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(tape.log(bad).is_err());
}

#[test]
fn matmul_values() {
    let mut tape = Tape::new();
    let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(id, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let d = tape.matmul(r, c).unwrap();
    assert_eq!(tape.value(d).data(), &[11.0]);
    let z = tape.constant(Tensor::zeros(&[3, 2]));
    let zz = tape.matmul(z, m).unwrap();
    assert!(tape.value(zz).data().iter().all(|&v| v == 0.0));
    assert!(tape.matmul(m, r).is_err());
}

#[test]
fn reduce_values() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.reduce(Reduction::Sum, a, &[0]).unwrap();
    assert_eq!(tape.value(s).data(), &[6.0]);
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let mm = tape.reduce(Reduction::Mean, m, &[0, 1]).unwrap();
    assert_eq!(tape.value(mm).data(), &[2.5]);
    let same = tape.reduce(Reduction::Sum, m, &[]).unwrap();
    assert_eq!(tape.value(same), tape.value(m));
    let rows = tape.reduce(Reduction::Sum, m, &[1]).unwrap();
    assert_eq!(tape.value(rows).data(), &[3.0, 7.0]);
    let cols = tape.reduce(Reduction::Sum, m, &[0]).unwrap();
    assert_eq!(tape.value(cols).data(), &[4.0, 6.0]);
    assert!(tape.reduce(Reduction::Sum, m, &[2]).is_err());
}

#[test]
fn backward_analytic() {
    let mut tape = Tape::new();
    let x = tape.param("x", &t(&[3], &[1.0, -2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g["x"].data(), &[2.0, -4.0, 6.0]);

    let mut tape = Tape::new();
    let x = tape.param("x", &t(&[2], &[-1.0, 2.0]));
    let r = tape.relu(x);
    let loss = tape.sum_all(r).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g["x"].data(), &[0.0, 1.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.param("x", &t(&[2], &[1.0, 2.0]));
    assert!(tape.backward(x).is_err(), "non-scalar loss");
    let loss = tape.sum_all(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.backward(loss).is_err(), "second backward");
    assert!(tape.is_frozen());
}

#[test]
fn overflow_is_reported_not_differentiated() {
    let mut tape = Tape::new();
    let x = tape.param("x", &t(&[2], &[1.0, 800.0]));
    let e = tape.exp(x);
    assert_eq!(tape.first_non_finite(), Some("exp"));
    let loss = tape.sum_all(e).unwrap();
    let err = tape.backward(loss).unwrap_err();
    assert!(err.to_string().contains("`exp`"), "{err}");
}

#[test]
fn gradmap_holds_only_touched_params() {
    let mut tape = Tape::new();
    let a = tape.param("a", &t(&[2], &[1.0, 2.0]));
    let _unused = tape.param("b", &t(&[2], &[1.0, 2.0]));
    let c = tape.param("c", &t(&[2], &[1.0, 2.0]));
    let _dead = tape.exp(c);
    let loss = tape.sum_all(a).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.keys().collect::<Vec<_>>(), vec!["a"]);
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn grad_check_examples() {
    let x = rand_tensor(&[5], 3);
    let e = grad_check(
        |tape: &mut Tape, x: Var| {
            let sq = tape.mul(x, x)?;
            tape.sum_all(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-8, "{e}");

    let e = grad_check(|tape: &mut Tape, _x: Var| Ok(tape.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
    assert_eq!(e, 0.0);

    let x = t(&[2], &[0.0, 1.0]);
    let e = grad_check(
        |tape: &mut Tape, x: Var| {
            let ex = tape.exp(x);
            tape.sum_all(ex)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn matmul_mean_gradient_matches_finite_differences() {
    let w = rand_tensor(&[3, 4], 11);
    let x = rand_tensor(&[4, 2], 12);
    let e = grad_check_many(
        |tape: &mut Tape, v: &[Var]| {
            let p = tape.matmul(v[0], v[1])?;
            tape.mean_all(p)
        },
        &[w, x],
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn every_primitive_passes_grad_check() {
    type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Vec<usize>>);
    let cases: Vec<Case> = vec![
        ("add", Box::new(|t, v| { let y = t.add(v[0], v[1])?; let y = t.mul(y, y)?; t.sum_all(y) }), vec![vec![2, 3], vec![2, 3]]),
        ("sub", Box::new(|t, v| { let y = t.sub(v[0], v[1])?; let y = t.mul(y, y)?; t.sum_all(y) }), vec![vec![2, 3], vec![2, 3]]),
        ("mul", Box::new(|t, v| { let y = t.mul(v[0], v[1])?; t.sum_all(y) }), vec![vec![4], vec![4]]),
        ("relu", Box::new(|t, v| { let y = t.relu(v[0]); let y = t.mul(y, v[1])?; t.sum_all(y) }), vec![vec![6], vec![6]]),
        ("exp", Box::new(|t, v| { let y = t.exp(v[0]); t.sum_all(y) }), vec![vec![5]]),
        ("log", Box::new(|t, v| { let y = t.exp(v[0]); let y = t.log(y)?; let y = t.mul(y, y)?; t.sum_all(y) }), vec![vec![5]]),
        ("neg_scale", Box::new(|t, v| { let y = t.neg(v[0]); let y = t.scale(y, 0.3); let y = t.mul(y, v[0])?; t.sum_all(y) }), vec![vec![5]]),
        ("transpose", Box::new(|t, v| { let y = t.transpose(v[0])?; let y = t.matmul(y, v[1])?; t.mean_all(y) }), vec![vec![3, 2], vec![3, 4]]),
        ("reshape_reduce", Box::new(|t, v| { let y = t.reshape(v[0], &[3, 4])?; let y = t.reduce(Reduction::Sum, y, &[1])?; let y = t.mul(y, y)?; t.mean_all(y) }), vec![vec![2, 6]]),
        ("row_bias", Box::new(|t, v| { let y = t.add_row_bias(v[0], v[1])?; let y = t.mul(y, y)?; t.sum_all(y) }), vec![vec![3, 4], vec![4]]),
    ];
    for (name, f, shapes) in cases {
        for trial in 0..10 {
            let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| rand_tensor(s, 100 * trial + i as u64)).collect();
            let e = grad_check_many(&f, &inputs, 1e-5).unwrap();
            assert!(e < 1e-4, "{name}: {e}");
        }
    }
}

#[test]
fn backward_is_linear_over_summed_losses() {
    let p = rand_tensor(&[4], 5);
    let build = |tape: &mut Tape, which: u8| -> Var {
        let x = tape.param("p", &p);
        let a = tape.exp(x);
        let la = tape.sum_all(a).unwrap();
        let b = tape.mul(x, x).unwrap();
        let lb = tape.mean_all(b).unwrap();
        match which {
            0 => la,
            1 => lb,
            _ => tape.add(la, lb).unwrap(),
        }
    };
    let grads: Vec<GradMap> = (0..3)
        .map(|w| {
            let mut tape = Tape::new();
            let l = build(&mut tape, w);
            tape.backward(l).unwrap()
        })
        .collect();
    let sum = grads[0]["p"].zip_map(&grads[1]["p"], |a, b| a + b);
    assert!(sum.bit_eq(&grads[2]["p"]));
}

#[test]
fn backward_is_deterministic() {
    let w = rand_tensor(&[3, 4], 1);
    let x = rand_tensor(&[4, 5], 2);
    let run = || {
        let mut tape = Tape::new();
        let wv = tape.param("w", &w);
        let xv = tape.param("x", &x);
        let y = tape.matmul(wv, xv).unwrap();
        let y = tape.exp(y);
        let l = tape.mean_all(y).unwrap();
        tape.backward(l).unwrap()
    };
    let (a, b) = (run(), run());
    for (k, v) in &a {
        assert!(v.bit_eq(&b[k]));
    }
}
