mod common;

use common::*;
use interlingua::tensor::{Tape, Tensor};
use interlingua::Error;
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let i = t.constant(tensor(&[2, 2], vec![1., 0., 0., 1.]));
    let b = t.constant(tensor(&[2, 2], vec![3., 4., 5., 6.]));
    let p = t.matmul(i, b).unwrap();
    assert_eq!(t.value(p).data(), &[3., 4., 5., 6.]);
    let a = t.constant(tensor(&[1, 2], vec![1., 2.]));
    let c = t.constant(tensor(&[2, 1], vec![3., 4.]));
    let p = t.matmul(a, c).unwrap();
    assert_eq!(t.value(p).data(), &[11.]);
    assert!(matches!(t.matmul(a, a), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_is_ones_times_b_transposed() {
    let mut r = rng(1);
    let (a0, b0) = (randn(&[3, 4], &mut r), randn(&[4, 2], &mut r));
    let mut t = Tape::new();
    let (a, b) = (t.leaf(a0), t.leaf(b0.clone()));
    let p = t.matmul(a, b).unwrap();
    let l = t.sum(p);
    let g = t.backward(l).unwrap();
    let ga = g.get(a).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = b0.row(k).iter().sum();
            assert!((ga.data()[i * 4 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let run = |t: &mut Tape, v: Vec<f64>| {
        let n = v.len();
        let x = t.constant(tensor(&[n], v));
        let s = t.softmax(x, 0).unwrap();
        t.value(s).data().to_vec()
    };
    for p in run(&mut t, vec![0., 0., 0.]) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(run(&mut t, vec![1000., 1000.]), vec![0.5, 0.5]);
    let p = run(&mut t, vec![1., 2.]);
    assert!((p[0] - 0.2689).abs() < 1e-4 && (p[1] - 0.7311).abs() < 1e-4);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let (g, b) = (t.constant(Tensor::ones(&[2])), t.constant(tensor(&[2], vec![0.5, -0.5])));
    let x = t.constant(tensor(&[1, 2], vec![4., 4.]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -0.5]);
    let zero = t.constant(Tensor::zeros(&[2]));
    let x = t.constant(tensor(&[1, 2], vec![1., 3.]));
    let y = t.layer_norm(x, g, zero, 1e-12).unwrap();
    let v = t.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    // Logits heavily favouring the targets approach zero loss.
    let mut confident = vec![-50.0; 2 * 4];
    confident[1] = 50.0;
    confident[4 + 3] = 50.0;
    let x = t.constant(tensor(&[1, 2, 4], confident));
    let l = t.cross_entropy(x, &[1, 3], 0).unwrap();
    assert!(t.value(l).item() < 1e-40);

    let x = t.constant(Tensor::zeros(&[1, 2, 4]));
    let l = t.cross_entropy(x, &[1, 3], 0).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

    // Appending pad-only positions leaves the loss unchanged.
    let mut r = rng(4);
    let base = randn(&[1, 2, 5], &mut r);
    let mut longer = base.data().to_vec();
    longer.extend(randn(&[3 * 5], &mut r).data());
    let a = t.constant(base);
    let b = t.constant(tensor(&[1, 5, 5], longer));
    let la = t.cross_entropy(a, &[2, 4], 0).unwrap();
    let lb = t.cross_entropy(b, &[2, 4, 0, 0, 0], 0).unwrap();
    assert_eq!(t.value(la).item(), t.value(lb).item());

    let all_pad = t.constant(Tensor::zeros(&[1, 2, 4]));
    assert!(matches!(t.cross_entropy(all_pad, &[0, 0], 0), Err(Error::Degenerate(_))));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let w = t.leaf(tensor(&[2], vec![1., 2.]));
    let l = t.sum(w);
    assert_eq!(t.backward(l).unwrap().get(w).unwrap().data(), &[1., 1.]);
    let sq = t.mul(w, w).unwrap();
    let l = t.sum(sq);
    assert_eq!(t.backward(l).unwrap().get(w).unwrap().data(), &[2., 4.]);
    assert!(matches!(t.backward(w), Err(Error::Contract(_))));
}

#[test]
fn unreachable_and_detached_get_no_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::ones(&[2]));
    let unused = t.leaf(Tensor::ones(&[2]));
    let d = t.detach(a);
    let m = t.mul(a, d).unwrap();
    let l = t.sum(m);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[1., 1.]);
    assert!(g.get(unused).is_none_or(|u| u.data().iter().all(|&x| x == 0.0)));
    assert!(g.get(d).is_none_or(|u| u.data().iter().all(|&x| x == 0.0)) || !t.requires_grad(d));
}

#[test]
fn gradients_accumulate_over_consumers() {
    let mut t = Tape::new();
    let a = t.leaf(tensor(&[1], vec![3.]));
    let b = t.add(a, a).unwrap();
    let c = t.mul(b, a).unwrap();
    let l = t.sum(c);
    // l = 2a^2, dl/da = 4a
    assert_eq!(t.backward(l).unwrap().get(a).unwrap().data(), &[12.]);
}

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(-20.0f64..20.0, n))
    })
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one_and_ignore_shifts((shape, data) in shape_and_data(), axis_pick in 0usize..3, c in -100.0f64..100.0) {
        let axis = axis_pick % shape.len();
        let mut t = Tape::new();
        let x = t.constant(tensor(&shape, data.clone()));
        let shifted = t.constant(tensor(&shape, data.iter().map(|v| v + c).collect()));
        let s = t.softmax(x, axis).unwrap();
        let ss = t.softmax(shifted, axis).unwrap();
        let (p, q) = (t.value(s).clone(), t.value(ss).clone());
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..shape[axis]).map(|k| p.data()[(o * shape[axis] + k) * inner + i]).sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
            }
        }
        prop_assert!(p.max_abs_diff(&q) <= 1e-12);
    }

    #[test]
    fn backward_is_bit_reproducible(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut t = Tape::new();
        let a = t.leaf(randn(&[3, 4], &mut r));
        let b = t.leaf(randn(&[4, 3], &mut r));
        let p = t.matmul(a, b).unwrap();
        let s = t.softmax(p, 1).unwrap();
        let s3 = t.reshape(s, &[1, 3, 3]).unwrap();
        let l = t.cross_entropy(s3, &[1, 2, 0], 0).unwrap();
        let (g1, g2) = (t.backward(l).unwrap(), t.backward(l).unwrap());
        prop_assert_eq!(g1.get(a).unwrap(), g2.get(a).unwrap());
        prop_assert_eq!(g1.get(b).unwrap(), g2.get(b).unwrap());
    }

    #[test]
    fn finite_differences_on_random_composites(seed in 0u64..200) {
        let mut r = rng(seed);
        let inputs = vec![randn(&[2, 3], &mut r), randn(&[3, 4], &mut r), randn(&[4], &mut r)];
        let err = check_op(&inputs, seed, &|t, v| {
            let p = t.matmul(v[0], v[1])?;
            let q = t.add_broadcast(p, v[2])?;
            let s = t.softmax(q, 1)?;
            t.mul(s, q)
        });
        prop_assert!(err < FD_TOL, "relative error {}", err);
    }
}
