use super::*;
use crate::Error;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_swap() {
    let id = Tensor::identity(2);
    let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let swap = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
    let mut g = Graph::new();
    let (vi, va, vs) = (g.leaf(&id, false), g.leaf(&a, false), g.leaf(&swap, false));
    let c = g.matmul(vi, va).unwrap();
    assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    let d = g.matmul(va, vs).unwrap();
    assert_eq!(g.value(d), &[2.0, 1.0, 4.0, 3.0]);
}

#[test]
fn matmul_zero_annihilates() {
    let z = Tensor::zeros(&[2, 3]);
    let b = Tensor::filled(&[3, 4], 7.5);
    let mut g = Graph::new();
    let (vz, vb) = (g.leaf(&z, false), g.leaf(&b, false));
    let c = g.matmul(vz, vb).unwrap();
    assert_eq!(g.shape(c), (2, 4));
    assert!(g.value(c).iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(&a, false), g.leaf(&b, false));
    let err = g.matmul(va, vb).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape(_)));
    assert!(msg.contains("2x3") && msg.contains("[2x3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let x = m(&[&[0.3, 0.3, 0.3], &[0.0, 2f64.ln(), 0.0], &[1000.0, 0.0, 0.0]]);
    let mut g = Graph::new();
    let v = g.leaf(&x, false);
    let y = g.softmax_rows(v).unwrap();
    let out = g.value(y);
    for j in 0..3 {
        assert!((out[j] - 1.0 / 3.0).abs() < 1e-15);
    }
    // [0, ln 2, 0] -> [1/4, 1/2, 1/4]; the two-column case is checked below
    assert!((out[4] - 0.5).abs() < 1e-15);
    assert!((out[6] - 1.0).abs() < 1e-15 && out[7] < 1e-300);

    let two = m(&[&[0.0, 2f64.ln()]]);
    let mut g = Graph::new();
    let v = g.leaf(&two, false);
    let y = g.softmax_rows(v).unwrap();
    assert!((g.value(y)[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((g.value(y)[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rejects_non_finite_input() {
    let x = m(&[&[f64::NAN, 0.0]]);
    let mut g = Graph::new();
    let v = g.leaf(&x, false);
    assert!(matches!(g.softmax_rows(v), Err(Error::Numeric { .. })));
}

#[test]
fn cross_entropy_examples() {
    // confident and correct
    let logits = m(&[&[50.0, 0.0, 0.0]]);
    let mut g = Graph::new();
    let v = g.leaf(&logits, false);
    let l = g.cross_entropy_masked(v, &[0], &[true]).unwrap();
    assert!(g.scalar_value(l) < 1e-6);

    // uniform over 8
    let logits = Tensor::zeros(&[1, 8]);
    let mut g = Graph::new();
    let v = g.leaf(&logits, false);
    let l = g.cross_entropy_masked(v, &[3], &[true]).unwrap();
    assert!((g.scalar_value(l) - 8f64.ln()).abs() < 1e-12);
    assert!((g.scalar_value(l) - 2.0794).abs() < 1e-4);

    // masked-out row does not contribute: hand value -log softmax([1,2,3])[2]
    let logits = m(&[&[5.0, -1.0, 0.0], &[1.0, 2.0, 3.0]]);
    let hand = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
    let mut g = Graph::new();
    let v = g.leaf(&logits, false);
    let l = g.cross_entropy_masked(v, &[1, 2], &[false, true]).unwrap();
    assert!((g.scalar_value(l) - hand).abs() < 1e-12);
}

#[test]
fn cross_entropy_errors() {
    let logits = Tensor::zeros(&[2, 4]);
    let mut g = Graph::new();
    let v = g.leaf(&logits, false);
    assert!(matches!(
        g.cross_entropy_masked(v, &[0, 1], &[false, false]),
        Err(Error::DegenerateLoss(_))
    ));
    assert!(matches!(
        g.cross_entropy_masked(v, &[0, 4], &[false, true]),
        Err(Error::Index(_))
    ));
    // an out-of-range id on a masked-out row is ignored
    assert!(g.cross_entropy_masked(v, &[0, 9], &[true, false]).is_ok());
}

#[test]
fn backward_linear_and_square() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let mut g = Graph::new();
    let v = g.leaf(&x, true);
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let v = g.leaf(&x, true);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn fan_out_sums_contributions() {
    let x = Tensor::scalar(0.7);
    let mut g = Graph::new();
    let v = g.leaf(&x, true);
    let y = g.add(v, v).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[2.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let x = Tensor::vector(vec![1.0, -2.0]);
    let mut g = Graph::new();
    let v = g.leaf(&x, true);
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(v).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let mut g = Graph::new();
    let v = g.leaf(&x, true);
    assert!(matches!(g.backward(v), Err(Error::Contract(_))));
}

#[test]
fn frozen_leaf_gets_no_grad() {
    let w = Tensor::vector(vec![1.0, 2.0]);
    let x = Tensor::vector(vec![3.0, 4.0]);
    let mut g = Graph::new();
    let vw = g.leaf(&w, false);
    let vx = g.leaf(&x, true);
    let p = g.mul(vw, vx).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(vw).is_none());
    assert_eq!(g.grad(vx).unwrap(), &[1.0, 2.0]);
}

#[test]
fn stack_frames_pads_tail() {
    let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(&x, false);
    let s = g.stack_frames(v, 2).unwrap();
    assert_eq!(g.shape(s), (2, 4));
    assert_eq!(g.value(s), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn causal_mask_blocks_future() {
    let mask = causal_mask(3);
    assert_eq!(
        mask,
        vec![false, true, true, false, false, true, false, false, false]
    );
    let x = Tensor::zeros(&[3, 3]);
    let mut g = Graph::new();
    let v = g.leaf(&x, false);
    let f = g.mask_fill(v, mask).unwrap();
    let p = g.softmax_rows(f).unwrap();
    assert_eq!(&g.value(p)[..3], &[1.0, 0.0, 0.0]);
}
