use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn matmul_identity() {
    let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(eye.matmul(&x).data(), x.data());
}

#[test]
fn matmul_hand_arithmetic() {
    let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let b = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]);
    assert_eq!(a.matmul(&b).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = randn(&mut rng, vec![3, 2]);
    let a = randn(&mut rng, vec![2, 3]);
    let report = grad_check(|x| x.matmul(&b).sum_all(), &a, 1e-5);
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
#[should_panic(expected = "inner dimensions disagree")]
fn matmul_shape_mismatch_panics() {
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![2, 3]);
    let _ = a.matmul(&b);
}

#[test]
fn softmax_symmetry() {
    let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]);
    assert_eq!(x.softmax(0).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_closed_form() {
    let x = Tensor::from_vec(vec![2], vec![1f64.ln(), 3f64.ln()]);
    let y = x.softmax(0);
    assert!((y.data()[0] - 0.25).abs() < 1e-12);
    assert!((y.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_no_overflow() {
    let x = Tensor::from_vec(vec![2], vec![1000.0, 0.0]);
    let y = x.softmax(0);
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert!(y.data()[0] > 1.0 - 1e-12);
    assert!(y.data()[1] < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, vec![4, 5]);
    let y = x.softmax(1);
    for r in 0..4 {
        let s: f64 = y.data()[r * 5..(r + 1) * 5].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layernorm_constant_row_is_zero() {
    let x = Tensor::full(vec![1, 4], 3.5);
    let gamma = Tensor::full(vec![4], 1.0);
    let beta = Tensor::zeros(vec![4]);
    let y = x.layernorm(&gamma, &beta, 1e-5);
    assert!(y.data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn layernorm_two_point_row() {
    let x = Tensor::from_vec(vec![1, 2], vec![1.0, 3.0]);
    let gamma = Tensor::full(vec![2], 1.0);
    let beta = Tensor::zeros(vec![2]);
    let y = x.layernorm(&gamma, &beta, 1e-12);
    assert!((y.data()[0] + 1.0).abs() < 1e-5);
    assert!((y.data()[1] - 1.0).abs() < 1e-5);
}

#[test]
fn layernorm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, vec![3, 4]);
    let gamma = randn(&mut rng, vec![4]);
    let beta = randn(&mut rng, vec![4]);
    let w = randn(&mut rng, vec![3, 4]);
    let report = grad_check(
        |x| x.layernorm(&gamma, &beta, 1e-5).mul(&w).sum_all(),
        &x,
        1e-5,
    );
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn relu_and_sigmoid_values() {
    let x = Tensor::from_vec(vec![2], vec![-1.0, 2.0]);
    assert_eq!(x.relu().data(), &[0.0, 2.0]);
    assert_eq!(Tensor::scalar_tensor(0.0).sigmoid().scalar(), 0.5);
}

#[test]
fn gelu_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, vec![6]);
    let w = randn(&mut rng, vec![6]);
    let report = grad_check(|x| x.gelu().mul(&w).sum_all(), &x, 1e-5);
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]), true);
    tape.backward(&x.sum_all());
    assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]), true);
    tape.backward(&x.mul(&x).sum_all());
    assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]), true);
    let loss = x.mul(&x).sum_all();
    tape.backward(&loss);
    tape.backward(&loss);
    assert_eq!(tape.grad(&x).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grads();
    assert!(tape.grad(&x).is_none());
    tape.backward(&loss);
    assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn diamond_graph_sums_path_gradients() {
    // s = x + 1 feeds both factors of s*s: dy/dx = 2s.
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]), true);
    let s = x.add_scalar(1.0);
    let y = s.mul(&s).sum_all();
    assert_eq!(y.scalar(), 13.0);
    tape.backward(&y);
    assert_eq!(tape.grad(&x).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn grad_buffer_exists_even_without_path() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]), true);
    let unused = tape.leaf(&Tensor::from_vec(vec![3], vec![0.0; 3]), true);
    tape.backward(&x.sum_all());
    let g = tape.grad(&unused).unwrap();
    assert_eq!(g.shape(), &[3]);
    assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
}

#[test]
#[should_panic(expected = "scalar loss")]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![2]), true);
    tape.backward(&x.relu());
}

#[test]
#[should_panic(expected = "different tapes")]
fn mixing_tapes_panics() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.leaf(&Tensor::zeros(vec![2]), true);
    let b = t2.leaf(&Tensor::zeros(vec![2]), true);
    let _ = a.add(&b);
}

#[cfg(debug_assertions)]
#[test]
#[should_panic(expected = "log of non-positive")]
fn log_rejects_non_positive_in_debug() {
    let _ = Tensor::from_vec(vec![1], vec![-1.0]).log();
}

#[cfg(debug_assertions)]
#[test]
#[should_panic(expected = "division by zero")]
fn div_rejects_zero_in_debug() {
    let a = Tensor::from_vec(vec![1], vec![1.0]);
    let b = Tensor::from_vec(vec![1], vec![0.0]);
    let _ = a.div(&b);
}

#[test]
#[should_panic(expected = "gather index")]
fn gather_out_of_range_panics() {
    let t = Tensor::zeros(vec![2, 2]);
    let _ = t.gather_rows(&[2]);
}

#[test]
fn grad_check_on_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randn(&mut rng, vec![5]);
    let report = grad_check(|x| x.sum_all(), &x, 1e-5);
    assert!(report.max_rel_err < 1e-10);
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let logits = randn(&mut rng, vec![6]);
    // -log softmax(x)[2]
    let report = grad_check(
        |x| x.softmax(0).slice_rows(2, 1).log().neg().sum_all(),
        &logits,
        1e-5,
    );
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn grad_check_detects_corrupted_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn(&mut rng, vec![4]);
    let w = randn(&mut rng, vec![4]);
    // Same check as above but run against a sabotaged tape by hand: the
    // harness must report a large error when the mul rule is corrupted.
    let tape = Tape::new();
    tape.sabotage_backward("mul", 1.5);
    let xb = tape.leaf(&x, true);
    let y = xb.mul(&w).sum_all();
    tape.backward(&y);
    let auto = tape.grad(&xb).unwrap();
    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let mut p = x.data().to_vec();
        p[i] += 1e-5;
        let fp = Tensor::from_vec(vec![4], p.clone()).mul(&w).sum_all().scalar();
        p[i] -= 2e-5;
        let fm = Tensor::from_vec(vec![4], p).mul(&w).sum_all().scalar();
        let fd = (fp - fm) / 2e-5;
        let a = auto.data()[i];
        max_rel = max_rel.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
    }
    assert!(max_rel > 1e-2, "sabotaged rule went undetected: {max_rel}");
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let tape = Tape::new();
        let x = tape.leaf(&randn(&mut rng, vec![4, 4]), true);
        let w = randn(&mut rng, vec![4, 4]);
        let loss = x.matmul(&w).gelu().softmax(1).mul(&x).sum_all();
        tape.backward(&loss);
        (loss.scalar(), tape.grad(&x).unwrap().data().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert!(l1.to_bits() == l2.to_bits());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn broadcast_add_bias_reduces_gradient() {
    let tape = Tape::new();
    let bias = tape.leaf(&Tensor::from_vec(vec![2], vec![0.1, 0.2]), true);
    let x = Tensor::from_vec(vec![3, 2], vec![1.0; 6]);
    tape.backward(&x.add(&bias).sum_all());
    assert_eq!(tape.grad(&bias).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn scalar_broadcast_division() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = randn(&mut rng, vec![5]);
    let w = randn(&mut rng, vec![5]);
    let report = grad_check(
        |x| {
            let norm = x.mul(x).sum_all().add_scalar(1.0).sqrt();
            x.div(&norm).mul(&w).sum_all()
        },
        &x,
        1e-5,
    );
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn slice_concat_roundtrip_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = randn(&mut rng, vec![4, 3]);
    let w = randn(&mut rng, vec![4, 3]);
    let report = grad_check(
        |x| {
            let a = x.slice_rows(0, 2);
            let b = x.slice_rows(2, 2);
            Tensor::concat_rows(&[&b, &a]).mul(&w).sum_all()
        },
        &x,
        1e-5,
    );
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn gather_gradient_is_sparse() {
    let tape = Tape::new();
    let table = tape.leaf(
        &Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        true,
    );
    tape.backward(&table.gather_rows(&[1, 1]).sum_all());
    assert_eq!(tape.grad(&table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
}
