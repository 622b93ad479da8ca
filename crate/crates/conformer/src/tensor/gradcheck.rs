//! Central finite-difference verification of recorded gradients.

use super::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Compare the reverse-mode gradient of `f` (a tensor -> scalar function
/// built from tape ops) against central differences at each coordinate of
/// `input`. Relative error uses an absolute floor of 1e-8.
///
/// `f` must be deterministic and must return a scalar for every input.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> GradCheckReport
where
    F: Fn(&Tensor) -> Tensor,
{
    assert!((1e-7..=1e-2).contains(&eps), "eps {eps} outside [1e-7, 1e-2]");

    let tape = Tape::new();
    let x = tape.leaf(input, true);
    let y = f(&x);
    assert_eq!(y.numel(), 1, "grad_check function must return a scalar, got {:?}", y.shape());
    tape.backward(&y);
    let auto = tape.grad(&x).expect("no gradient reached the input");

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_index: 0 };
    let base = input.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let fp = f(&Tensor::from_vec(input.shape().to_vec(), plus)).scalar();
        let mut minus = base.clone();
        minus[i] -= eps;
        let fm = f(&Tensor::from_vec(input.shape().to_vec(), minus)).scalar();
        let fd = (fp - fm) / (2.0 * eps);
        let a = auto.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report
}
