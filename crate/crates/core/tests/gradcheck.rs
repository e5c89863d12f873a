mod common;

use common::grad::{full_model_error, kernel_errors, random_graph_error};
use s4rec_core::tensor::{Tape, Tensor};

const TOL: f64 = 1e-4;

#[test]
fn every_kernel_matches_central_differences() {
    let bad: Vec<_> = kernel_errors()
        .into_iter()
        .filter(|(_, e)| e.is_nan() || *e >= TOL)
        .collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn random_graphs_match_central_differences() {
    let err = random_graph_error(100);
    assert!(err < TOL, "{err}");
}

#[test]
fn full_model_gradient() {
    let (err, n) = full_model_error();
    assert!(n > 1000);
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_reverse_scales_upstream() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
    let y = tape.grad_reverse(x, 0.1).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, -2.0]);
    let s = tape.scale(y, 3.0);
    let s = tape.reduce_sum(s);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[-0.1 * 3.0, -0.1 * 3.0]);
    assert!(tape.grad_reverse(x, -1.0).is_err());
}
