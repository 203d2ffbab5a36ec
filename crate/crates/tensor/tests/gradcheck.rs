//! Central-difference checks for every differentiable tape operation.

use ctf_tensor::{NodeId, SeedStream, SequenceLayout, Tape, Tensor};

/// Largest |analytic - numeric| across the checked coordinates of each input,
/// divided by the largest |numeric| of that input.
fn max_relative_error(
    inputs: &[Tensor],
    eps: f32,
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> f32 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &ids);
        t.value(l).data()[0] as f64
    };

    let mut worst = 0.0f32;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(ids[which]);
        let mut max_err = 0.0f64;
        let mut max_num = 0.0f64;
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps as f64);
            max_err = max_err.max((numeric - analytic.data()[i] as f64).abs());
            max_num = max_num.max(numeric.abs());
        }
        worst = worst.max((max_err / max_num.max(1e-6)) as f32);
    }
    worst
}

fn rand(shape: &[usize], std: f32, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut SeedStream::new(seed))
}

/// Weighted sum with fixed random weights so gradients are not trivially uniform.
fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> NodeId {
    let w = tape.constant(rand(tape.value(x).shape(), 1.0, seed));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

// Central differences are exact for functions that are at most quadratic in each
// coordinate, so linear subgraphs use a wider step to keep f32 rounding out of the check.
const LINEAR_EPS: f32 = 1e-2;
const EPS: f32 = 1e-3;

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.param(rand(&[2, 3, 4], 1.0, 1));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap().wrt(x);
    assert!(g.data().iter().all(|&v| v == 1.0));
    assert_eq!(g.shape(), &[2, 3, 4]);
}

#[test]
fn square_sum_gradient_is_twice_input() {
    let mut tape = Tape::new();
    let xt = rand(&[5], 1.0, 2);
    let x = tape.param(xt.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap().wrt(x);
    for (gv, xv) in g.data().iter().zip(xt.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(rand(&[3], 1.0, 3));
    let unused = tape.param(rand(&[4], 1.0, 4));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(unused), Tensor::zeros(&[4]));
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::new();
    let x = tape.param(rand(&[3], 1.0, 3));
    assert!(matches!(tape.backward(x), Err(ctf_tensor::TensorError::Contract(_))));
}

#[test]
fn linear_ops_pass_tight_check() {
    let inputs = vec![rand(&[3, 4], 1.0, 10), rand(&[4, 2], 1.0, 11), rand(&[2], 1.0, 12)];
    let err = max_relative_error(&inputs, LINEAR_EPS, |t, ids| {
        let y = t.matmul(ids[0], ids[1]).unwrap();
        let y = t.add_bias(y, ids[2]).unwrap();
        let y2 = t.scale(y, -0.5).unwrap();
        let z = t.sub(y, y2).unwrap();
        let z = t.add(z, y).unwrap();
        weighted_sum(t, z, 13)
    });
    assert!(err < 1e-4, "linear subgraph relative error {err}");
}

#[test]
fn gather_and_embed_pass_tight_check() {
    let inputs = vec![rand(&[5, 3], 1.0, 20), rand(&[3, 3], 1.0, 21), rand(&[4, 3], 1.0, 22)];
    let err = max_relative_error(&inputs, LINEAR_EPS, |t, ids| {
        let layout = SequenceLayout { tokens: vec![4, 0, 0, 2, 2, 1], classes: vec![2, 0], seq: 4 };
        let e = t.embed(ids[0], ids[1], ids[2], layout).unwrap();
        let g = t.gather_rows(ids[0], &[1, 1, 3]).unwrap();
        let a = weighted_sum(t, e, 23);
        let b = weighted_sum(t, g, 24);
        t.add(a, b).unwrap()
    });
    assert!(err < 1e-4, "embedding relative error {err}");
}

#[test]
fn mse_and_product_pass_check() {
    let inputs = vec![rand(&[3, 3], 1.0, 30), rand(&[3, 3], 1.0, 31)];
    let err = max_relative_error(&inputs, LINEAR_EPS, |t, ids| {
        let m = t.mse(ids[0], ids[1]).unwrap();
        let p = t.mul(ids[0], ids[1]).unwrap();
        let s = weighted_sum(t, p, 32);
        t.add(m, s).unwrap()
    });
    assert!(err < 1e-4, "quadratic relative error {err}");
}

#[test]
fn gelu_passes_check() {
    let inputs = vec![rand(&[4, 5], 1.5, 40)];
    let err = max_relative_error(&inputs, EPS, |t, ids| {
        let g = t.gelu(ids[0]).unwrap();
        weighted_sum(t, g, 41)
    });
    assert!(err < 1e-2, "gelu relative error {err}");
}

#[test]
fn rms_norm_passes_check() {
    let inputs = vec![rand(&[3, 6], 1.0, 50), rand(&[6], 1.0, 51)];
    let err = max_relative_error(&inputs, EPS, |t, ids| {
        let n = t.rms_norm(ids[0], ids[1]).unwrap();
        weighted_sum(t, n, 52)
    });
    assert!(err < 1e-2, "rms_norm relative error {err}");
}

#[test]
fn attention_passes_check_causal_and_full() {
    for causal in [true, false] {
        let inputs = vec![rand(&[2 * 4, 3 * 6], 1.0, 60)];
        let err = max_relative_error(&inputs, EPS, |t, ids| {
            let o = t.attention(ids[0], 2, 4, 2, causal).unwrap();
            weighted_sum(t, o, 61)
        });
        assert!(err < 1e-2, "attention (causal={causal}) relative error {err}");
    }
}

#[test]
fn cross_entropy_passes_check_plain_ignored_and_restricted() {
    let inputs = vec![rand(&[4, 6], 2.0, 70)];
    let err = max_relative_error(&inputs, EPS, |t, ids| t.cross_entropy(ids[0], &[1, 5, 99, 0], Some(99), None).unwrap());
    assert!(err < 1e-2, "cross entropy relative error {err}");

    let allowed = vec![vec![0, 1, 2], vec![3, 4, 5], vec![0, 5], vec![2]];
    let err = max_relative_error(&inputs, EPS, |t, ids| {
        t.cross_entropy(ids[0], &[1, 4, 5, 2], None, Some(&allowed)).unwrap()
    });
    assert!(err < 1e-2, "restricted cross entropy relative error {err}");
}

#[test]
fn cross_entropy_edge_values() {
    // uniform logits give ln V
    for v in [2usize, 512, 16384] {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[1, v]));
        let ce = t.cross_entropy(l, &[0], None, None).unwrap();
        assert!((t.value(ce).data()[0] as f64 - (v as f64).ln()).abs() < 1e-4);
    }
    let mut t = Tape::new();
    let mut row = vec![0.0; 10];
    row[0] = 100.0;
    let l = t.constant(Tensor::new(vec![1, 10], row).unwrap());
    let ce = t.cross_entropy(l, &[0], None, None).unwrap();
    assert!(t.value(ce).data()[0] < 1e-6);
    let bad = t.cross_entropy(l, &[10], None, None);
    assert!(matches!(bad, Err(ctf_tensor::TensorError::Index(_))));
}

#[test]
fn scalar_oracle_cross_entropy() {
    let logits = rand(&[4, 8], 1.0, 80);
    let targets = [3usize, 0, 7, 5];
    let mut want = 0.0f64;
    for (r, &tgt) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|&v| v as f64).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want += -(row[tgt].exp() / z).ln();
    }
    want /= 4.0;
    let mut t = Tape::new();
    let l = t.constant(logits);
    let ce = t.cross_entropy(l, &targets, None, None).unwrap();
    assert!((t.value(ce).data()[0] as f64 - want).abs() < 1e-5);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new(vec![1], vec![f32::MAX]).unwrap());
    assert!(matches!(t.scale(a, 10.0), Err(ctf_tensor::TensorError::NonFinite(_))));
}
