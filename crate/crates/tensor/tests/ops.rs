use ctf_tensor::{matmul, softmax, SeedStream, Tape, Tensor};
use proptest::prelude::*;

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] as f64 * b.data()[l * n + j] as f64;
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_dot() {
    let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(matmul(&i2, &b).unwrap(), b);
    let row = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let col = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = SeedStream::new(5);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let got = matmul(&a, &b).unwrap();
    for (g, w) in got.data().iter().zip(triple_loop(&a, &b)) {
        assert!((*g as f64 - w).abs() < 1e-6);
    }
}

#[test]
fn matmul_dimension_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    assert!(matches!(matmul(&a, &a), Err(ctf_tensor::TensorError::Shape(_))));
    let mut t = Tape::new();
    let x = t.constant(a);
    assert!(t.matmul(x, x).is_err());
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0; 4], 1.0).unwrap(), vec![0.25; 4]);
    assert!(softmax(&[10.0, 0.0], 0.01).unwrap()[0] > 1.0 - 1e-6);
    // scalar oracle for [1,2,3]
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    let got = softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
    for (i, g) in got.iter().enumerate() {
        assert!((*g as f64 - ((i + 1) as f64).exp() / z).abs() < 1e-6);
    }
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
}

#[test]
fn randn_is_deterministic() {
    let a = Tensor::randn(&[16], 1.0, &mut SeedStream::new(9));
    let b = Tensor::randn(&[16], 1.0, &mut SeedStream::new(9));
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        // Dyadic grid values and integer shifts keep `v + shift` exact in f32.
        v in proptest::collection::vec((-1920i32..1920).prop_map(|i| i as f32 / 64.0), 1..64),
        shift in (-50i32..50).prop_map(|i| i as f32),
        tau in 0.05f32..4.0,
    ) {
        let p = softmax(&v, tau).unwrap();
        let s: f64 = p.iter().map(|&x| x as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        let shifted: Vec<f32> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tape_forward_is_bit_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = SeedStream::new(seed);
            let mut t = Tape::new();
            let a = t.param(Tensor::randn(&[4, 6], 1.0, &mut rng));
            let b = t.param(Tensor::randn(&[6, 3], 1.0, &mut rng));
            let y = t.matmul(a, b).unwrap();
            let y = t.gelu(y).unwrap();
            let l = t.cross_entropy(y, &[0, 1, 2, 0], None, None).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).clone(), g.wrt(a), g.wrt(b))
        };
        prop_assert_eq!(run(), run());
    }
}
