use proptest::prelude::*;
use qim::ops::{affine, conv2d_valid, relu, row_col_max, softmax, softmax_cross_entropy};
use qim::tape::Tape;
use qim::Tensor;

fn matrix(h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |v| Tensor::from_vec(&[h, w], v).unwrap())
}

fn conv_case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>, f64, f64)> {
    (1usize..=16, 1usize..=16)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), 1..=h.min(w)))
        .prop_flat_map(|(h, w, k)| (matrix(h, w), matrix(h, w), matrix(k, k), -3.0f64..3.0, -3.0f64..3.0))
}

/// Direct sum over the window, written independently of the library.
fn conv_oracle(a: &Tensor<f64>, k: &Tensor<f64>) -> Vec<f64> {
    let (h, w, kk) = (a.shape()[0], a.shape()[1], k.shape()[0]);
    let mut out = Vec::new();
    for i in 0..=h - kk {
        for j in 0..=w - kk {
            let mut acc = 0.0;
            for p in 0..kk {
                for q in 0..kk {
                    acc += a.at2(i + p, j + q) * k.at2(p, q);
                }
            }
            out.push(acc);
        }
    }
    out
}

proptest! {
    #[test]
    fn conv_is_linear_in_input((a, b, k, alpha, beta) in conv_case()) {
        let mixed: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect();
        let mixed = Tensor::from_vec(a.shape(), mixed).unwrap();
        let lhs = conv2d_valid(&mixed, &k).unwrap();
        let (ca, cb) = (conv2d_valid(&a, &k).unwrap(), conv2d_valid(&b, &k).unwrap());
        for ((l, x), y) in lhs.data().iter().zip(ca.data()).zip(cb.data()) {
            prop_assert!((l - (alpha * x + beta * y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_matches_window_sum((a, _b, k, _x, _y) in conv_case()) {
        let out = conv2d_valid(&a, &k).unwrap();
        prop_assert_eq!(out.shape(), &[a.shape()[0] - k.shape()[0] + 1, a.shape()[1] - k.shape()[0] + 1][..]);
        for (x, y) in out.data().iter().zip(conv_oracle(&a, &k)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn symmetric_input_gives_equal_row_and_col_max(n in 1usize..10, seed in prop::collection::vec(-5.0f64..5.0, 100)) {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                m[i * n + j] = seed[i * 10 + j];
                m[j * n + i] = seed[i * 10 + j];
            }
        }
        let pooled = row_col_max(&Tensor::from_vec(&[n, n], m).unwrap()).unwrap();
        prop_assert_eq!(pooled.row_max, pooled.col_max);
    }

    #[test]
    fn cross_entropy_is_non_negative(logits in prop::collection::vec(-50.0f64..50.0, 2..12), pick in 0usize..100) {
        let c = logits.len();
        let label = pick % c;
        let (loss, grad) = softmax_cross_entropy(&Tensor::from_vec(&[c], logits.clone()).unwrap(), &[label]).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(grad.data().iter().sum::<f64>().abs() < 1e-12);
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_at_uniform_logits_is_ln_c(c in 2usize..64, v in -10.0f64..10.0) {
        let (loss, _) = softmax_cross_entropy(&Tensor::full(&[c], v), &[0]).unwrap();
        prop_assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn relu_is_idempotent_and_non_negative(x in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let t = Tensor::from_vec(&[x.len()], x).unwrap();
        let once = relu(&t);
        prop_assert!(once.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(relu(&once), once);
    }

    #[test]
    fn affine_identity_passes_input_through(x in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let n = x.len();
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let out = affine(
            &Tensor::from_vec(&[n], x.clone()).unwrap(),
            &Tensor::from_vec(&[n, n], eye).unwrap(),
            &Tensor::zeros(&[n]),
        )
        .unwrap();
        prop_assert_eq!(out.data(), &x[..]);
    }
}

#[test]
fn conv_examples() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    assert_eq!(conv2d_valid(&a, &Tensor::full(&[2, 2], 1.0)).unwrap().data(), &[10.0]);
    let nine = Tensor::from_vec(&[3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let pick = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]).unwrap();
    assert_eq!(conv2d_valid(&nine, &pick).unwrap().data(), &[5.0, 6.0, 8.0, 9.0]);
}

#[test]
fn row_col_max_examples() {
    let p = row_col_max(&Tensor::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]).unwrap()).unwrap();
    assert_eq!((p.row_max, p.col_max), (vec![5.0, 3.0], vec![3.0, 5.0]));
    let p = row_col_max(&Tensor::from_rows(&[&[7.0]]).unwrap()).unwrap();
    assert_eq!((p.row_max, p.col_max), (vec![7.0], vec![7.0]));
}

#[test]
fn every_reachable_node_gets_one_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap());
    let y = t.relu(x).unwrap();
    let z = t.mul(y, y).unwrap();
    let loss = t.weighted_sum(z, Tensor::full(&[3], 1.0)).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 0.0, 6.0]);
    // a second pass starts from cleared gradients
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 0.0, 6.0]);
}

#[test]
fn non_finite_values_are_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_vec(&[2], vec![1e308, 1e308]).unwrap());
    assert!(matches!(t.mul(x, x), Err(qim::Error::NonFinite { .. })));
}
