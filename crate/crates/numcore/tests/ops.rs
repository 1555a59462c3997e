use t2td_numcore::nn::MultiHeadAttention;
use t2td_numcore::{NumError, ParamStore, Tape, Tensor};

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(Tensor::row(&[1.0, 2.0]));
    let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.shape(c), &[1, 1]);
    assert_eq!(t.value(c).item(), 11.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(NumError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]).unwrap());
    let s = t.softmax_rows(x).unwrap();
    let v = t.value(s).data();
    close(&v[0..2], &[1.0 / 3.0, 1.0 / 3.0], 1e-12);
    assert!((v[3] - 1.0).abs() < 1e-12 && v[4] < 1e-300);
    close(&v[6..9], &[0.09003, 0.24473, 0.66524], 1e-5);
    for row in v.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(&[0.0, 0.0]));
    let s = t.softmax_rows(x).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn attention_single_key_returns_value_under_identity_projections() {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::identity(&mut store, "a", 8, 2).unwrap();
    let mut t = Tape::new();
    let q = t.constant(Tensor::from_rows(&[vec![0.3; 8], vec![-1.0; 8], vec![2.0; 8]]).unwrap());
    let kv = Tensor::row(&[1.0, -2.0, 3.0, 0.5, 0.0, 7.0, -1.0, 2.0]);
    let k = t.constant(kv.clone());
    let out = mha.forward(&mut t, &store, q, k, k, None).unwrap();
    assert_eq!(t.shape(out), &[3, 8]);
    for r in 0..3 {
        close(t.value(out).row_slice(r), kv.data(), 1e-12);
    }
}

#[test]
fn attention_shape_contract_and_head_error() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 64, 4, false, &mut rng).unwrap();
    let mut t = Tape::new();
    let q = t.constant(Tensor::randn(&[7, 64], 1.0, &mut rng));
    let k = t.constant(Tensor::randn(&[3, 64], 1.0, &mut rng));
    let out = mha.forward(&mut t, &store, q, k, k, None).unwrap();
    assert_eq!(t.shape(out), &[7, 64]);

    let mut store = ParamStore::new();
    assert!(matches!(
        MultiHeadAttention::new(&mut store, "b", 10, 4, false, &mut rng),
        Err(NumError::Config(_))
    ));
}

#[test]
fn conv3d_identity_and_counting() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let mut t = Tape::new();
    let x = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
    let xv = t.constant(x.clone());
    let k = t.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let y = t.conv3d(xv, k, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);

    let ones = t.constant(Tensor::full(&[1, 2, 2, 2], 1.0));
    let k = t.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    let y = t.conv3d(ones, k, None, 2, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).item(), 8.0);
}

#[test]
fn conv3d_rejects_non_integral_output() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 16, 16, 16]));
    let k = t.constant(Tensor::zeros(&[2, 1, 3, 3, 3]));
    assert!(t.conv3d(x, k, None, 2, 1).is_err());
    assert!(t.conv3d(x, k, None, 1, 1).is_ok());
}

#[test]
fn cosine_of_vector_with_itself_is_one() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
    for _ in 0..10 {
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[3, 17], 2.0, &mut rng));
        let c = t.cosine_similarity(x, x).unwrap();
        for v in t.value(c).data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn mean_pool_ignores_masked_rows_and_rejects_empty_mask() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![100.0, 100.0]]).unwrap());
    let p = t.mean_pool(x, &[true, true, false]).unwrap();
    assert_eq!(t.value(p).data(), &[2.0, 3.0]);
    assert!(t.mean_pool(x, &[false, false, false]).is_err());
}

#[test]
fn elementwise_ops_reject_mismatched_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    assert!(t.add(a, b).is_err());
    assert!(t.mul(a, b).is_err());
    let bias = t.constant(Tensor::zeros(&[2]));
    assert!(t.add_row(a, bias).is_err());
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 16, 4, false, &mut rng).unwrap();
        let mut t = Tape::new();
        let q = t.constant(Tensor::randn(&[5, 16], 1.0, &mut rng));
        let out = mha.forward(&mut t, &store, q, q, q, None).unwrap();
        t.value(out).data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
