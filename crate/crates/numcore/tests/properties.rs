//! Randomized invariants of tensor ops and the checkpoint codec.

use proptest::prelude::*;
use t2td_numcore::checkpoint::{decode_tensors, encode_tensors};
use t2td_numcore::{Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..4, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.softmax_rows(v).unwrap();
        let (_, c) = x.dims2().unwrap();
        for row in tape.value(s).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_matmul_agrees_with_explicit_transpose((a, b) in sized()) {
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let direct = tape.matmul(av, bv).unwrap();
        let at = tape.transpose(av).unwrap();
        let bt = tape.transpose(bv).unwrap();
        let via = tape.matmul_t(at, true, bt, true).unwrap();
        let (x, y) = (tape.value(direct).data(), tape.value(via).data());
        prop_assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn checkpoint_round_trips_f32_values(t in (1usize..4, 1usize..4).prop_flat_map(|(r, c)| matrix(r, c)), name in "[a-z.]{1,12}") {
        let bytes = encode_tensors([(name.as_str(), &t)]);
        let back = decode_tensors(&bytes).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].0, &name);
        prop_assert_eq!(back[0].1.shape(), t.shape());
        for (a, b) in back[0].1.data().iter().zip(t.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..40) {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensors([("w", &t)]);
        prop_assume!(cut < bytes.len());
        prop_assert!(decode_tensors(&bytes[..cut]).is_err());
    }
}
