use std::collections::BTreeMap;

use proptest::prelude::*;
use regcl_core::tensor::{adam_step, cosine_similarity, AdamConfig, AdamState, ParamSet, Tape};
use regcl_core::Tensor;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| (Just(r), Just(c), vec_of(r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in matrix(), shift in -50.0f64..50.0) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![r, c], data.clone()).unwrap());
        let s = tape.softmax_row(x);
        let p = tape.value(s).clone();
        for i in 0..r {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let y = tape.constant(Tensor::new(vec![r, c], shifted).unwrap());
        let q = tape.softmax_row(y);
        for (a, b) in p.data().iter().zip(tape.value(q).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant(
        (u, v) in (1usize..10).prop_flat_map(|n| (vec_of(n), vec_of(n))),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let uv = cosine_similarity(&u, &v).unwrap();
        let vu = cosine_similarity(&v, &u).unwrap();
        prop_assert_eq!(uv.degenerate, vu.degenerate);
        prop_assert!((uv.value - vu.value).abs() < 1e-6);
        let au: Vec<f64> = u.iter().map(|x| a * x).collect();
        let bv: Vec<f64> = v.iter().map(|x| b * x).collect();
        let scaled = cosine_similarity(&au, &bv).unwrap();
        prop_assert!((scaled.value - uv.value).abs() < 1e-6);
    }

    #[test]
    fn unused_leaf_gets_exact_zero((r, c, data) in matrix(), other in vec_of(4)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![r, c], data).unwrap());
        let unused = tape.param(Tensor::new(vec![4], other).unwrap());
        let y = tape.relu(x);
        let sq = tape.mul(y, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_with_zero_gradient_is_identity(values in vec_of(6), lr in 1e-5f64..1.0, steps in 1usize..5) {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2, 3], values.clone()).unwrap());
        let grads: BTreeMap<String, Tensor<f64>> = [("w".to_string(), Tensor::zeros(&[2, 3]))].into();
        let mut state = AdamState::new(AdamConfig::with_lr(lr));
        for _ in 0..steps {
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        prop_assert_eq!(params.get("w").unwrap().data(), &values[..]);
    }
}
