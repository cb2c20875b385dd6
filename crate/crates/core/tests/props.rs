//! Property tests for the numeric invariants that hold over whole input
//! ranges rather than hand-picked cases.

use melt_core::melt::{gated_update, GateParams, GateWiring};
use melt_core::tensor::Tensor;
use proptest::prelude::*;

fn finite_vals(n: usize, lim: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-lim..lim, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in finite_vals(24, 50.0)) {
        let x = Tensor::from_vec(vec![4, 6], vals);
        let y = x.softmax_rows(None).unwrap().to_vec();
        for r in 0..4 {
            let s: f64 = y[r * 6..(r + 1) * 6].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(vals in finite_vals(12, 40.0), shift in -30.0..30.0f64) {
        let x = Tensor::from_vec(vec![2, 6], vals.clone());
        let shifted = Tensor::from_vec(vec![2, 6], vals.iter().map(|v| v + shift).collect());
        let a = x.softmax_rows(None).unwrap().to_vec();
        let b = shifted.softmax_rows(None).unwrap().to_vec();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity_preserves_values(vals in finite_vals(16, 1e6)) {
        let a = Tensor::from_vec(vec![4, 4], vals.clone());
        let mut id = vec![0.0; 16];
        for i in 0..4 { id[i * 4 + i] = 1.0; }
        let i = Tensor::from_vec(vec![4, 4], id);
        prop_assert_eq!(a.matmul(&i).unwrap().to_vec(), vals);
    }

    #[test]
    fn gate_output_is_a_convex_combination(
        x in finite_vals(6, 5.0),
        h in finite_vals(6, 5.0),
        w in finite_vals(36, 0.5),
        u in finite_vals(36, 0.5),
        b in finite_vals(6, 3.0),
    ) {
        let gp = GateParams {
            w_z: Tensor::from_vec(vec![6, 6], w),
            u_z: Tensor::from_vec(vec![6, 6], u),
            b_z: Tensor::from_vec(vec![6], b),
        };
        let xt = Tensor::from_vec(vec![1, 6], x.clone());
        let ht = Tensor::from_vec(vec![1, 6], h.clone());
        let (out, z) = gated_update(&xt, &ht, &gp, GateWiring::Standard).unwrap();
        for (i, (o, zi)) in out.to_vec().iter().zip(z.to_vec()).enumerate() {
            prop_assert!(zi > 0.0 && zi < 1.0);
            let (lo, hi) = (x[i].min(h[i]), x[i].max(h[i]));
            prop_assert!(*o >= lo - 1e-9 && *o <= hi + 1e-9);
        }
    }

    #[test]
    fn broadcasting_follows_the_trailing_suffix_rule(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = melt_core::init::seeded_rng(seed);
        let a = Tensor::from_vec(
            vec![rows, cols],
            melt_core::init::uniform(&mut rng, vec![rows, cols], 2.0),
        );
        let b = Tensor::from_vec(vec![cols], melt_core::init::uniform(&mut rng, vec![cols], 2.0));
        let out = a.add(&b).unwrap().to_vec();
        let (av, bv) = (a.to_vec(), b.to_vec());
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(out[r * cols + c], av[r * cols + c] + bv[c]);
            }
        }
        // a leading-dim vector only broadcasts when it is a suffix (a
        // single-element vector counts as a scalar and always broadcasts)
        if rows != cols && rows != 1 {
            let bad = Tensor::from_vec(vec![rows], vec![0.0; rows]);
            prop_assert!(a.add(&bad).is_err());
        }
    }

    #[test]
    fn latent_rows_never_depend_on_loop_count(
        len in 1usize..10,
        loops in 1usize..6,
        seed in 0u64..50,
    ) {
        let cfg = melt_core::config::ModelConfig {
            n_layers: 1,
            hidden_dim: 8,
            n_heads: 2,
            loops,
            vocab_size: 9,
            max_seq_len: 16,
        };
        let tape = melt_core::tensor::Tape::new();
        let m = melt_core::melt::MeltModel::new(cfg, seed, &tape).unwrap();
        let mut s = m.session();
        for i in 0..len {
            s.push_token(i % 9).unwrap();
        }
        prop_assert_eq!(s.state().rows(0), len);
        prop_assert_eq!(s.state().element_count(), len * 3 * 8);
    }
}
