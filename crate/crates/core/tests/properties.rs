use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s4rec_core::evalkit::{hr_at_k, ndcg_at_k, rank_target};
use s4rec_core::intent::sinkhorn_codes;
use s4rec_core::objectives::contrastive_loss;
use s4rec_core::tensor::{Tape, Tensor};
use std::collections::HashSet;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut tape = Tape::<f64>::inference();
        let v = tape.input(x);
        let s = tape.softmax(v);
        let s = tape.value(s);
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        prop_assume!((0..x.rows()).all(|r| x.row(r).iter().any(|v| v.abs() > 1e-3)));
        let mut tape = Tape::<f64>::inference();
        let v = tape.input(x);
        let n = tape.l2_normalize(v);
        let n = tape.value(n);
        for r in 0..n.rows() {
            let norm: f64 = n.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval(x in matrix(3, 5), p in 0.0f64..0.95, seed: u64) {
        let mut tape = Tape::<f64>::inference();
        let v = tape.input(x.clone());
        let d = tape.dropout(v, p, false, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(tape.value(d), &x);
    }

    #[test]
    fn contrastive_loss_ignores_batch_order(
        a in matrix(5, 4),
        b in matrix(5, 4),
        perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::<f64>::inference();
            let za = tape.input(a.clone());
            let za = tape.l2_normalize(za);
            let zb = tape.input(b.clone());
            let zb = tape.l2_normalize(zb);
            let l = contrastive_loss(&mut tape, za, zb, 0.5).unwrap();
            tape.value(l).item()
        };
        let shuffle = |t: &Tensor<f64>| {
            Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let base = loss(&a, &b);
        let permuted = loss(&shuffle(&a), &shuffle(&b));
        prop_assert!((base - permuted).abs() < 1e-10, "{} vs {}", base, permuted);
    }

    #[test]
    fn codes_are_row_stochastic(x in (2usize..20, 2usize..8).prop_flat_map(|(r, c)| matrix(r, c)), iters in 1usize..6) {
        let scaled = Tensor::new(x.shape(), x.data().iter().map(|v| v / 5.0).collect()).unwrap();
        let q = sinkhorn_codes(&scaled, 0.05, iters).unwrap();
        for r in 0..q.rows() {
            prop_assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(q.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn rank_is_within_candidates(
        logits in prop::collection::vec(-3i32..3, 2..60),
        target_frac in 0.0f64..1.0,
        excluded in prop::collection::hash_set(1usize..60, 0..10),
    ) {
        let logits: Vec<f64> = logits.into_iter().map(f64::from).collect();
        let n = logits.len();
        let target = 1 + ((target_frac * n as f64) as usize).min(n - 1);
        let excluded: HashSet<usize> = excluded.into_iter().filter(|&i| i != target && i <= n).collect();
        let rank = rank_target(&logits, target, &excluded).unwrap();
        prop_assert!(rank >= 1 && rank <= n - excluded.len());
        for k in [1, 5, 20] {
            prop_assert!(ndcg_at_k(rank, k) <= hr_at_k(rank, k));
        }
    }
}
