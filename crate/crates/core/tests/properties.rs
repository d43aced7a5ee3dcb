// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;

use ttalab::prompting::{render_multi, topk_ids, ClassVocabulary};
use ttalab::theory::{check_distance_cosine_identity, check_exact_expansion, check_lse_bounds};
use ttalab::tta::{
    accuracy_topk, argmax, build_target, clipartt_loss, compute_p_hat, compute_q, normalize_rows, softmax_cols,
    softmax_rows, zero_shot_probs, TargetMode,
};
use ttalab::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

/// Unit-row matrix; rows are redrawn away from zero norm.
fn unit(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    matrix(rows, cols)
        .prop_filter("rows need non-trivial norm", |m| {
            (0..m.rows()).all(|i| m.row(i).iter().map(|v| v * v).sum::<f64>() > 1e-3)
        })
        .prop_map(|m| normalize_rows(&m).unwrap())
}

fn bundle() -> impl Strategy<Value = (Tensor, Tensor, f64)> {
    (1usize..10, 2usize..8, prop::sample::select(vec![1.0, 0.1, 0.01]))
        .prop_flat_map(|(b, d, tau)| (unit(b, d), unit(b, d), Just(tau)))
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_columns_and_p_hat_rows_are_stochastic((zv, zt, tau) in bundle()) {
        let bundle = compute_q(&zv, &zt, tau).unwrap();
        let b = zv.rows();
        for j in 0..b {
            let col: f64 = (0..b).map(|i| bundle.q.get(i, j)).sum();
            prop_assert!((col - 1.0).abs() < 1e-6);
        }
        for i in 0..b {
            prop_assert!((bundle.p_hat.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!((bundle.s_v.get(i, i) - 1.0).abs() < 1e-9);
            prop_assert!((bundle.s_t.get(i, i) - 1.0).abs() < 1e-9);
            for j in 0..b {
                prop_assert!((bundle.s_v.get(i, j) - bundle.s_v.get(j, i)).abs() < 1e-9);
                prop_assert!((bundle.s_t.get(i, j) - bundle.s_t.get(j, i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn q_commutes_with_batch_permutation(
        (zv, zt, tau, perm) in bundle().prop_flat_map(|(zv, zt, tau)| {
            let b = zv.rows();
            (Just(zv), Just(zt), Just(tau), permutation(b))
        })
    ) {
        let q = compute_q(&zv, &zt, tau).unwrap().q;
        let qp = compute_q(&zv.select_rows(&perm), &zt.select_rows(&perm), tau).unwrap().q;
        for (a, &i) in perm.iter().enumerate() {
            for (c, &j) in perm.iter().enumerate() {
                prop_assert!((qp.get(a, c) - q.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn colsoftmax_of_symmetric_input_is_transposed_rowsoftmax((zv, zt, tau) in bundle()) {
        let s = zv.matmul_t(&zv).unwrap();
        let sym = Tensor::matrix(s.rows(), s.cols(), s.data().iter().zip(zt.matmul_t(&zt).unwrap().data()).map(|(a, b)| a + b).collect()).unwrap();
        let c = softmax_cols(&sym, tau);
        let r = softmax_rows(&sym, tau).transpose();
        prop_assert!(c.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn equal_similarities_reduce_image_text_target((zv, _zt, tau) in bundle()) {
        let s = zv.matmul_t(&zv).unwrap();
        let q = build_target(TargetMode::ImageText, &s, &s, tau).unwrap();
        prop_assert_eq!(q, softmax_cols(&s, tau));
    }

    #[test]
    fn expansion_identity_and_lse_bounds_hold((zv, zt, tau) in bundle()) {
        let q = compute_q(&zv, &zt, tau).unwrap().q;
        prop_assert!(check_exact_expansion(&q, &zv, &zt, tau).unwrap() < 1e-10);
        prop_assert_eq!(check_lse_bounds(&zv, &zt, tau).unwrap(), 0);
    }

    #[test]
    fn loss_is_non_negative_and_log_b_under_uniform_prediction((zv, zt, tau) in bundle()) {
        let bundle = compute_q(&zv, &zt, tau).unwrap();
        prop_assert!(clipartt_loss(&bundle.q, &bundle.p_hat).unwrap() >= 0.0);
        let b = zv.rows();
        let same = Tensor::from_rows(&vec![zt.row(0).to_vec(); b]).unwrap();
        let uniform = compute_p_hat(&zv, &same, tau).unwrap();
        let loss = clipartt_loss(&bundle.q, &uniform).unwrap();
        prop_assert!((loss - (b as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn distance_identity_on_random_unit_rows(z in (2usize..12, 2usize..10).prop_flat_map(|(n, d)| unit(n, d))) {
        let r = check_distance_cosine_identity(&z).unwrap();
        prop_assert!(r.max_abs_err < 1e-12);
    }

    #[test]
    fn topk_is_descending_distinct_and_complete(p in prop::collection::vec(0.0f64..1.0, 1..12), k in 1usize..12) {
        let k = k.min(p.len());
        let ids = topk_ids(&p, k).unwrap();
        prop_assert_eq!(ids.len(), k);
        let mut seen = ids.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), k);
        for w in ids.windows(2) {
            prop_assert!(p[w[0]] > p[w[1]] || (p[w[0]] == p[w[1]] && w[0] < w[1]));
        }
        let threshold = p[ids[k - 1]];
        for (j, &v) in p.iter().enumerate() {
            if !ids.contains(&j) {
                prop_assert!(v <= threshold);
            }
        }
    }

    #[test]
    fn topk_accuracy_is_monotone_in_k(
        (probs, labels) in (1usize..12, 2usize..7).prop_flat_map(|(n, c)| {
            (matrix(n, c), prop::collection::vec(0..c, n))
        })
    ) {
        let p = softmax_rows(&probs, 1.0);
        let mut last = 0.0;
        for k in 1..=p.cols() {
            let a = accuracy_topk(&p, &labels, k).unwrap();
            prop_assert!(a >= last);
            last = a;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn zero_shot_argmax_ignores_positive_rescaling(
        (zv, zt) in (1usize..8, 2usize..6, 2usize..6).prop_flat_map(|(b, c, d)| (matrix(b, d), unit(c, d))),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!((0..zv.rows()).all(|i| zv.row(i).iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let a = zero_shot_probs(&zv, &zt, 0.01).unwrap();
        let b = zero_shot_probs(&zv.map(|v| v * scale), &zt.map(|v| v * scale), 0.01).unwrap();
        for i in 0..a.rows() {
            prop_assert_eq!(argmax(a.row(i)), argmax(b.row(i)));
        }
    }

    #[test]
    fn multi_prompts_are_order_sensitive(perm in permutation(3)) {
        let vocab = ClassVocabulary::new(["circle", "square", "triangle"]).unwrap();
        let a = render_multi(&vocab, &[0, 1, 2]).unwrap();
        let b = render_multi(&vocab, &perm).unwrap();
        prop_assert_eq!(a == b, perm == vec![0, 1, 2]);
    }
}
