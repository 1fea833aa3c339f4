use covi_core::contrastive::{build_contrastive_pairs, confidence_mask, contrastive_loss};
use covi_core::domains::make_blobs_pair;
use covi_core::model::{init_model, RatioGrid};
use covi_core::optim::Sgd;
use covi_core::tensor::row_entropies;
use covi_core::vicinal::{brute_force_emp, grid_entropies, mix, mix_labels, RatioVector};
use covi_core::{ModelDims, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1e3f64..1e3, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 1usize..5).prop_flat_map(|(m, d)| (matrix(m, d), matrix(m, d)))
}

proptest! {
    #[test]
    fn mix_endpoints_are_exact((xs, xt) in pair()) {
        let m = xs.rows();
        prop_assert_eq!(mix(&xs, &xt, &RatioVector::filled(m, 0.0).unwrap()).unwrap(), xs.clone());
        prop_assert_eq!(mix(&xs, &xt, &RatioVector::filled(m, 1.0).unwrap()).unwrap(), xt.clone());
        let mid = mix(&xs, &xt, &RatioVector::filled(m, 0.5).unwrap()).unwrap();
        let avg: Vec<f64> = xs.data().iter().zip(xt.data()).map(|(a, b)| (a + b) / 2.0).collect();
        prop_assert_eq!(mid.data(), &avg[..]);
    }

    #[test]
    fn mixed_rows_stay_between_endpoints((xs, xt) in pair(), l in 0.0f64..=1.0) {
        let x = mix(&xs, &xt, &RatioVector::filled(xs.rows(), l).unwrap()).unwrap();
        for ((v, a), b) in x.data().iter().zip(xs.data()).zip(xt.data()) {
            prop_assert!(*v >= a.min(*b) - 1e-9 && *v <= a.max(*b) + 1e-9);
        }
    }

    #[test]
    fn mixed_labels_are_distributions(
        labels in prop::collection::vec((0usize..4, 0usize..4, 0.0f64..=1.0), 1..8),
    ) {
        let ys = Tensor::one_hot(&labels.iter().map(|l| l.0).collect::<Vec<_>>(), 4).unwrap();
        let yt = Tensor::one_hot(&labels.iter().map(|l| l.1).collect::<Vec<_>>(), 4).unwrap();
        let lam = RatioVector::new(labels.iter().map(|l| l.2).collect()).unwrap();
        let y = mix_labels(&ys, &yt, &lam).unwrap();
        for i in 0..y.rows() {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn mask_keeps_the_most_confident(probs in prop::collection::vec(0.0f64..=1.0, 2..40), alpha in 0.0f64..4.0) {
        let mask = confidence_mask(&probs, alpha);
        let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (p, k) in probs.iter().zip(&mask) {
            if *p == top {
                prop_assert!(*k);
            }
        }
        // monotone: anything at least as confident as a kept instance is kept
        for (p, k) in probs.iter().zip(&mask) {
            if *k {
                prop_assert!(probs.iter().zip(&mask).all(|(q, kq)| *q < *p || *kq));
            }
        }
    }

    #[test]
    fn ratio_vector_rejects_out_of_range(v in prop::num::f64::ANY) {
        prop_assert_eq!(RatioVector::new(vec![v]).is_ok(), (0.0..=1.0).contains(&v));
    }

    #[test]
    fn sgd_step_matches_closed_form(
        g in prop::collection::vec(-5.0f64..5.0, 1..6),
        lr in 1e-4f64..1.0,
        mu in 0.0f64..0.99,
    ) {
        let n = g.len();
        let mut p = Tensor::zeros(&[n]).into_parameter();
        p.zero_grad();
        p.accumulate_grad(&g).unwrap();
        let mut opt = Sgd::new(lr, mu).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        p.zero_grad();
        p.accumulate_grad(&g).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        for (i, gi) in g.iter().enumerate() {
            // v1 = g, v2 = μg + g; p = −lr·(v1 + v2)
            let want = -lr * gi - lr * (mu * gi + gi);
            prop_assert!((p.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn brute_force_is_maximal_on_every_pair() {
    let grid = RatioGrid::default();
    for seed in 0..5 {
        let ds = make_blobs_pair(40, 3, 2, 2.0, seed).unwrap().standardized();
        let p = init_model(ModelDims::new(2, 3), seed).unwrap();
        let idx: Vec<usize> = (0..ds.n_source()).collect();
        let batch = ds.batch(&idx, &idx).unwrap();
        let lam = brute_force_emp(&p, &batch, &grid).unwrap();
        let ent = grid_entropies(&p, &batch, &grid).unwrap();
        for (i, &l) in lam.values().iter().enumerate() {
            let x = mix(&batch.xs.select_rows(&[i]), &batch.xt.select_rows(&[i]), &RatioVector::new(vec![l]).unwrap()).unwrap();
            let z = p.logits(&x).unwrap();
            let h = row_entropies(z.data(), 1, z.cols())[0];
            assert!(ent[i].iter().all(|&e| h >= e), "pair {i}");
        }
    }
}

#[test]
fn contrastive_labels_sum_to_one() {
    let ds = make_blobs_pair(30, 4, 3, 1.0, 2).unwrap().standardized();
    let p = init_model(ModelDims::new(3, 4), 2).unwrap();
    let idx: Vec<usize> = (0..30).collect();
    let batch = ds.batch(&idx, &idx).unwrap();
    let lam = RatioVector::new((0..30).map(|i| 0.1 + 0.8 * i as f64 / 29.0).collect()).unwrap();
    let pairs = build_contrastive_pairs(&batch, &lam, 0.1, &[true; 30]).unwrap();
    let yt_hat = p.pseudo_labels(&batch.xt).unwrap();
    let out = contrastive_loss(&p, &pairs, &batch.ys, &yt_hat).unwrap();
    for labels in [&out.label_td, &out.label_sd] {
        for i in 0..labels.rows() {
            assert_eq!(labels.row(i).iter().sum::<f64>(), 1.0);
        }
    }
}
