use fedproj::data::{dirichlet_partition, synth_blobs, PartitionConfig};
use fedproj::eval::metrics_from_probs;
use fedproj::geometry::{aggregate, divergence, project, AggregationMethod, DiagGaussian, Divergence, Lambda};
use fedproj::variopt::{posterior_of, reconstruct_hessian, IvonHyper, IvonState};
use ndarray::Array2;
use proptest::prelude::*;

fn gaussian(dim: usize) -> impl Strategy<Value = DiagGaussian> {
    (
        prop::collection::vec(-5.0f64..5.0, dim),
        prop::collection::vec(1e-3f64..10.0, dim),
    )
        .prop_map(|(m, v)| DiagGaussian::new(m, v).unwrap())
}

fn method() -> impl Strategy<Value = AggregationMethod> {
    prop::sample::select(AggregationMethod::ALL.to_vec())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn aggregating_copies_returns_the_input(p in gaussian(3), m in method(), k in 1usize..5) {
        let w = vec![1.0 / k as f64; k];
        let out = aggregate(m, &vec![p.clone(); k], &w).unwrap();
        for i in 0..3 {
            prop_assert!(close(out.mean()[i], p.mean()[i]));
            prop_assert!(close(out.var()[i], p.var()[i]));
        }
    }

    #[test]
    fn aggregation_ignores_client_order(a in gaussian(2), b in gaussian(2), c in gaussian(2), m in method(), w0 in 0.05f64..0.9) {
        let rest = 1.0 - w0;
        let w = [w0, rest * 0.3, rest * 0.7];
        let fwd = aggregate(m, &[a.clone(), b.clone(), c.clone()], &w).unwrap();
        let rev = aggregate(m, &[c, b, a], &[w[2], w[1], w[0]]).unwrap();
        for i in 0..2 {
            prop_assert!(close(fwd.mean()[i], rev.mean()[i]));
            prop_assert!(close(fwd.var()[i], rev.var()[i]));
        }
    }

    #[test]
    fn aggregate_stays_within_the_coordinate_hull(a in gaussian(2), b in gaussian(2), m in method(), w in 0.0f64..1.0) {
        let out = aggregate(m, &[a.clone(), b.clone()], &[w, 1.0 - w]).unwrap();
        for i in 0..2 {
            let (lo, hi) = (a.var()[i].min(b.var()[i]), a.var()[i].max(b.var()[i]));
            prop_assert!(out.var()[i] >= lo * (1.0 - 1e-12) && out.var()[i] <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn divergences_are_nonnegative_and_vanish_on_the_diagonal(p in gaussian(3), q in gaussian(3)) {
        for d in Divergence::ALL {
            prop_assert!(divergence(d, &q, &p).unwrap() >= 0.0);
            prop_assert!(divergence(d, &p, &p).unwrap().abs() < 1e-12);
        }
        let w_pq = divergence(Divergence::W2Sq, &p, &q).unwrap();
        let w_qp = divergence(Divergence::W2Sq, &q, &p).unwrap();
        prop_assert!(close(w_pq, w_qp));
    }

    #[test]
    fn projection_moves_monotonically_toward_the_local(g in gaussian(2), l in gaussian(2), a in 0.0f64..20.0, b in 0.0f64..20.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        for d in [Divergence::W2Sq, Divergence::Rkl] {
            prop_assert_eq!(&project(d, &g, &l, Lambda::Finite(0.0)).unwrap(), &g);
            prop_assert_eq!(&project(d, &g, &l, Lambda::Infinity).unwrap(), &l);
            let near = project(d, &g, &l, Lambda::Finite(hi)).unwrap();
            let far = project(d, &g, &l, Lambda::Finite(lo)).unwrap();
            let slack = 1e-9 * (1.0 + divergence(d, &far, &l).unwrap());
            prop_assert!(divergence(d, &near, &l).unwrap() <= divergence(d, &far, &l).unwrap() + slack);
        }
    }

    #[test]
    fn curvature_round_trips_through_the_variance(h in prop::collection::vec(1e-4f64..1e3, 1..8), ess in 1usize..100_000, delta in 1e-6f64..1.0) {
        let hyper = IvonHyper { ess, weight_decay: delta, ..IvonHyper::default() };
        let mut state = IvonState::new(vec![0.0; h.len()], hyper).unwrap();
        state.hess = h.clone();
        let (back, rectified) = reconstruct_hessian(&posterior_of(&state).unwrap(), ess, delta);
        prop_assert_eq!(rectified, 0);
        for (a, b) in back.iter().zip(&h) {
            prop_assert!((a - b).abs() <= 1e-12 * (b + delta));
        }
    }

    #[test]
    fn partitions_cover_every_example_once(clients in 1usize..8, beta in 0.3f64..50.0, seed in 0u64..1000) {
        let ds = synth_blobs(40, 4, 2, 0.5, 0).unwrap();
        let cfg = PartitionConfig { min_shard: 1, ..PartitionConfig::new(clients, beta, seed) };
        let p = dirichlet_partition(&ds, &cfg).unwrap();
        let mut all: Vec<usize> = p.indices.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_stay_in_range(raw in prop::collection::vec(0.0f64..1.0, 12..=12), labels in prop::collection::vec(0usize..3, 4..=4)) {
        let mut probs = Array2::from_shape_vec((4, 3), raw).unwrap();
        for mut row in probs.rows_mut() {
            let s = row.sum() + 1e-9;
            row.mapv_inplace(|v| (v + 1e-9 / 3.0) / s);
        }
        let m = metrics_from_probs(probs.view(), &labels, 15, 1).unwrap();
        prop_assert!((0.0..=100.0).contains(&m.accuracy));
        prop_assert!((0.0..=1.0).contains(&m.ece));
        prop_assert!(m.nll >= 0.0 && m.nll.is_finite());
    }
}
