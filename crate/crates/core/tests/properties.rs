use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use proptest::prelude::*;

use alphaedge::aggregation::{
    aggregate, learn_weights, normalize, AggregationWeights, ModelSnapshot,
};
use alphaedge::datastream::{flip_labels, StreamBatch, Task};
use alphaedge::metrics::{auc, one_minus_smape};
use alphaedge::model::{batch_loss, LossKind, ModelSpec, ParameterVector};
use alphaedge::optim::OptimizerConfig;
use alphaedge::peer::{init_topology, selection_round, two_hop_scores, Topology};
use alphaedge::EdgeId;

fn params(v: Vec<f64>) -> ParameterVector {
    ParameterVector::new(v).unwrap()
}

fn snaps(models: &[Vec<f64>]) -> Vec<ModelSnapshot> {
    models
        .iter()
        .enumerate()
        .map(|(j, m)| ModelSnapshot {
            source_edge: EdgeId(j + 1),
            params: params(m.clone()),
            produced_at: 0,
            samples_seen: 0,
        })
        .collect()
}

fn weights(w: &[f64]) -> AggregationWeights {
    AggregationWeights {
        self_weight: w[0],
        neighbors: w[1..]
            .iter()
            .enumerate()
            .map(|(j, &v)| (EdgeId(j + 1), v))
            .collect(),
    }
}

fn topology_and_weights() -> impl Strategy<Value = (Topology, Vec<AggregationWeights>)> {
    (3usize..9)
        .prop_flat_map(|n| (Just(n), 1..n, any::<u64>()))
        .prop_flat_map(|(n, k, seed)| {
            let topo = init_topology(n, k, seed).unwrap();
            let raw = prop::collection::vec(prop::collection::vec(0.0..1.0f64, k + 1), n);
            (Just(topo), raw)
        })
        .prop_map(|(topo, raw)| {
            let w = raw
                .iter()
                .enumerate()
                .map(|(i, r)| AggregationWeights {
                    self_weight: r[0] + 1e-3,
                    neighbors: topo
                        .neighbors(EdgeId(i))
                        .iter()
                        .copied()
                        .zip(r[1..].iter().copied())
                        .collect(),
                })
                .collect();
            (topo, w)
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn normalized_weights_sum_to_one(w in prop::collection::vec(0.0..10.0f64, 1..6)) {
        let mut w = w;
        w[0] += 1e-3;
        let n = normalize(&weights(&w)).unwrap();
        prop_assert!((n.total() - 1.0).abs() < 1e-12);
        prop_assert!(n.is_normalized());
    }

    #[test]
    fn aggregation_is_affine_in_the_models(
        local in prop::collection::vec(-5.0..5.0f64, 3),
        models in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 1..4),
        shift in -5.0..5.0f64,
        w in prop::collection::vec(0.01..3.0f64, 4),
    ) {
        let w = weights(&w[..models.len() + 1]);
        let agg = aggregate(&params(local.clone()), &snaps(&models), &w).unwrap();
        let shifted_local: Vec<f64> = local.iter().map(|x| x + shift).collect();
        let shifted: Vec<Vec<f64>> = models.iter().map(|m| m.iter().map(|x| x + shift).collect()).collect();
        let agg2 = aggregate(&params(shifted_local), &snaps(&shifted), &w).unwrap();
        for (a, b) in agg.as_slice().iter().zip(agg2.as_slice()) {
            prop_assert!((a + shift - b).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_learning_never_loses_to_the_warm_start(
        w0 in -2.0..2.0f64,
        models in prop::collection::vec(-3.0..3.0f64, 1..4),
        warm in prop::collection::vec(0.0..2.0f64, 4),
        xs in prop::collection::vec(-2.0..2.0f64, 1..10),
        slope in -3.0..3.0f64,
        steps in 1usize..12,
    ) {
        let spec = ModelSpec::linear(1);
        let y: Vec<f64> = xs.iter().map(|x| slope * x).collect();
        let batch = StreamBatch::new(EdgeId(0), 0, Array2::from_shape_vec((xs.len(), 1), xs.clone()).unwrap(), y).unwrap();
        let models: Vec<Vec<f64>> = models.iter().map(|&m| vec![m, 0.0]).collect();
        let s = snaps(&models);
        let warm = weights(&warm[..models.len() + 1]);
        let local = params(vec![w0, 0.0]);
        let mut opt = OptimizerConfig::adam(0.1).init(models.len() + 1);
        let learned = learn_weights(&local, &s, &warm, &batch, &spec, LossKind::MeanSquaredError, steps, &mut opt).unwrap();
        prop_assert!(learned.loss <= learned.warm_start_loss);
        prop_assert!(learned.weights.self_weight >= 0.0);
        prop_assert!(learned.weights.neighbors.values().all(|&v| v >= 0.0));
        let replay = batch_loss(&spec, &learned.params, &batch, LossKind::MeanSquaredError).unwrap();
        prop_assert!((replay - learned.loss).abs() < 1e-12);
    }

    #[test]
    fn initial_topologies_are_simple_k_regular(n in 2usize..30, k in 1usize..10, seed in any::<u64>()) {
        let topo = init_topology(n, k, seed).unwrap();
        topo.validate().unwrap();
        for i in 0..n {
            let ns = topo.neighbors(EdgeId(i));
            prop_assert_eq!(ns.len(), k.min(n - 1));
            prop_assert!(!ns.contains(&EdgeId(i)));
            prop_assert_eq!(ns.iter().collect::<BTreeSet<_>>().len(), ns.len());
        }
        prop_assert_eq!(topo, init_topology(n, k, seed).unwrap());
    }

    #[test]
    fn uniform_weights_score_common_neighbors((topo, _) in topology_and_weights()) {
        let n = topo.n;
        let uniform: Vec<AggregationWeights> = (0..n)
            .map(|i| normalize(&AggregationWeights::uniform(topo.neighbors(EdgeId(i)).iter().copied())).unwrap())
            .collect();
        for i in 0..n {
            let ki = topo.neighbors(EdgeId(i)).len() as f64;
            for c in two_hop_scores(&topo, &uniform, EdgeId(i)).unwrap() {
                let common = topo
                    .neighbors(EdgeId(i))
                    .iter()
                    .filter(|j| topo.is_neighbor(**j, c.candidate))
                    .count() as f64;
                let kj = ki;
                prop_assert!((c.score - common / ((ki + 1.0) * (kj + 1.0))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_keeps_topologies_valid((topo, w) in topology_and_weights(), k_prime in 1usize..3) {
        let k_prime = k_prime.min(topo.k);
        let (next, next_w) = selection_round(&topo, &w, 1, 1, k_prime).unwrap();
        next.validate().unwrap();
        for i in 0..topo.n {
            let before: BTreeSet<EdgeId> = topo.neighbors(EdgeId(i)).iter().copied().collect();
            let after: BTreeSet<EdgeId> = next.neighbors(EdgeId(i)).iter().copied().collect();
            prop_assert_eq!(after.len(), before.len());
            prop_assert!(!after.contains(&EdgeId(i)));
            prop_assert!(before.difference(&after).count() <= k_prime);
            let keys: BTreeSet<EdgeId> = next_w[i].neighbors.keys().copied().collect();
            prop_assert_eq!(&keys, &after);
            for j in after.difference(&before) {
                prop_assert_eq!(next_w[i].get(*j), Some(0.0));
            }
            for j in after.intersection(&before) {
                prop_assert_eq!(next_w[i].get(*j), w[i].get(*j));
            }
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        scores in prop::collection::vec(-3.0..3.0f64, 2..40),
        labels in prop::collection::vec(any::<bool>(), 40),
    ) {
        let labels: Vec<f64> = labels[..scores.len()].iter().map(|&b| f64::from(b)).collect();
        let a = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp()).collect();
        prop_assert_eq!(a, auc(&squashed, &labels).unwrap());
        if let Some(v) = a {
            prop_assert!((0.0..=1.0).contains(&v));
            let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
            if distinct.len() == scores.len() {
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((v + auc(&neg, &labels).unwrap().unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn auc_matches_pair_counting(
        scores in prop::collection::vec(0u8..5, 2..30),
        labels in prop::collection::vec(any::<bool>(), 30),
    ) {
        let s: Vec<f64> = scores.iter().map(|&x| f64::from(x)).collect();
        let y: Vec<f64> = labels[..s.len()].iter().map(|&b| f64::from(b)).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    pairs += 1.0;
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let got = auc(&s, &y).unwrap();
        if pairs == 0.0 {
            prop_assert_eq!(got, None);
        } else {
            prop_assert!((got.unwrap() - wins / pairs).abs() < 1e-12);
        }
    }

    #[test]
    fn smape_is_symmetric_and_scale_free(
        p in prop::collection::vec(-10.0..10.0f64, 1..20),
        y in prop::collection::vec(-10.0..10.0f64, 20),
        c in 0.01..100.0f64,
    ) {
        let y = &y[..p.len()];
        let a = one_minus_smape(&p, y).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - one_minus_smape(y, &p).unwrap()).abs() < 1e-12);
        let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        prop_assert!((a - one_minus_smape(&ps, &ys).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn flipping_twice_restores_labels(
        ys in prop::collection::vec(0.0..10.0f64, 1..20),
        binary in any::<bool>(),
    ) {
        let labels: Vec<f64> = if binary { ys.iter().map(|y| f64::from(*y > 5.0)).collect() } else { ys };
        let rows = labels.len();
        let stream = vec![StreamBatch::new(EdgeId(0), 0, Array2::zeros((rows, 1)), labels.clone()).unwrap()];
        let task = if binary { Task::Binary } else { Task::Regression };
        let once = flip_labels(&stream, task, 0.0, 10.0).unwrap();
        let twice = flip_labels(&once, task, 0.0, 10.0).unwrap();
        for (a, b) in twice[0].labels.iter().zip(&labels) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn fixed_two_hop_example_matches_hand_sum() {
    let topo = Topology {
        n: 4,
        k: 1,
        neighbors: vec![
            vec![EdgeId(1)],
            vec![EdgeId(2)],
            vec![EdgeId(3)],
            vec![EdgeId(0)],
        ],
        version: 0,
    };
    let w: Vec<AggregationWeights> = (0..4)
        .map(|i| AggregationWeights {
            self_weight: 0.5,
            neighbors: BTreeMap::from([(topo.neighbors[i][0], 0.5)]),
        })
        .collect();
    let scores = two_hop_scores(&topo, &w, EdgeId(0)).unwrap();
    assert_eq!(scores.len(), 1);
    assert_eq!(scores[0].candidate, EdgeId(2));
    assert_eq!(scores[0].score, 0.25);
}
