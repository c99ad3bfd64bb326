//! Cross-checks of the core algorithms against independent computations.
#![allow(clippy::needless_range_loop)]

use gridshed_core::attack::{AttackScenario, DisruptionProbabilities};
use gridshed_core::dataset::{extract_features, label_ks_distance, resample, InstanceRecord, ResamplePlan};
use gridshed_core::gats::{init_params, GraphInput, ModelConfig};
use gridshed_core::graph::{edge_betweenness, SimpleGraph};
use gridshed_core::microgrid::{generate_microgrid, validate, GenerationConfig};
use gridshed_core::shedding::{
    estimate_elsr_with, node_vulnerability, shed_rate, solve_component_dispatch, ComponentProblem, FLOW_TOLERANCE,
};
use gridshed_core::train::{train, TrainConfig};
use proptest::prelude::*;

/// Edge betweenness by enumerating every shortest path with a BFS layer
/// count and explicit path expansion.
fn brute_betweenness(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let mut adj = vec![Vec::new(); n];
    for (e, &(u, v)) in edges.iter().enumerate() {
        adj[u].push((v, e));
        adj[v].push((u, e));
    }
    let dist_from = |s: usize| {
        let mut d = vec![usize::MAX; n];
        d[s] = 0;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if d[v] == usize::MAX {
                    d[v] = d[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        d
    };
    let mut score = vec![0.0; edges.len()];
    for s in 0..n {
        let ds = dist_from(s);
        for t in s + 1..n {
            // Expand every path that strictly approaches t.
            let dt = dist_from(t);
            let mut paths: Vec<Vec<usize>> = Vec::new();
            let mut stack: Vec<(usize, Vec<usize>)> = vec![(s, Vec::new())];
            while let Some((u, path)) = stack.pop() {
                if u == t {
                    paths.push(path);
                    continue;
                }
                for &(v, e) in &adj[u] {
                    if dt[v] + 1 == dt[u] {
                        let mut p = path.clone();
                        p.push(e);
                        stack.push((v, p));
                    }
                }
            }
            assert!(paths.iter().all(|p| p.len() == ds[t]));
            for p in &paths {
                for &e in p {
                    score[e] += 1.0 / paths.len() as f64;
                }
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    score.into_iter().map(|x| x / pairs).collect()
}

fn connected_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..8).prop_flat_map(|n| {
        let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
        let extra = proptest::collection::vec((0..n, 0..n), 0..6);
        (Just(n), parents, extra).prop_map(|(n, parents, extra)| {
            let mut edges: Vec<(usize, usize)> = parents.into_iter().enumerate().map(|(i, p)| (p, i + 1)).collect();
            for (a, b) in extra {
                let (a, b) = (a.min(b), a.max(b));
                if a != b && !edges.iter().any(|&(u, v)| (u.min(v), u.max(v)) == (a, b)) {
                    edges.push((a, b));
                }
            }
            (n, edges)
        })
    })
}

proptest! {
    #[test]
    fn brandes_matches_path_enumeration_on_cyclic_graphs((n, edges) in connected_graph()) {
        let fast = edge_betweenness(&SimpleGraph::new(n, edges.clone()).unwrap()).unwrap();
        let slow = brute_betweenness(n, &edges);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dispatch_respects_limits_and_relaxing_helps(n in 2usize..40, seed in 0u64..10_000, scale in 1.0f64..4.0) {
        let mg = generate_microgrid(&GenerationConfig::with_size(n, seed)).unwrap();
        let island: Vec<usize> = (0..n).collect();
        let cp = ComponentProblem::from_island(&mg, &island, &vec![true; n - 1]).unwrap();
        let sol = solve_component_dispatch(&cp).unwrap();
        prop_assert!(cp.min_line_slack(&sol) >= -FLOW_TOLERANCE);
        prop_assert!(sol.served_active_load <= cp.total_load() + 1e-9);
        prop_assert!(sol.served_active_load <= mg.total_gen_capacity() + 1e-9);

        let mut relaxed = cp.clone();
        for l in &mut relaxed.lines {
            l.limit *= scale;
        }
        let better = solve_component_dispatch(&relaxed).unwrap();
        prop_assert!(better.served_active_load >= sol.served_active_load - 1e-9);
    }

    #[test]
    fn generated_grids_validate(n in 2usize..120, seed: u64) {
        let mg = generate_microgrid(&GenerationConfig::with_size(n, seed)).unwrap();
        prop_assert!(validate(&mg).is_valid());
    }

    #[test]
    fn node_vulnerability_covers_own_load(n in 2usize..30, seed in 0u64..1000) {
        let mg = generate_microgrid(&GenerationConfig::with_size(n, seed)).unwrap();
        let total = mg.total_load();
        for b in &mg.buses {
            let v = node_vulnerability(&mg, b.id).unwrap();
            prop_assert!(v >= b.p_load / total - 1e-12);
            prop_assert!(v <= 1.0);
        }
    }
}

#[test]
fn unconstrained_lines_make_dispatch_a_capacity_question() {
    for seed in 0..30 {
        let mg = generate_microgrid(&GenerationConfig::with_size(20, seed)).unwrap();
        let island: Vec<usize> = (0..20).collect();
        let mut cp = ComponentProblem::from_island(&mg, &island, &[true; 19]).unwrap();
        for l in &mut cp.lines {
            l.limit = f64::INFINITY;
        }
        // Reactive loads are small next to total capacity, so active
        // capacity is the only binding resource.
        let served = solve_component_dispatch(&cp).unwrap().served_active_load;
        let expected = mg.total_load().min(mg.total_gen_capacity());
        assert!((served - expected).abs() < 1e-9, "seed {seed}: {served} vs {expected}");
    }
}

fn exact_elsr(mg: &gridshed_core::microgrid::Microgrid, p: f64) -> f64 {
    let nb = mg.buses.len();
    let nl = mg.lines.len();
    let k = nb + nl;
    let mut sum = 0.0;
    for mask in 0usize..1 << k {
        let hits = mask.count_ones() as i32;
        let weight = p.powi(hits) * (1.0 - p).powi(k as i32 - hits);
        let s = AttackScenario {
            disrupted_buses: (0..nb).filter(|&i| mask >> i & 1 == 1).collect(),
            disrupted_lines: (0..nl).filter(|&l| mask >> (nb + l) & 1 == 1).collect(),
        };
        sum += weight * shed_rate(mg, &s).unwrap();
    }
    sum
}

#[test]
fn elsr_converges_to_enumerated_expectation() {
    for (seed, p) in [(1u64, 0.3), (2, 0.5), (3, 0.1)] {
        let mg = generate_microgrid(&GenerationConfig::with_size(4, seed)).unwrap();
        let probs = DisruptionProbabilities::uniform(4, 3, p);
        let est = estimate_elsr_with(&mg, &probs, 4000, seed).unwrap();
        let exact = exact_elsr(&mg, p);
        assert!(
            (est.mean - exact).abs() < 4.0 * est.std_error + 1e-12,
            "seed {seed}: {} vs {exact} (se {})",
            est.mean,
            est.std_error
        );
    }
}

#[test]
fn elsr_extremes() {
    let mg = generate_microgrid(&GenerationConfig::with_size(15, 8)).unwrap();
    let none = DisruptionProbabilities::uniform(15, 14, 0.0);
    let est = estimate_elsr_with(&mg, &none, 50, 1).unwrap();
    assert!((est.mean - shed_rate(&mg, &AttackScenario::default()).unwrap()).abs() < 1e-12);
    assert!(est.std_error < 1e-12);
    let all = DisruptionProbabilities::uniform(15, 14, 1.0);
    assert_eq!(estimate_elsr_with(&mg, &all, 20, 1).unwrap().mean, 1.0);
}

fn record(n: usize, seed: u64) -> InstanceRecord {
    extract_features(&generate_microgrid(&GenerationConfig::with_size(n, seed)).unwrap())
}

#[test]
fn model_gradient_matches_finite_differences() {
    let rec = record(7, 3);
    let model = init_params(&ModelConfig::with_hidden(4), 9).unwrap();
    let g = GraphInput::from_standardized(&model.standardizer.apply(&rec)).unwrap();
    let (_, grads) = model.loss_and_grads(&g, 0.4).unwrap();
    let base = model.to_flat();
    let h = 1e-6;
    for t in 0..base.len() {
        for e in 0..base[t].data.len() {
            let eval = |delta: f64| {
                let mut flat = base.clone();
                flat[t].data[e] += delta;
                let mut m = model.clone();
                m.set_flat(&flat).unwrap();
                m.loss_and_grads(&g, 0.4).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads[t].data[e];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / scale < 1e-3, "tensor {t} entry {e}: {a} vs {numeric}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prediction_ignores_node_order(n in 2usize..25, seed in 0u64..1000, perm_seed: u64) {
        use rand::seq::SliceRandom;
        let rec = record(n, seed);
        let model = init_params(&ModelConfig::with_hidden(8), seed).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut gridshed_core::rng::seeded(perm_seed));
        let a = model.predict(&rec).unwrap();
        let b = model.predict(&rec.permuted(&perm)).unwrap();
        prop_assert!((a.y_hat - b.y_hat).abs() <= 1e-9 * a.y_hat.abs());
        for i in 0..n {
            prop_assert!((a.node_weights[i] - b.node_weights[perm[i]]).abs() < 1e-12);
        }
        let sum: f64 = a.node_weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(a.node_weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn resampling_flattens_skewed_labels(labels in proptest::collection::vec(0.0f64..1.0, 30..120), power in 2.0f64..6.0) {
        let records: Vec<InstanceRecord> = labels
            .iter()
            .map(|&y| record(3, 0).with_label(y.powf(power)))
            .collect();
        let before: Vec<f64> = records.iter().filter_map(|r| r.label).collect();
        let ks_before = label_ks_distance(&before);
        prop_assume!(ks_before > 0.1);
        let out = resample(&records, &ResamplePlan { n_draws: 2000, ..ResamplePlan::default() }).unwrap();
        let after: Vec<f64> = out.iter().filter_map(|r| r.label).collect();
        prop_assert!(label_ks_distance(&after) < ks_before);
    }
}

#[test]
fn training_is_bitwise_reproducible_and_finite() {
    let records: Vec<InstanceRecord> =
        (0..12).map(|s| record(6 + s as usize % 4, s).with_label(0.05 * s as f64)).collect();
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e-3, batch_size: 4, ..TrainConfig::default() };
    let model = init_params(&ModelConfig::with_hidden(8), 1).unwrap();
    let (a, ra) = train(model.clone(), &records, &cfg).unwrap();
    let (b, rb) = train(model, &records, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra.steps.iter().all(|p| p.loss.is_finite()));
    assert_eq!(ra.epoch_loss.len(), 3);
}
