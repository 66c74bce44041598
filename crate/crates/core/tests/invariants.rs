use std::collections::BTreeSet;

use proptest::prelude::*;
use telab::demand::DemandMatrix;
use telab::graph::{flow_fractions, simulate_routing, Network};
use telab::lp::solve_optimal_umax;
use telab::softmin::{softmin, softmin_routing, softmin_routing_with, EdgeWeights, PruneStrategy};

/// Bidirectional ring plus random chords; always strongly connected.
fn network_strategy(max_v: usize) -> impl Strategy<Value = Network<f64>> {
    (3..=max_v)
        .prop_flat_map(|n| {
            let chords = prop::collection::vec((0..n, 0..n), 0..n);
            let caps = prop::collection::vec(1.0f64..10.0, 2 * n * n);
            (Just(n), chords, caps)
        })
        .prop_map(|(n, chords, caps)| {
            let mut links = BTreeSet::new();
            for v in 0..n {
                let w = (v + 1) % n;
                links.insert((v.min(w), v.max(w)));
            }
            for (a, b) in chords {
                if a != b {
                    links.insert((a.min(b), a.max(b)));
                }
            }
            let mut caps = caps.into_iter();
            let edges: Vec<_> = links
                .into_iter()
                .flat_map(|(a, b)| [(a, b), (b, a)])
                .map(|(a, b)| (a, b, caps.next().unwrap()))
                .collect();
            Network::new(n, edges).unwrap()
        })
}

fn instance(
    max_v: usize,
) -> impl Strategy<Value = (Network<f64>, Vec<f64>, f64, DemandMatrix<f64>)> {
    network_strategy(max_v).prop_flat_map(|net| {
        let n = net.vertex_count();
        let e = net.edge_count();
        (
            Just(net),
            prop::collection::vec(0.01f64..5.0, e),
            0.1f64..20.0,
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..3.0], n * n),
        )
            .prop_map(move |(net, w, g, d)| {
                let dm = DemandMatrix::from_fn(n, |i, j| if i == j { 0.0 } else { d[i * n + j] })
                    .unwrap();
                (net, w, g, dm)
            })
    })
}

fn assert_conservation(net: &Network<f64>, fractions: &[f64], s: usize, t: usize) {
    for v in 0..net.vertex_count() {
        let out: f64 = net.out_edges(v).iter().map(|&e| fractions[e]).sum();
        let inn: f64 = net.in_edges(v).iter().map(|&e| fractions[e]).sum();
        let expected = if v == s {
            1.0
        } else if v == t {
            -1.0
        } else {
            0.0
        };
        assert!(
            (out - inn - expected).abs() < 1e-9,
            "vertex {v}: out {out} in {inn}"
        );
    }
}

fn assert_acyclic(net: &Network<f64>, ratios: &[f64]) {
    // Kahn's algorithm over the edges carrying positive ratio.
    let n = net.vertex_count();
    let mut indeg = vec![0usize; n];
    for (e, &(_, h)) in net.edges().iter().enumerate() {
        if ratios[e] > 0.0 {
            indeg[h] += 1;
        }
    }
    let mut stack: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = stack.pop() {
        seen += 1;
        for &e in net.out_edges(v) {
            if ratios[e] > 0.0 {
                let h = net.edge(e).1;
                indeg[h] -= 1;
                if indeg[h] == 0 {
                    stack.push(h);
                }
            }
        }
    }
    assert_eq!(seen, n, "routing contains a cycle");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmin_is_a_distribution(x in prop::collection::vec(-50.0f64..50.0, 1..8), g in 0.01f64..100.0) {
        let p = softmin(&x, g).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&q| (0.0..=1.0).contains(&q)));
        // smallest input gets the largest share
        let imin = (0..x.len()).min_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
        prop_assert!(p.iter().all(|&q| q <= p[imin] + 1e-15));
    }

    #[test]
    fn softmin_routing_is_valid_and_conserves_flow((net, w, g, dm) in instance(7)) {
        let weights = EdgeWeights::new(w).unwrap();
        for strategy in [PruneStrategy::FrontierMeets, PruneStrategy::DistanceDecreasing] {
            let (routing, fallbacks) = softmin_routing_with(&net, &weights, g, &dm, strategy).unwrap();
            if strategy == PruneStrategy::DistanceDecreasing {
                prop_assert_eq!(fallbacks, 0);
            }
            routing.validate(&net).unwrap();
            for flow in dm.flows() {
                let ratios = routing.ratios(flow.source, flow.sink).unwrap();
                assert_acyclic(&net, ratios);
                let fr = flow_fractions(&net, &routing, flow.source, flow.sink).unwrap();
                assert_conservation(&net, &fr, flow.source, flow.sink);
            }
        }
    }

    #[test]
    fn softmin_routing_never_beats_the_optimum((net, w, g, dm) in instance(5)) {
        let weights = EdgeWeights::new(w).unwrap();
        let routing = softmin_routing(&net, &weights, g, &dm).unwrap();
        let sim = simulate_routing(&net, &dm, &routing).unwrap();
        let opt = solve_optimal_umax(&net, &dm).unwrap();
        prop_assert!(sim.u_max >= opt.u_max_optimal - 1e-6);
    }

    #[test]
    fn routing_ignores_weight_scale((net, w, g, dm) in instance(6), k in 0.1f64..10.0) {
        // Scaling weights by k and the temperature by 1/k leaves the softmin arguments unchanged.
        let weights = EdgeWeights::new(w).unwrap();
        let a = softmin_routing(&net, &weights, g, &dm).unwrap();
        let b = softmin_routing(&net, &weights.scaled(k), g / k, &dm).unwrap();
        let ua = simulate_routing(&net, &dm, &a).unwrap().u_max;
        let ub = simulate_routing(&net, &dm, &b).unwrap().u_max;
        prop_assert!((ua - ub).abs() < 1e-9 * (1.0 + ua));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimum_is_relabeling_invariant((net, _w, _g, dm) in instance(5), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = net.vertex_count();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (pnet, _) = net.permuted(&perm).unwrap();
        let a = solve_optimal_umax(&net, &dm).unwrap().u_max_optimal;
        let b = solve_optimal_umax(&pnet, &dm.permuted(&perm)).unwrap().u_max_optimal;
        prop_assert!((a - b).abs() < 1e-6 * (1.0 + a));
    }

    #[test]
    fn optimum_scales_with_demand((net, _w, _g, dm) in instance(5), k in 0.1f64..10.0) {
        let a = solve_optimal_umax(&net, &dm).unwrap().u_max_optimal;
        let b = solve_optimal_umax(&net, &dm.scaled(k)).unwrap().u_max_optimal;
        prop_assert!((a * k - b).abs() < 1e-6 * (1.0 + b));
    }
}
