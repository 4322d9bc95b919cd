//! Structural properties of the graph generator, checked against brute-force
//! constructions.

use dgg_core::autodiff::Tape;
use dgg_core::dgg::{
    adjoint_neighbors, topk_select, DegreeSource, Dgg, DggConfig, DggOutput, SelectMode,
};
use dgg_core::gcn::normalize_adjacency;
use dgg_core::nn::ParamStore;
use dgg_core::sampling::{NoiseSource, RngState};
use dgg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Edges (i, j) and (k, l) of the complete directed graph share an endpoint.
fn shares_endpoint(n: usize, e: usize, f: usize) -> bool {
    let (i, j, k, l) = (e / n, e % n, f / n, f % n);
    e != f && (i == k || i == l || j == k || j == l)
}

#[test]
fn adjoint_structure_matches_enumeration() {
    for n in 2..=6 {
        let s = adjoint_neighbors(n);
        assert_eq!(s.edge_count(), n * n);
        for e in 0..n * n {
            for f in 0..n * n {
                assert_eq!(s.is_adjacent(e, f), shares_endpoint(n, e, f), "n={n} e={e} f={f}");
            }
        }
    }
}

#[test]
fn adjoint_structure_matches_incidence_product() {
    // B is the unsigned node/edge incidence, a self-loop touching its node once.
    // (BᵀB)_ef counts shared endpoints, so off-diagonal positives are adjacency.
    for n in 2..=6 {
        let m = n * n;
        let mut b = vec![vec![0u32; m]; n];
        for e in 0..m {
            b[e / n][e] = 1;
            b[e % n][e] = 1;
        }
        let s = adjoint_neighbors(n);
        for e in 0..m {
            for f in 0..m {
                let shared: u32 = (0..n).map(|v| b[v][e] * b[v][f]).sum();
                assert_eq!(s.is_adjacent(e, f), e != f && shared > 0);
            }
            let (i, j) = (e / n, e % n);
            let deg = s.neighbors[e].len();
            assert_eq!(deg, if i == j { 2 * n - 2 } else { 4 * n - 5 });
        }
    }
}

#[test]
fn adjoint_mean_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 1..=6 {
        let c = rand_tensor(&mut rng, &[n * n, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let m = tape.adjoint_mean(cv, n).unwrap();
        let got = tape.value(m);
        let s = adjoint_neighbors(n);
        for e in 0..n * n {
            for d in 0..3 {
                let want = if n < 2 {
                    0.0
                } else {
                    let nb = &s.neighbors[e];
                    nb.iter().map(|&f| c.at(f, d)).sum::<f64>() / nb.len() as f64
                };
                assert!((got.at(e, d) - want).abs() < 1e-12, "n={n} e={e}");
            }
        }
    }
}

fn generator(config: DggConfig, seed: u64) -> (Dgg, ParamStore) {
    let mut store = ParamStore::new();
    let dgg = Dgg::new(config, &mut store, &RngState::new(seed)).unwrap();
    (dgg, store)
}

#[test]
fn two_node_refinement_unrolled() {
    let (dgg, store) = generator(DggConfig::new(2, 2), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Edges in index order: (0,0), (0,1), (1,0), (1,1).
    let c = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let cv = tape.constant(c.clone());
    let r = dgg.edge_refine(&mut tape, &p, cv, 2).unwrap();
    let got = tape.value(r).clone();

    // (0,0) and (1,1) share no endpoint; every other pair does.
    let neighbors = [vec![1, 2], vec![0, 2, 3], vec![0, 1, 3], vec![1, 2]];
    let ws = store.get(dgg.refine_self);
    let wd = store.get(dgg.refine_diff);
    let bias = store.get(dgg.refine_bias);
    for (e, nb) in neighbors.iter().enumerate() {
        for out in 0..2 {
            // Mean over f of h(c_e ∥ c_e - c_f), each term evaluated separately.
            let mut acc = 0.0;
            for &f in nb {
                let mut h = bias.data()[out];
                for k in 0..2 {
                    h += c.at(e, k) * ws.at(k, out) + (c.at(e, k) - c.at(f, k)) * wd.at(k, out);
                }
                acc += h;
            }
            let want = acc / nb.len() as f64;
            assert!((got.at(e, out) - want).abs() < 1e-14, "edge {e} dim {out}");
        }
    }
}

fn run(dgg: &Dgg, store: &ParamStore, x: &Tensor, ids: &[u64], seed: u64, degree: DegreeSource) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut noise = NoiseSource::from_seed(seed);
    let out: DggOutput = dgg.forward(&mut tape, &p, xv, ids, &mut noise, degree, None).unwrap();
    (tape.value(out.adjacency).clone(), tape.value(out.degrees).clone())
}

#[test]
fn permuting_nodes_permutes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 7;
    let x = rand_tensor(&mut rng, &[n, 4], -1.0, 1.0);
    let ids: Vec<u64> = (0..n as u64).collect();
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let idp: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();

    for mode in [SelectMode::Soft, SelectMode::StraightThrough] {
        let mut cfg = DggConfig::new(4, 5);
        cfg.mode = mode;
        let (dgg, store) = generator(cfg, 4);
        let (a, k) = run(&dgg, &store, &x, &ids, 11, DegreeSource::Learned);
        let (ap, kp) = run(&dgg, &store, &xp, &idp, 11, DegreeSource::Learned);
        for i in 0..n {
            assert!((kp.data()[i] - k.data()[perm[i]]).abs() < 1e-12);
            for j in 0..n {
                assert!((ap.at(i, j) - a.at(perm[i], perm[j])).abs() < 1e-12, "{mode:?} ({i},{j})");
            }
        }
    }
}

#[test]
fn symmetric_mode_is_exactly_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (mode, seed) in [(SelectMode::Soft, 0), (SelectMode::StraightThrough, 1), (SelectMode::Soft, 2)] {
        let n = 9;
        let x = rand_tensor(&mut rng, &[n, 3], -2.0, 2.0);
        let mut cfg = DggConfig::new(3, 4);
        cfg.mode = mode;
        cfg.symmetric = true;
        let (dgg, store) = generator(cfg, seed);
        let ids: Vec<u64> = (0..n as u64).collect();
        let (a, _) = run(&dgg, &store, &x, &ids, seed, DegreeSource::Learned);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let norm = normalize_adjacency(&mut tape, av).unwrap();
        let nv = tape.value(norm);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(a.at(i, j).to_bits(), a.at(j, i).to_bits());
                assert_eq!(nv.at(i, j).to_bits(), nv.at(j, i).to_bits());
            }
        }
    }
}

#[test]
fn soft_and_straight_through_agree_at_small_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let (rows, width) = (4, 8);
        let e = rand_tensor(&mut rng, &[rows, width], 0.01, 1.0);
        // Fractional k keeps every rank at least 0.1 away from the step.
        let k = Tensor::vector((0..rows).map(|_| rng.random_range(0..width) as f64 + rng.random_range(0.1..0.9)).collect());
        let mut outs = Vec::new();
        let mut grads = Vec::new();
        for mode in [SelectMode::Soft, SelectMode::StraightThrough] {
            let mut tape = Tape::new();
            let ev = tape.leaf(e.clone());
            let kv = tape.leaf(k.clone());
            let a = topk_select(&mut tape, ev, kv, 1e-3, mode, false).unwrap();
            outs.push(tape.value(a).clone());
            let s = tape.sum(a);
            let g = tape.backward(s).unwrap();
            grads.push(g.get(ev).unwrap().clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) < 1e-9);
        // Straight-through backpropagates through the soft path.
        assert_eq!(grads[0], grads[1]);
    }
}
