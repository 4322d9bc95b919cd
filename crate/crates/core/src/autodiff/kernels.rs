//! Raw loops shared by forward passes and adjoints. All reductions run in a
//! fixed order so results are bit-reproducible.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + kk] += dot;
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

/// Number of directed edges of the complete graph on `n` nodes (self-loops
/// included) that share an endpoint with edge `(i, j)`, excluding itself.
pub(crate) fn adjoint_degree(n: usize, i: usize, j: usize) -> usize {
    if n < 2 {
        0
    } else if i == j {
        2 * n - 2
    } else {
        4 * n - 5
    }
}

/// For every directed edge `e = (i, j)` of the complete graph on `n` nodes,
/// sums the `d`-dimensional rows of `x` over all other edges sharing an
/// endpoint with `e`. Rows of `x` are indexed `i * n + j`.
///
/// Uses inclusion-exclusion over per-node row and column sums, so the cost
/// is `O(n² d)` instead of the `O(n³ d)` of explicit enumeration.
pub(crate) fn adjoint_neighbor_sum(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n * d];
    if n < 2 {
        return out;
    }
    // touch[u] = Σ over edges with u as an endpoint, the self-edge counted once
    let mut touch = vec![0.0; n * d];
    for u in 0..n {
        for v in 0..n {
            let row = &x[(u * n + v) * d..(u * n + v + 1) * d];
            for (t, &r) in touch[u * d..(u + 1) * d].iter_mut().zip(row) {
                *t += r;
            }
            if u != v {
                for (t, &r) in touch[v * d..(v + 1) * d].iter_mut().zip(row) {
                    *t += r;
                }
            }
        }
    }
    for i in 0..n {
        let ti = &touch[i * d..(i + 1) * d];
        for j in 0..n {
            let e = (i * n + j) * d;
            let o = &mut out[e..e + d];
            let xij = &x[e..e + d];
            if i == j {
                for c in 0..d {
                    o[c] = ti[c] - xij[c];
                }
            } else {
                let tj = &touch[j * d..(j + 1) * d];
                let xji = &x[(j * n + i) * d..(j * n + i + 1) * d];
                for c in 0..d {
                    o[c] = ti[c] + tj[c] - 2.0 * xij[c] - xji[c];
                }
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Smoothed step `1 - 0.5 (1 + tanh((rank - k) / λ))` and the hard step it
/// approaches. Ranks are 1-based.
pub(crate) fn gate_value(rank: f64, k: f64, lambda: f64, hard: bool) -> f64 {
    if hard {
        if rank <= k {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - 0.5 * (1.0 + ((rank - k) / lambda).tanh())
    }
}

/// ∂gate/∂k of the smoothed step; non-negative everywhere.
pub(crate) fn gate_dk(rank: f64, k: f64, lambda: f64) -> f64 {
    let t = ((rank - k) / lambda).tanh();
    0.5 * (1.0 - t * t) / lambda
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_neighbor_sum(x: &[f64], n: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n * d];
        for i in 0..n {
            for j in 0..n {
                for u in 0..n {
                    for v in 0..n {
                        if (u, v) == (i, j) {
                            continue;
                        }
                        if u == i || u == j || v == i || v == j {
                            for c in 0..d {
                                out[(i * n + j) * d + c] += x[(u * n + v) * d + c];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn neighbor_sum_matches_enumeration() {
        for n in 1..=5 {
            let d = 3;
            let x: Vec<f64> = (0..n * n * d).map(|v| ((v * 37 % 11) as f64) - 4.5).collect();
            let fast = adjoint_neighbor_sum(&x, n, d);
            let slow = brute_neighbor_sum(&x, n, d);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
