//! Classical Ruge-Stuben coarsening and direct interpolation.

use crate::sparse::csr::CsrMatrix;

/// Strong-connection graph: for each row, the columns it strongly depends
/// on. The strength convention follows negative couplings; rows whose
/// off-diagonal mass is predominantly positive (advective energy rows can
/// be non-M-matrix) fall back to absolute values.
pub fn strength_graph(a: &CsrMatrix, theta: f64) -> Vec<Vec<usize>> {
    let n = a.n_rows;
    let mut strong = vec![Vec::new(); n];
    for i in 0..n {
        let (cols, vals) = a.row(i);
        let mut neg_sum = 0.0;
        let mut pos_sum = 0.0;
        for (&c, &v) in cols.iter().zip(vals) {
            if c == i {
                continue;
            }
            if v < 0.0 {
                neg_sum += -v;
            } else {
                pos_sum += v;
            }
        }
        let use_abs = pos_sum > neg_sum;
        let mut max_off = 0.0f64;
        for (&c, &v) in cols.iter().zip(vals) {
            if c == i {
                continue;
            }
            let m = if use_abs { v.abs() } else { -v };
            if m > max_off {
                max_off = m;
            }
        }
        if max_off <= 0.0 {
            continue;
        }
        for (&c, &v) in cols.iter().zip(vals) {
            if c == i {
                continue;
            }
            let m = if use_abs { v.abs() } else { -v };
            if m >= theta * max_off && m > 0.0 {
                strong[i].push(c);
            }
        }
    }
    strong
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Coarse,
    Fine,
    Unassigned,
}

/// Standard greedy first pass on the strength graph, followed by an
/// enforcement pass promoting fine points that would otherwise have no
/// strong coarse neighbor to interpolate from.
pub fn split_cf(strong: &[Vec<usize>]) -> Vec<PointKind> {
    let n = strong.len();
    // transpose of the strength graph: who depends on i
    let mut strong_t = vec![Vec::new(); n];
    for (i, deps) in strong.iter().enumerate() {
        for &j in deps {
            strong_t[j].push(i);
        }
    }

    let mut kind = vec![PointKind::Unassigned; n];
    let mut measure: Vec<i64> = strong_t.iter().map(|v| v.len() as i64).collect();
    // isolated points (no strong connections either way) become fine
    // immediately; the smoother handles them
    for i in 0..n {
        if strong[i].is_empty() && strong_t[i].is_empty() {
            kind[i] = PointKind::Fine;
        }
    }

    // max-heap with lazy deletion; ties resolved by lowest index for
    // determinism
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut heap: BinaryHeap<(i64, Reverse<usize>)> = (0..n)
        .filter(|&i| kind[i] == PointKind::Unassigned)
        .map(|i| (measure[i], Reverse(i)))
        .collect();

    while let Some((m, Reverse(i))) = heap.pop() {
        if kind[i] != PointKind::Unassigned || m != measure[i] {
            continue;
        }
        kind[i] = PointKind::Coarse;
        for &j in &strong_t[i] {
            if kind[j] == PointKind::Unassigned {
                kind[j] = PointKind::Fine;
                // new fine point makes its strong dependencies more
                // attractive coarse candidates
                for &k in &strong[j] {
                    if kind[k] == PointKind::Unassigned {
                        measure[k] += 1;
                        heap.push((measure[k], Reverse(k)));
                    }
                }
            }
        }
        for &j in &strong[i] {
            if kind[j] == PointKind::Unassigned {
                measure[j] -= 1;
                heap.push((measure[j], Reverse(j)));
            }
        }
    }
    for k in kind.iter_mut() {
        if *k == PointKind::Unassigned {
            *k = PointKind::Fine;
        }
    }

    // enforcement: every fine point with strong connections needs a strong
    // coarse neighbor for direct interpolation
    for i in 0..n {
        if kind[i] == PointKind::Fine
            && !strong[i].is_empty()
            && !strong[i].iter().any(|&j| kind[j] == PointKind::Coarse)
        {
            kind[i] = PointKind::Coarse;
        }
    }
    kind
}

/// Classical direct interpolation with separate handling of negative and
/// positive couplings. Coarse rows interpolate by identity.
pub fn direct_interpolation(
    a: &CsrMatrix,
    strong: &[Vec<usize>],
    kind: &[PointKind],
) -> CsrMatrix {
    let n = a.n_rows;
    let mut coarse_index = vec![usize::MAX; n];
    let mut nc = 0;
    for i in 0..n {
        if kind[i] == PointKind::Coarse {
            coarse_index[i] = nc;
            nc += 1;
        }
    }

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        if kind[i] == PointKind::Coarse {
            triplets.push((i, coarse_index[i], 1.0));
            continue;
        }
        let interp: Vec<usize> = strong[i]
            .iter()
            .copied()
            .filter(|&j| kind[j] == PointKind::Coarse)
            .collect();
        if interp.is_empty() {
            continue; // isolated fine point: coarse correction contributes 0
        }
        let (cols, vals) = a.row(i);
        let mut a_ii = 0.0;
        let mut neg_total = 0.0;
        let mut pos_total = 0.0;
        for (&c, &v) in cols.iter().zip(vals) {
            if c == i {
                a_ii += v;
            } else if v < 0.0 {
                neg_total += v;
            } else {
                pos_total += v;
            }
        }
        let get = |j: usize| a.get(i, j);
        let neg_interp: f64 = interp.iter().map(|&j| get(j)).filter(|v| *v < 0.0).sum();
        let pos_interp: f64 = interp.iter().map(|&j| get(j)).filter(|v| *v > 0.0).sum();

        // positive couplings without a positive interpolatory counterpart
        // are lumped into the diagonal
        let mut diag = a_ii;
        let mut beta = 0.0;
        if pos_interp != 0.0 {
            beta = pos_total / pos_interp;
        } else {
            diag += pos_total;
        }
        let alpha = if neg_interp != 0.0 { neg_total / neg_interp } else { 0.0 };
        if diag == 0.0 {
            continue;
        }
        for &j in &interp {
            let v = get(j);
            let w = if v < 0.0 {
                -alpha * v / diag
            } else if v > 0.0 && beta != 0.0 {
                -beta * v / diag
            } else {
                continue;
            };
            if w != 0.0 {
                triplets.push((i, coarse_index[j], w));
            }
        }
    }
    CsrMatrix::from_triplets(n, nc, &triplets).expect("interpolation triplets in range")
}
