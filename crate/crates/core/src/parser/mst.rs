//! Maximum-score single-rooted arborescence (Chu-Liu-Edmonds).
//!
//! The unconstrained algorithm may attach several words to the root. To get
//! exactly one root attachment we solve one problem per candidate root child
//! `r`, with every other root arc removed, and keep the best. Equal totals
//! resolve to the lower root child; within one problem, ties between
//! incoming arcs resolve to the lower head index.

use crate::tape::Mat;

const NONE: usize = usize::MAX;

/// Chu-Liu-Edmonds on a dense weight matrix `w[u][v]` (edge `u → v`); `NEG_INFINITY`
/// marks missing edges. Returns the parent of every node (`NONE` for `root`).
fn chu_liu_edmonds(w: &[Vec<f64>], root: usize) -> Vec<usize> {
    let n = w.len();
    let mut parent = vec![NONE; n];
    for v in 0..n {
        if v == root {
            continue;
        }
        let mut best = NONE;
        for u in 0..n {
            if u == v {
                continue;
            }
            if best == NONE || w[u][v] > w[best][v] {
                best = u;
            }
        }
        parent[v] = best;
    }

    let Some(cycle) = find_cycle(&parent, root) else {
        return parent;
    };
    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }

    // Contracted graph: non-cycle nodes keep their relative order, the cycle
    // becomes the last node.
    let mut new_id = vec![NONE; n];
    let mut old_of = Vec::new();
    for v in 0..n {
        if !in_cycle[v] {
            new_id[v] = old_of.len();
            old_of.push(v);
        }
    }
    let c = old_of.len();
    let size = c + 1;
    let mut cw = vec![vec![f64::NEG_INFINITY; size]; size];
    let mut enter_via = vec![NONE; size];
    let mut leave_via = vec![NONE; size];
    for (nu, &u) in old_of.iter().enumerate() {
        for (nv, &v) in old_of.iter().enumerate() {
            if u != v {
                cw[nu][nv] = w[u][v];
            }
        }
        for &v in &cycle {
            let s = w[u][v] - w[parent[v]][v];
            if enter_via[nu] == NONE || s > cw[nu][c] {
                cw[nu][c] = s;
                enter_via[nu] = v;
            }
        }
    }
    for (nv, &v) in old_of.iter().enumerate() {
        for &u in &cycle {
            if leave_via[nv] == NONE || w[u][v] > cw[c][nv] {
                cw[c][nv] = w[u][v];
                leave_via[nv] = u;
            }
        }
    }

    let sub = chu_liu_edmonds(&cw, new_id[root]);
    let mut result = parent.clone();
    for (nv, &v) in old_of.iter().enumerate() {
        if v == root {
            continue;
        }
        let p = sub[nv];
        result[v] = if p == c { leave_via[nv] } else { old_of[p] };
    }
    let entering_from = sub[c];
    let v_star = enter_via[entering_from];
    result[v_star] = old_of[entering_from];
    result
}

fn find_cycle(parent: &[usize], root: usize) -> Option<Vec<usize>> {
    let n = parent.len();
    let mut state = vec![0u8; n]; // 0 unvisited, 1 on current path, 2 done
    for start in 0..n {
        if state[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut v = start;
        while v != NONE && v != root && state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = parent[v];
        }
        if v != NONE && v != root && state[v] == 1 {
            let pos = path.iter().position(|&x| x == v).unwrap();
            return Some(path[pos..].to_vec());
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

/// Best single-rooted tree under `arcs` (`(n+1) × n`, see
/// [`crate::parser::matrix_tree`]). Returns 1-based heads, 0 = root.
pub fn decode_heads(arcs: &Mat) -> Vec<usize> {
    let n = arcs.ncols();
    assert_eq!(arcs.nrows(), n + 1);
    if n == 1 {
        return vec![0];
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..n {
        let mut w = vec![vec![f64::NEG_INFINITY; n + 1]; n + 1];
        w[0][r + 1] = arcs[[0, r]];
        for h in 1..=n {
            for m in 0..n {
                if h != m + 1 {
                    w[h][m + 1] = arcs[[h, m]];
                }
            }
        }
        let parent = chu_liu_edmonds(&w, 0);
        let heads: Vec<usize> = parent[1..].to_vec();
        let total: f64 = heads.iter().enumerate().map(|(m, &h)| arcs[[h, m]]).sum();
        if best.as_ref().map_or(true, |(b, _)| total > *b) {
            best = Some((total, heads));
        }
    }
    best.expect("at least one candidate root").1
}

pub fn tree_score(arcs: &Mat, heads: &[usize]) -> f64 {
    heads.iter().enumerate().map(|(m, &h)| arcs[[h, m]]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_heads;
    use crate::parser::matrix_tree::brute;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_word_example() {
        // S(r→a)=1, S(r→b)=0, S(a→b)=2, S(b→a)=0
        let arcs = ndarray::arr2(&[[1.0, 0.0], [f64::NAN, 2.0], [0.0, f64::NAN]]);
        let arcs = arcs.mapv(|v| if v.is_nan() { 0.0 } else { v });
        let heads = decode_heads(&arcs);
        assert_eq!(heads, vec![0, 1]);
        assert_eq!(tree_score(&arcs, &heads), 3.0);
    }

    #[test]
    fn single_word_attaches_to_root() {
        assert_eq!(decode_heads(&ndarray::arr2(&[[-5.0], [9.0]])), vec![0]);
    }

    #[test]
    fn matches_exhaustive_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.gen_range(1..=5);
            let arcs = Mat::from_shape_fn((n + 1, n), |_| rng.gen_range(-5.0..5.0));
            let heads = decode_heads(&arcs);
            let best = brute::all_trees(n)
                .into_iter()
                .max_by(|a, b| tree_score(&arcs, a).partial_cmp(&tree_score(&arcs, b)).unwrap())
                .unwrap();
            assert_eq!(heads, best);
        }
    }

    #[test]
    fn recovers_planted_tree_with_cycles_in_greedy_choice() {
        // Greedy heads form a 2-cycle between words 2 and 3.
        let mut arcs = Mat::zeros((4, 3));
        arcs[[0, 0]] = 5.0;
        arcs[[3, 1]] = 4.0; // 3 → 2
        arcs[[2, 2]] = 4.0; // 2 → 3
        arcs[[1, 1]] = 3.0; // 1 → 2
        let heads = decode_heads(&arcs);
        assert!(validate_heads(&heads).is_ok());
        assert_eq!(tree_score(&arcs, &heads), 12.0);
    }

    proptest! {
        #[test]
        fn output_is_always_a_single_rooted_tree(
            n in 1usize..12,
            seed in any::<u64>(),
            shift in -50.0f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arcs = Mat::from_shape_fn((n + 1, n), |_| rng.gen_range(-3.0..3.0));
            let heads = decode_heads(&arcs);
            prop_assert!(validate_heads(&heads).is_ok());
            // A constant shift does not change the argmax.
            prop_assert_eq!(decode_heads(&(&arcs + shift)), heads);
        }
    }
}
