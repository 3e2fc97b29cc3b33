//! Primal network simplex for balanced transportation problems.
//!
//! Supplies are integers, so flows stay exact and degenerate pivots cannot
//! drift. The spanning tree is kept strongly feasible (Cunningham's leaving
//! rule), which rules out cycling. Entering arcs are priced by block search.

/// Optimal flow of a transportation problem together with node potentials.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    /// `(source, sink, units)` for every arc with positive flow.
    pub flows: Vec<(usize, usize, i64)>,
    /// Dual variables with `u_i + v_j ≤ c_ij`, tight on basic arcs.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pivots: usize,
}

struct Tree {
    parent: Vec<usize>,
    pred: Vec<usize>,
    up: Vec<bool>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    pi: Vec<f64>,
}

/// Solves `min Σ c_ij x_ij` subject to row sums `supply` and column sums
/// `demand`, `x ≥ 0`. `cost` is row-major `n1 × n2`; supplies and demands
/// must be positive with equal totals.
pub fn solve(supply: &[i64], demand: &[i64], cost: &[f64]) -> TransportSolution {
    let n1 = supply.len();
    let n2 = demand.len();
    assert_eq!(cost.len(), n1 * n2);
    assert!(supply.iter().chain(demand).all(|&s| s > 0));
    assert_eq!(supply.iter().sum::<i64>(), demand.iter().sum::<i64>());
    let nodes = n1 + n2;
    let root = nodes;
    let real_arcs = n1 * n2;
    let max_cost = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let art_cost = (max_cost + 1.0) * (nodes as f64 + 1.0);

    let arc_src = |a: usize| -> usize {
        if a < real_arcs {
            a / n2
        } else {
            let u = a - real_arcs;
            if u < n1 { u } else { root }
        }
    };
    let arc_tgt = |a: usize| -> usize {
        if a < real_arcs {
            n1 + a % n2
        } else {
            let u = a - real_arcs;
            if u < n1 { root } else { u }
        }
    };
    let arc_cost = |a: usize| -> f64 {
        if a < real_arcs {
            cost[a]
        } else if a - real_arcs < n1 {
            0.0
        } else {
            art_cost
        }
    };

    let mut flow = vec![0i64; real_arcs + nodes];
    let mut in_tree = vec![false; real_arcs + nodes];
    let mut tree = Tree {
        parent: vec![root; nodes + 1],
        pred: vec![usize::MAX; nodes + 1],
        up: vec![false; nodes + 1],
        depth: vec![1; nodes + 1],
        children: vec![Vec::new(); nodes + 1],
        pi: vec![0.0; nodes + 1],
    };
    tree.depth[root] = 0;
    for u in 0..nodes {
        let a = real_arcs + u;
        tree.pred[u] = a;
        in_tree[a] = true;
        tree.children[root].push(u);
        if u < n1 {
            tree.up[u] = true;
            flow[a] = supply[u];
        } else {
            tree.up[u] = false;
            tree.pi[u] = art_cost;
            flow[a] = demand[u - n1];
        }
    }

    let tol = 1e-12 * (max_cost + 1.0);
    let block = ((real_arcs as f64).sqrt().ceil() as usize).max(16).min(real_arcs.max(1));
    let mut next_arc = 0usize;
    let mut pivots = 0usize;
    let reduced = |a: usize, pi: &[f64]| cost[a] + pi[a / n2] - pi[n1 + a % n2];

    loop {
        let mut best = usize::MAX;
        let mut best_rc = -tol;
        let mut scanned = 0usize;
        let mut in_block = 0usize;
        while scanned < real_arcs {
            let a = next_arc;
            next_arc += 1;
            if next_arc == real_arcs {
                next_arc = 0;
            }
            scanned += 1;
            in_block += 1;
            if !in_tree[a] {
                let rc = reduced(a, &tree.pi);
                if rc < best_rc {
                    best_rc = rc;
                    best = a;
                }
            }
            if in_block >= block {
                if best != usize::MAX {
                    break;
                }
                in_block = 0;
            }
        }
        if best == usize::MAX {
            break;
        }
        pivots += 1;
        let entering = best;
        let first = arc_src(entering);
        let second = arc_tgt(entering);

        let (mut a, mut b) = (first, second);
        while a != b {
            if tree.depth[a] > tree.depth[b] {
                a = tree.parent[a];
            } else if tree.depth[b] > tree.depth[a] {
                b = tree.parent[b];
            } else {
                a = tree.parent[a];
                b = tree.parent[b];
            }
        }
        let join = a;

        let mut delta = i64::MAX;
        let mut u_out = usize::MAX;
        let mut side = 0u8;
        let mut w = first;
        while w != join {
            if tree.up[w] && flow[tree.pred[w]] < delta {
                delta = flow[tree.pred[w]];
                u_out = w;
                side = 1;
            }
            w = tree.parent[w];
        }
        let mut w = second;
        while w != join {
            if !tree.up[w] && flow[tree.pred[w]] <= delta {
                delta = flow[tree.pred[w]];
                u_out = w;
                side = 2;
            }
            w = tree.parent[w];
        }
        assert!(side != 0, "uncapacitated cycle without a blocking arc");

        if delta > 0 {
            flow[entering] += delta;
            let mut w = first;
            while w != join {
                let e = tree.pred[w];
                if tree.up[w] {
                    flow[e] -= delta;
                } else {
                    flow[e] += delta;
                }
                w = tree.parent[w];
            }
            let mut w = second;
            while w != join {
                let e = tree.pred[w];
                if tree.up[w] {
                    flow[e] += delta;
                } else {
                    flow[e] -= delta;
                }
                w = tree.parent[w];
            }
        }

        let leaving = tree.pred[u_out];
        in_tree[leaving] = false;
        in_tree[entering] = true;
        let (start, anchor, start_up) = if side == 1 { (first, second, true) } else { (second, first, false) };

        let mut path = vec![start];
        while *path.last().expect("path is nonempty") != u_out {
            let last = *path.last().expect("path is nonempty");
            path.push(tree.parent[last]);
        }
        let old_parent_out = tree.parent[u_out];
        remove_child(&mut tree.children[old_parent_out], u_out);
        let mut carried_arc = entering;
        let mut carried_up = start_up;
        let mut new_parent = anchor;
        for &node in &path {
            let old_parent = tree.parent[node];
            let old_arc = tree.pred[node];
            let old_up = tree.up[node];
            if node != u_out {
                remove_child(&mut tree.children[old_parent], node);
            }
            tree.parent[node] = new_parent;
            tree.pred[node] = carried_arc;
            tree.up[node] = carried_up;
            tree.children[new_parent].push(node);
            carried_arc = old_arc;
            carried_up = !old_up;
            new_parent = node;
        }

        let mut stack = vec![start];
        while let Some(x) = stack.pop() {
            let p = tree.parent[x];
            let c = arc_cost(tree.pred[x]);
            tree.pi[x] = if tree.up[x] { tree.pi[p] - c } else { tree.pi[p] + c };
            tree.depth[x] = tree.depth[p] + 1;
            stack.extend(tree.children[x].iter().copied());
        }
    }

    debug_assert!((real_arcs..real_arcs + nodes).all(|a| flow[a] == 0));
    let flows = (0..real_arcs)
        .filter(|&a| flow[a] > 0)
        .map(|a| (a / n2, a % n2, flow[a]))
        .collect();
    TransportSolution {
        flows,
        u: (0..n1).map(|i| -tree.pi[i]).collect(),
        v: (0..n2).map(|j| tree.pi[n1 + j]).collect(),
        pivots,
    }
}

fn remove_child(list: &mut Vec<usize>, node: usize) {
    if let Some(k) = list.iter().position(|&c| c == node) {
        list.swap_remove(k);
    }
}

/// Rounds nonnegative masses to integer units with the given total using
/// largest remainders; ties go to the lower index.
pub fn to_units(masses: &[f64], total_units: i64) -> Vec<i64> {
    let sum: f64 = masses.iter().sum();
    let scaled: Vec<f64> = masses.iter().map(|m| m / sum * total_units as f64).collect();
    let mut units: Vec<i64> = scaled.iter().map(|s| s.floor() as i64).collect();
    let mut missing = total_units - units.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut k = 0;
    while missing > 0 {
        units[order[k % order.len()]] += 1;
        missing -= 1;
        k += 1;
    }
    units
}
