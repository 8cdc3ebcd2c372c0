use super::TransportPlan;
use crate::error::{Error, Result};

const EPS: f64 = 1e-15;

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
}

/// Transportation problem by successive shortest paths on the bipartite
/// flow network `source -> rows -> columns -> sink`, with Dijkstra on
/// reduced costs. Costs are shifted to be nonnegative first, which leaves
/// the optimal plan unchanged because total mass is fixed.
pub fn min_cost_flow_plan(cost: &[Vec<f64>], mu: &[f64], nu: &[f64]) -> Result<TransportPlan> {
    let (n, m) = (mu.len(), nu.len());
    let cmin = cost.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let (src, sink) = (n + m, n + m + 1);
    let nodes = n + m + 2;
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let mut add = |edges: &mut Vec<Edge>, a: usize, b: usize, cap: f64, c: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost: c });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0.0, cost: -c });
    };
    for (i, &w) in mu.iter().enumerate() {
        add(&mut edges, src, i, w, 0.0);
    }
    let mut cell = vec![vec![0usize; m]; n];
    for i in 0..n {
        for j in 0..m {
            cell[i][j] = edges.len();
            add(&mut edges, i, n + j, f64::INFINITY, cost[i][j] - cmin);
        }
    }
    for (j, &w) in nu.iter().enumerate() {
        add(&mut edges, n + j, sink, w, 0.0);
    }

    let mut potential = vec![0.0; nodes];
    let mut remaining: f64 = mu.iter().sum::<f64>().min(nu.iter().sum());
    let mut rounds = 0usize;
    while remaining > 1e-13 {
        rounds += 1;
        if rounds > 100 * nodes * nodes {
            return Err(Error::numeric("min-cost flow did not terminate"));
        }
        // dense Dijkstra
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev: Vec<Option<usize>> = vec![None; nodes];
        let mut done = vec![false; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut u = None;
            for v in 0..nodes {
                if !done[v] && dist[v].is_finite() && u.is_none_or(|b: usize| dist[v] < dist[b]) {
                    u = Some(v);
                }
            }
            let Some(u) = u else { break };
            done[u] = true;
            for &e in &adj[u] {
                let ed = &edges[e];
                if ed.cap <= EPS || done[ed.to] {
                    continue;
                }
                let nd = dist[u] + ed.cost + potential[u] - potential[ed.to];
                if nd < dist[ed.to] - 1e-15 {
                    dist[ed.to] = nd;
                    prev[ed.to] = Some(e);
                }
            }
        }
        if !dist[sink].is_finite() {
            return Err(Error::contract("transportation problem is infeasible"));
        }
        for v in 0..nodes {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }
        let mut push = remaining;
        let mut v = sink;
        let mut hops = 0;
        while let Some(e) = prev[v] {
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
            hops += 1;
            if hops > nodes {
                return Err(Error::numeric("min-cost flow: augmenting path is cyclic"));
            }
        }
        let mut v = sink;
        while let Some(e) = prev[v] {
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        remaining -= push;
    }
    let pi = cell
        .iter()
        .map(|row| row.iter().map(|&e| edges[e ^ 1].cap).collect())
        .collect();
    Ok(TransportPlan { pi })
}
