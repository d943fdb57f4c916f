//! Successive shortest paths min-cost flow on integer costs.
//!
//! Dijkstra with Johnson potentials; all input costs must be non-negative. Arc and
//! vertex order fully determine the result.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

pub const INF_CAP: i64 = i64::MAX / 4;
const INF_DIST: i64 = i64::MAX / 4;

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: i64,
    cost: i64,
    rev: usize,
}

#[derive(Debug, Clone)]
pub struct MinCostFlow {
    adj: Vec<Vec<Arc>>,
    /// (vertex, index in adj) of every forward arc, in insertion order.
    arcs: Vec<(usize, usize)>,
    original_cap: Vec<i64>,
    /// Kept across calls so reduced costs stay non-negative on the residual graph.
    potential: Vec<i64>,
}

impl MinCostFlow {
    pub fn new(vertices: usize) -> Self {
        MinCostFlow {
            adj: vec![Vec::new(); vertices],
            arcs: Vec::new(),
            original_cap: Vec::new(),
            potential: vec![0; vertices],
        }
    }

    /// Returns the arc index for [`MinCostFlow::flow_on`].
    pub fn add_arc(&mut self, from: usize, to: usize, cap: i64, cost: i64) -> usize {
        debug_assert!(cost >= 0, "negative arc cost");
        let fwd = self.adj[from].len();
        let bwd = self.adj[to].len() + usize::from(from == to);
        self.adj[from].push(Arc {
            to,
            cap,
            cost,
            rev: bwd,
        });
        self.adj[to].push(Arc {
            to: from,
            cap: 0,
            cost: -cost,
            rev: fwd,
        });
        self.arcs.push((from, fwd));
        self.original_cap.push(cap);
        self.arcs.len() - 1
    }

    pub fn flow_on(&self, arc: usize) -> i64 {
        let (v, i) = self.arcs[arc];
        self.original_cap[arc] - self.adj[v][i].cap
    }

    /// Pushes up to `limit` units from `s` to `t` at minimum cost.
    /// Returns (flow, cost).
    pub fn run(&mut self, s: usize, t: usize, limit: i64) -> (i64, i64) {
        let n = self.adj.len();
        let mut potential = std::mem::take(&mut self.potential);
        let mut flow = 0;
        let mut cost = 0;
        while flow < limit {
            let mut dist = vec![INF_DIST; n];
            let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
            dist[s] = 0;
            let mut heap = BinaryHeap::new();
            heap.push(Reverse((0i64, s)));
            while let Some(Reverse((d, v))) = heap.pop() {
                if d > dist[v] {
                    continue;
                }
                for (i, a) in self.adj[v].iter().enumerate() {
                    if a.cap <= 0 {
                        continue;
                    }
                    let nd = d + a.cost + potential[v] - potential[a.to];
                    if nd < dist[a.to] {
                        dist[a.to] = nd;
                        parent[a.to] = Some((v, i));
                        heap.push(Reverse((nd, a.to)));
                    }
                }
            }
            if dist[t] >= INF_DIST {
                break;
            }
            for v in 0..n {
                if dist[v] < INF_DIST {
                    potential[v] += dist[v];
                }
            }
            let mut push = limit - flow;
            let mut v = t;
            while let Some((u, i)) = parent[v] {
                push = push.min(self.adj[u][i].cap);
                v = u;
            }
            let mut v = t;
            while let Some((u, i)) = parent[v] {
                let rev = self.adj[u][i].rev;
                self.adj[u][i].cap -= push;
                self.adj[v][rev].cap += push;
                cost += push * self.adj[u][i].cost;
                v = u;
            }
            flow += push;
        }
        self.potential = potential;
        (flow, cost)
    }
}
