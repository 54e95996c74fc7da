//! Dinic's maximum-flow algorithm on an adjacency-list residual graph.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    rev: usize,
    cap: i64,
}

/// Handle to an edge added with [`Dinic::add_edge`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeId {
    from: usize,
    index: usize,
}

#[derive(Debug, Clone)]
pub struct Dinic {
    graph: Vec<Vec<Edge>>,
    original: Vec<(EdgeId, i64)>,
    level: Vec<i32>,
    iter: Vec<usize>,
}

impl Dinic {
    pub fn new(nodes: usize) -> Self {
        Self {
            graph: vec![Vec::new(); nodes],
            original: Vec::new(),
            level: vec![-1; nodes],
            iter: vec![0; nodes],
        }
    }

    pub fn add_edge(&mut self, from: usize, to: usize, cap: i64) -> EdgeId {
        assert!(cap >= 0, "negative capacity");
        let index = self.graph[from].len();
        let rev = self.graph[to].len() + usize::from(from == to);
        self.graph[from].push(Edge { to, rev, cap });
        self.graph[to].push(Edge {
            to: from,
            rev: index,
            cap: 0,
        });
        let id = EdgeId { from, index };
        self.original.push((id, cap));
        id
    }

    /// Flow currently routed through `edge`.
    pub fn flow_on(&self, edge: EdgeId) -> i64 {
        let (_, cap) = self
            .original
            .iter()
            .find(|(id, _)| *id == edge)
            .expect("edge belongs to this network");
        cap - self.graph[edge.from][edge.index].cap
    }

    fn bfs(&mut self, source: usize) {
        self.level.iter_mut().for_each(|l| *l = -1);
        self.level[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            for e in &self.graph[v] {
                if e.cap > 0 && self.level[e.to] < 0 {
                    self.level[e.to] = self.level[v] + 1;
                    queue.push_back(e.to);
                }
            }
        }
    }

    fn dfs(&mut self, v: usize, sink: usize, limit: i64) -> i64 {
        if v == sink {
            return limit;
        }
        while self.iter[v] < self.graph[v].len() {
            let i = self.iter[v];
            let Edge { to, rev, cap } = self.graph[v][i];
            if cap > 0 && self.level[v] < self.level[to] {
                let pushed = self.dfs(to, sink, limit.min(cap));
                if pushed > 0 {
                    self.graph[v][i].cap -= pushed;
                    self.graph[to][rev].cap += pushed;
                    return pushed;
                }
            }
            self.iter[v] += 1;
        }
        0
    }

    /// Maximum flow from `source` to `sink`. Calling it again continues from
    /// the current residual graph.
    pub fn max_flow(&mut self, source: usize, sink: usize) -> i64 {
        let mut total = 0;
        loop {
            self.bfs(source);
            if self.level[sink] < 0 {
                return total;
            }
            self.iter.iter_mut().for_each(|i| *i = 0);
            loop {
                let f = self.dfs(source, sink, i64::MAX);
                if f == 0 {
                    break;
                }
                total += f;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_network() {
        let mut d = Dinic::new(3);
        d.add_edge(0, 1, 10);
        let e = d.add_edge(1, 2, 15);
        d.add_edge(0, 2, 20);
        assert_eq!(d.max_flow(0, 2), 30);
        assert_eq!(d.flow_on(e), 10);
    }

    #[test]
    fn classic_six_node() {
        // CLRS figure 26.1: max flow 23
        let mut d = Dinic::new(6);
        for (u, v, c) in [
            (0, 1, 16),
            (0, 2, 13),
            (1, 3, 12),
            (2, 1, 4),
            (2, 4, 14),
            (3, 2, 9),
            (3, 5, 20),
            (4, 3, 7),
            (4, 5, 4),
        ] {
            d.add_edge(u, v, c);
        }
        assert_eq!(d.max_flow(0, 5), 23);
    }

    #[test]
    fn disconnected_sink() {
        let mut d = Dinic::new(4);
        d.add_edge(0, 1, 5);
        d.add_edge(2, 3, 5);
        assert_eq!(d.max_flow(0, 3), 0);
    }
}
