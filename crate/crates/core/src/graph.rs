//! Sensor-graph construction.
//!
//! Two strategies produce the GNN graph from a feeder and a sensor
//! placement: the measured-only construction, whose nodes are exactly the
//! micro-PMU buses connected to mirror electrical adjacency, and the
//! conventional full-topology mapping with one node per physical bus and
//! an observability mask.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{
    bus_id_key, ClosedGraph, FeederError, FeederTopology, PhaseClass, SensorPlacement,
};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("topology failed validation: {0}")]
    InvalidTopology(String),
    #[error(transparent)]
    Placement(#[from] FeederError),
    #[error("graph is disconnected: node for bus {0} is unreachable")]
    Disconnected(String),
    #[error("unknown node index {0}")]
    UnknownNode(usize),
    #[error("placement is empty")]
    EmptyPlacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphStrategy {
    MeasuredOnly,
    FullTopology,
}

impl GraphStrategy {
    pub fn keyword(self) -> &'static str {
        match self {
            GraphStrategy::MeasuredOnly => "measured-only",
            GraphStrategy::FullTopology => "full",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphNode {
    pub index: usize,
    pub bus: String,
    pub phase_class: PhaseClass,
    pub observed: bool,
    /// Position in the placement list for observed nodes.
    pub sensor_index: Option<usize>,
}

/// The GNN graph: ordered nodes, undirected edges, observability flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorGraph {
    pub strategy: GraphStrategy,
    pub nodes: Vec<GraphNode>,
    /// Canonical undirected edges with `e.0 < e.1`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl SensorGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn observed_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.observed).count()
    }

    pub fn observed_mask(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| n.observed).collect()
    }

    /// Binary adjacency matrix with zero diagonal.
    pub fn adjacency_matrix(&self) -> Array2<f64> {
        let n = self.node_count();
        let mut a = Array2::zeros((n, n));
        for &(i, j) in &self.edges {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }

    /// Neighbor lists in ascending index order, self excluded.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.node_count()];
        for &(i, j) in &self.edges {
            lists[i].push(j);
            lists[j].push(i);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }

    /// N(v) with v first, then neighbors in ascending node index.
    pub fn neighbor_set(&self, v: usize) -> Result<Vec<usize>, GraphError> {
        if v >= self.node_count() {
            return Err(GraphError::UnknownNode(v));
        }
        let mut out = vec![v];
        out.extend(self.neighbor_lists()[v].iter().copied());
        Ok(out)
    }

    fn is_connected(&self) -> Option<usize> {
        if self.nodes.is_empty() {
            return None;
        }
        let lists = self.neighbor_lists();
        let mut seen = vec![false; self.node_count()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &lists[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.iter().position(|&s| !s)
    }

    /// Edge set keyed by bus ids, each pair and the list in natural order.
    pub fn edges_by_bus(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .edges
            .iter()
            .map(|&(i, j)| {
                let a = self.nodes[i].bus.clone();
                let b = self.nodes[j].bus.clone();
                if bus_id_key(&a) <= bus_id_key(&b) {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect();
        out.sort_by(|x, y| {
            (bus_id_key(&x.0), bus_id_key(&x.1)).cmp(&(bus_id_key(&y.0), bus_id_key(&y.1)))
        });
        out
    }

    /// Canonical `<busA> <busB>` lines; the golden fixtures store this form.
    pub fn canonical_edge_text(&self) -> String {
        let mut s = String::new();
        for (a, b) in self.edges_by_bus() {
            s.push_str(&a);
            s.push(' ');
            s.push_str(&b);
            s.push('\n');
        }
        s
    }

    /// Plain-text export: `node` records then `edge` records.
    pub fn export_edge_list(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            s.push_str(&format!(
                "node {} {} {} {}\n",
                n.index,
                n.bus,
                n.phase_class.keyword(),
                n.observed
            ));
        }
        for &(i, j) in &self.edges {
            s.push_str(&format!("edge {i} {j}\n"));
        }
        s
    }

    /// DOT export for visual inspection.
    pub fn export_dot(&self, name: &str) -> String {
        let mut s = format!("graph {name} {{\n");
        s.push_str("  node [shape=circle fontsize=10];\n");
        for n in &self.nodes {
            let style = match (n.observed, n.phase_class) {
                (false, _) => "style=dotted",
                (true, PhaseClass::ThreePhase) => "style=filled fillcolor=lightblue",
                (true, _) => "style=filled fillcolor=lightgray",
            };
            s.push_str(&format!("  n{} [label=\"{}\" {}];\n", n.index, n.bus, style));
        }
        for &(i, j) in &self.edges {
            s.push_str(&format!("  n{i} -- n{j};\n"));
        }
        s.push_str("}\n");
        s
    }
}

/// Degree-normalized adjacency with self-loops.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub matrix: Array2<f64>,
}

/// Computes D^{-1/2} (A + I) D^{-1/2}; self-loops keep every degree >= 1.
pub fn normalized_adjacency(graph: &SensorGraph) -> NormalizedAdjacency {
    let n = graph.node_count();
    let mut a = graph.adjacency_matrix();
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    let degrees: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                m[[i, j]] = 1.0 / (degrees[i] * degrees[j]).sqrt();
            }
        }
    }
    NormalizedAdjacency { matrix: m }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when both are already in the same set (a cycle).
    fn union(&mut self, a: usize, b: usize) -> bool {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

/// Micro-PMUs reachable from a sensor bus without traversing another
/// sensor bus, with the length of the shortest such path.
fn accessible_pmus(
    graph: &ClosedGraph,
    topology: &FeederTopology,
    pmu_of_bus: &HashMap<usize, usize>,
    src_bus: usize,
) -> Vec<(usize, f64)> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    #[derive(PartialEq)]
    struct Cost(f64);
    impl Eq for Cost {}
    impl PartialOrd for Cost {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Cost {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.partial_cmp(&other.0).expect("costs are finite")
        }
    }

    let n = graph.adj.len();
    let mut dist: Vec<Option<f64>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[src_bus] = Some(0.0);
    heap.push(Reverse((Cost(0.0), src_bus)));
    let mut found: Vec<(usize, f64)> = Vec::new();
    while let Some(Reverse((Cost(d), v))) = heap.pop() {
        if dist[v].map_or(true, |best| d > best) {
            continue;
        }
        if v != src_bus {
            if let Some(&pmu) = pmu_of_bus.get(&v) {
                // Sensors terminate the search along this branch.
                found.push((pmu, d));
                continue;
            }
        }
        for &(w, seg) in &graph.adj[v] {
            let nd = d + topology.segments[seg].length;
            if dist[w].map_or(true, |best| nd < best) {
                dist[w] = Some(nd);
                heap.push(Reverse((Cost(nd), w)));
            }
        }
    }
    found
}

/// Measured-only graph construction.
///
/// Nodes are exactly the placement sensors. Three-phase sensors are wired
/// first, walking out from the substation in breadth-first order and
/// connecting each to its accessible three-phase peers by ascending
/// electrical distance, skipping any edge that would close a loop.
/// Single- and two-phase sensors then attach to both bracketing
/// three-phase sensors when they sit on the path between exactly two of
/// them, otherwise to the closest accessible three-phase sensor, or,
/// lacking one, to the closest accessible single/two-phase sensor.
pub fn build_measured_only(
    topology: &FeederTopology,
    placement: &SensorPlacement,
) -> Result<SensorGraph, GraphError> {
    if placement.is_empty() {
        return Err(GraphError::EmptyPlacement);
    }
    placement.validate(topology)?;
    let diags = topology.validate();
    if diags.has_errors() {
        return Err(GraphError::InvalidTopology(
            diags
                .items
                .iter()
                .map(|d| d.message.clone())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }

    let nodes: Vec<GraphNode> = placement
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| GraphNode {
            index: i,
            bus: e.bus.clone(),
            phase_class: e.class,
            observed: true,
            sensor_index: Some(i),
        })
        .collect();
    let bus_of_node: Vec<usize> = nodes
        .iter()
        .map(|n| topology.bus_index(&n.bus).expect("validated placement"))
        .collect();
    let pmu_of_bus: HashMap<usize, usize> = bus_of_node
        .iter()
        .enumerate()
        .map(|(node, &bus)| (bus, node))
        .collect();

    let graph = topology.closed_graph();
    let accessible: Vec<Vec<(usize, f64)>> = (0..nodes.len())
        .map(|i| {
            let mut acc = accessible_pmus(&graph, topology, &pmu_of_bus, bus_of_node[i]);
            acc.sort_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap()
                    .then_with(|| bus_id_key(&nodes[a.0].bus).cmp(&bus_id_key(&nodes[b.0].bus)))
            });
            acc
        })
        .collect();

    let is_three = |i: usize| nodes[i].phase_class == PhaseClass::ThreePhase;

    let mut edges: Vec<(usize, usize)> = Vec::new();
    let add_edge = |edges: &mut Vec<(usize, usize)>, a: usize, b: usize| {
        let e = (a.min(b), a.max(b));
        if !edges.contains(&e) {
            edges.push(e);
        }
    };

    // Three-phase pass: substation-out BFS order, union-find loop guard.
    let bfs = graph.bfs_order(topology.substation_index());
    let three_order: Vec<usize> = bfs
        .iter()
        .filter_map(|&bus| pmu_of_bus.get(&bus).copied())
        .filter(|&i| is_three(i))
        .collect();
    let mut uf = UnionFind::new(nodes.len());
    for &v in &three_order {
        for &(w, _) in accessible[v].iter().filter(|(w, _)| is_three(*w)) {
            if uf.union(v, w) {
                add_edge(&mut edges, v, w);
            }
        }
    }

    // Lateral pass for single- and two-phase sensors.
    let all_dist: HashMap<usize, Vec<Option<f64>>> = bus_of_node
        .iter()
        .map(|&bus| (bus, graph.dijkstra(bus, &topology.segments)))
        .collect();
    for u in 0..nodes.len() {
        if is_three(u) {
            continue;
        }
        let three: Vec<(usize, f64)> = accessible[u]
            .iter()
            .copied()
            .filter(|(w, _)| is_three(*w))
            .collect();
        let lateral: Vec<(usize, f64)> = accessible[u]
            .iter()
            .copied()
            .filter(|(w, _)| !is_three(*w))
            .collect();
        if three.len() == 2 {
            let (v, dv) = three[0];
            let (w, dw) = three[1];
            let vw = all_dist[&bus_of_node[v]][bus_of_node[w]];
            // On-path test: u brackets v and w when the v-w path runs
            // through u's bus.
            if let Some(vw) = vw {
                if (dv + dw - vw).abs() <= 1e-9 {
                    add_edge(&mut edges, u, v);
                    add_edge(&mut edges, u, w);
                    continue;
                }
            }
        }
        if let Some(&(v, _)) = three.first() {
            add_edge(&mut edges, u, v);
        } else if let Some(&(m, _)) = lateral.first() {
            add_edge(&mut edges, u, m);
        }
    }

    edges.sort_unstable();
    let out = SensorGraph {
        strategy: GraphStrategy::MeasuredOnly,
        nodes,
        edges,
    };
    if let Some(idx) = out.is_connected() {
        return Err(GraphError::Disconnected(out.nodes[idx].bus.clone()));
    }
    Ok(out)
}

/// Full-topology graph: one node per bus, one edge per closed segment,
/// observed flags from the placement. Unobserved nodes carry zero
/// features downstream and are masked from loss and voting.
pub fn build_full_topology(
    topology: &FeederTopology,
    placement: &SensorPlacement,
) -> Result<SensorGraph, GraphError> {
    placement.validate(topology)?;
    let diags = topology.validate();
    if diags.has_errors() {
        return Err(GraphError::InvalidTopology(
            diags
                .items
                .iter()
                .map(|d| d.message.clone())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }

    let sensor_of_bus: HashMap<&str, usize> = placement
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.bus.as_str(), i))
        .collect();

    let nodes: Vec<GraphNode> = topology
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let sensor_index = sensor_of_bus.get(b.id.as_str()).copied();
            let phase_class = match b.phases.len() {
                3 => PhaseClass::ThreePhase,
                2 => PhaseClass::TwoPhase,
                _ => PhaseClass::SinglePhase,
            };
            GraphNode {
                index: i,
                bus: b.id.clone(),
                phase_class,
                observed: sensor_index.is_some(),
                sensor_index,
            }
        })
        .collect();

    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (i, seg) in topology.segments.iter().enumerate() {
        if topology.is_segment_closed(i) {
            let e = (seg.from.min(seg.to), seg.from.max(seg.to));
            if !edges.contains(&e) {
                edges.push(e);
            }
        }
    }
    edges.sort_unstable();

    let out = SensorGraph {
        strategy: GraphStrategy::FullTopology,
        nodes,
        edges,
    };
    if let Some(idx) = out.is_connected() {
        return Err(GraphError::Disconnected(out.nodes[idx].bus.clone()));
    }
    Ok(out)
}
