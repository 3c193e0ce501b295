//! Spatial message-passing layers: GCN over the degree-normalized
//! adjacency, GraphSAGE with mean or max aggregation (self included, no
//! subsampling), and multi-head GATv2 attention with the nonlinearity
//! applied before the attention vector.
//!
//! Layer forwards return pre-activation outputs; the model assembly
//! applies batch norm, ReLU and dropout between layers. The free
//! functions at the bottom expose the single-graph activated form.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::graph::{normalized_adjacency, SensorGraph};
use crate::nn::init;
use crate::nn::layers::dropout;
use crate::nn::tape::{Tape, Var};
use crate::nn::{real, Mode, Real};

/// Per-graph constants shared by every layer forward: the normalized
/// adjacency, the row-normalized mean-aggregation matrix, and neighbor
/// lists with the node itself first.
pub struct GraphOps<T: Real> {
    pub node_count: usize,
    pub norm_adj: Rc<Array2<T>>,
    pub mean_mat: Rc<Array2<T>>,
    pub neighbor_lists: Vec<Vec<usize>>,
}

impl<T: Real> GraphOps<T> {
    pub fn new(graph: &SensorGraph) -> Self {
        let n = graph.node_count();
        let norm = normalized_adjacency(graph).matrix;
        let norm_adj = Rc::new(norm.mapv(|v| real::<T>(v)));

        let lists: Vec<Vec<usize>> = (0..n)
            .map(|v| graph.neighbor_set(v).expect("valid node"))
            .collect();
        let mut mean = Array2::zeros((n, n));
        for (v, list) in lists.iter().enumerate() {
            let w = real::<T>(1.0 / list.len() as f64);
            for &u in list {
                mean[[v, u]] = w;
            }
        }
        GraphOps {
            node_count: n,
            norm_adj,
            mean_mat: Rc::new(mean),
            neighbor_lists: lists,
        }
    }

    /// Neighbor lists replicated across `windows` row blocks.
    pub fn batched_lists(&self, windows: usize) -> Rc<Vec<Vec<usize>>> {
        let n = self.node_count;
        let mut out = Vec::with_capacity(windows * n);
        for b in 0..windows {
            let off = b * n;
            for list in &self.neighbor_lists {
                out.push(list.iter().map(|&u| u + off).collect());
            }
        }
        Rc::new(out)
    }

    /// Flattened (center, neighbor) edge arrays for attention, grouped by
    /// center node with contiguous segments, replicated per window block.
    pub fn batched_edges(&self, windows: usize) -> EdgeBatch {
        let n = self.node_count;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut segments = Vec::new();
        for b in 0..windows {
            let off = b * n;
            for (v, list) in self.neighbor_lists.iter().enumerate() {
                let start = src.len() as u32;
                for &u in list {
                    src.push(v + off);
                    dst.push(u + off);
                }
                segments.push((start, src.len() as u32));
            }
        }
        EdgeBatch {
            src: Rc::new(src),
            dst: Rc::new(dst),
            segments: Rc::new(segments),
        }
    }
}

pub struct EdgeBatch {
    /// Center node row per edge (aggregation target).
    pub src: Rc<Vec<usize>>,
    /// Neighbor row per edge (message source).
    pub dst: Rc<Vec<usize>>,
    /// Contiguous per-center edge ranges.
    pub segments: Rc<Vec<(u32, u32)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    Mean,
    Max,
}

#[derive(Debug, Clone)]
pub struct GcnLayer<T: Real> {
    pub w: Array2<T>,
}

impl<T: Real> GcnLayer<T> {
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        GcnLayer {
            w: init::glorot_uniform(d_in, d_out, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SageLayer<T: Real> {
    /// Applied to the concatenation [h_v || AGG(neighbors)].
    pub w: Array2<T>,
    pub aggregator: Aggregator,
}

impl<T: Real> SageLayer<T> {
    pub fn init<R: Rng>(d_in: usize, d_out: usize, aggregator: Aggregator, rng: &mut R) -> Self {
        SageLayer {
            w: init::glorot_uniform(2 * d_in, d_out, rng),
            aggregator,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gatv2Head<T: Real> {
    /// Center-side transform in the attention score.
    pub w1: Array2<T>,
    /// Neighbor-side transform, shared between scoring and values.
    pub w2: Array2<T>,
    /// Attention vector, d_head x 1.
    pub a: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct Gatv2Layer<T: Real> {
    pub heads: Vec<Gatv2Head<T>>,
    pub attn_dropout: f64,
    pub leaky_slope: f64,
}

impl<T: Real> Gatv2Layer<T> {
    pub fn init<R: Rng>(
        d_in: usize,
        d_out: usize,
        heads: usize,
        attn_dropout: f64,
        rng: &mut R,
    ) -> Self {
        assert!(d_out % heads == 0, "output dim must divide across heads");
        let d_head = d_out / heads;
        Gatv2Layer {
            heads: (0..heads)
                .map(|_| Gatv2Head {
                    w1: init::glorot_uniform(d_in, d_head, rng),
                    w2: init::glorot_uniform(d_in, d_head, rng),
                    a: init::glorot_uniform(d_head, 1, rng),
                })
                .collect(),
            attn_dropout,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub enum GnnLayer<T: Real> {
    Gcn(GcnLayer<T>),
    Sage(SageLayer<T>),
    Gatv2(Gatv2Layer<T>),
}

impl<T: Real> GnnLayer<T> {
    pub fn params(&self) -> Vec<&Array2<T>> {
        match self {
            GnnLayer::Gcn(l) => vec![&l.w],
            GnnLayer::Sage(l) => vec![&l.w],
            GnnLayer::Gatv2(l) => l
                .heads
                .iter()
                .flat_map(|h| vec![&h.w1, &h.w2, &h.a])
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        match self {
            GnnLayer::Gcn(l) => vec![&mut l.w],
            GnnLayer::Sage(l) => vec![&mut l.w],
            GnnLayer::Gatv2(l) => l
                .heads
                .iter_mut()
                .flat_map(|h| vec![&mut h.w1, &mut h.w2, &mut h.a])
                .collect(),
        }
    }

    pub fn stage(&self, tape: &mut Tape<T>) -> (Vec<Var>, Vec<Var>) {
        let vars: Vec<Var> = self.params().into_iter().map(|p| tape.param(p)).collect();
        (vars.clone(), vars)
    }

    /// Pre-activation forward over `windows` stacked row blocks.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ops: &GraphOps<T>,
        windows: usize,
        h: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Var {
        match self {
            GnnLayer::Gcn(_) => {
                let mixed = tape.block_matmul(ops.norm_adj.clone(), h);
                tape.matmul(mixed, vars[0])
            }
            GnnLayer::Sage(l) => {
                let agg = match l.aggregator {
                    Aggregator::Mean => tape.block_matmul(ops.mean_mat.clone(), h),
                    Aggregator::Max => {
                        let lists = ops.batched_lists(windows);
                        tape.neighbor_max(h, lists)
                    }
                };
                let cat = tape.concat_cols(h, agg);
                tape.matmul(cat, vars[0])
            }
            GnnLayer::Gatv2(l) => {
                let edges = ops.batched_edges(windows);
                let rows = tape.value(h).nrows();
                let mut head_outs = Vec::with_capacity(l.heads.len());
                for (k, _) in l.heads.iter().enumerate() {
                    let w1 = vars[3 * k];
                    let w2 = vars[3 * k + 1];
                    let a = vars[3 * k + 2];
                    let center = tape.matmul(h, w1);
                    let neighbor = tape.matmul(h, w2);
                    let ce = tape.gather_rows(center, edges.src.clone());
                    let ne = tape.gather_rows(neighbor, edges.dst.clone());
                    let sum = tape.add(ce, ne);
                    let act = tape.leaky_relu(sum, real(l.leaky_slope));
                    let scores = tape.matmul(act, a);
                    let alpha = tape.segment_softmax(scores, edges.segments.clone());
                    let alpha = dropout(tape, alpha, l.attn_dropout, mode, rng);
                    let messages = tape.mul_col_vec(alpha, ne);
                    head_outs.push(tape.scatter_add_rows(messages, edges.src.clone(), rows));
                }
                let mut out = head_outs[0];
                for &ho in &head_outs[1..] {
                    out = tape.concat_cols(out, ho);
                }
                out
            }
        }
    }
}

/// ReLU(normalized adjacency * H * W) on a single graph.
pub fn gcn_layer<T: Real>(
    h: &Array2<T>,
    graph: &SensorGraph,
    params: &GcnLayer<T>,
) -> Array2<T> {
    let ops = GraphOps::new(graph);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    apply_single(&GnnLayer::Gcn(params.clone()), h, &ops, &mut rng)
}

/// ReLU(W [h_v || AGG(N(v))]) with the node included in its neighborhood.
pub fn sage_layer<T: Real>(
    h: &Array2<T>,
    graph: &SensorGraph,
    params: &SageLayer<T>,
) -> Array2<T> {
    let ops = GraphOps::new(graph);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    apply_single(&GnnLayer::Sage(params.clone()), h, &ops, &mut rng)
}

/// Multi-head GATv2 with softmax-normalized attention; eval mode (no
/// attention dropout).
pub fn gatv2_layer<T: Real>(
    h: &Array2<T>,
    graph: &SensorGraph,
    params: &Gatv2Layer<T>,
) -> Array2<T> {
    let ops = GraphOps::new(graph);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    apply_single(&GnnLayer::Gatv2(params.clone()), h, &ops, &mut rng)
}

fn apply_single<T: Real, R: Rng>(
    layer: &GnnLayer<T>,
    h: &Array2<T>,
    ops: &GraphOps<T>,
    rng: &mut R,
) -> Array2<T> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let (vars, _) = layer.stage(&mut tape);
    let pre = layer.forward(&mut tape, &vars, ops, 1, hv, Mode::Eval, rng);
    let out = tape.relu(pre);
    tape.value(out).clone()
}

/// Attention coefficients of one GATv2 head in eval mode, row v holding
/// alpha_vu over u in N(v) (zero elsewhere).
pub fn gatv2_attention<T: Real>(
    h: &Array2<T>,
    graph: &SensorGraph,
    head: &Gatv2Head<T>,
    leaky_slope: f64,
) -> Array2<T> {
    let ops = GraphOps::<T>::new(graph);
    let edges = ops.batched_edges(1);
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let w1 = tape.leaf(head.w1.clone());
    let w2 = tape.leaf(head.w2.clone());
    let a = tape.leaf(head.a.clone());
    let center = tape.matmul(hv, w1);
    let neighbor = tape.matmul(hv, w2);
    let ce = tape.gather_rows(center, edges.src.clone());
    let ne = tape.gather_rows(neighbor, edges.dst.clone());
    let sum = tape.add(ce, ne);
    let act = tape.leaky_relu(sum, real(leaky_slope));
    let scores = tape.matmul(act, a);
    let alpha = tape.segment_softmax(scores, edges.segments.clone());
    let av = tape.value(alpha);

    let n = graph.node_count();
    let mut out = Array2::zeros((n, n));
    for (e, (&v, &u)) in edges.src.iter().zip(edges.dst.iter()).enumerate() {
        out[[v, u]] = av[[e, 0]];
    }
    out
}
