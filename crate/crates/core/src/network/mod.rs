//! The desk-scale query-based detector: learnable queries with anchor boxes,
//! a stack of decoder stages with iterative box refinement, and
//! classification/box heads.
//!
//! Each stage maps `(queries, anchors, features)` to refined queries plus one
//! box and one class-score vector per query:
//!
//! 1. positional embedding of the anchor box (two-layer MLP),
//! 2. single-head self-attention among queries,
//! 3. dense softmax cross-attention to every feature cell, with a locality
//!    bias that decays with the distance between anchor and cell center,
//! 4. feed-forward block, each sub-block followed by a residual and
//!    layer normalization,
//! 5. heads: class logits, and box deltas applied to the anchor in
//!    inverse-sigmoid space.
//!
//! Refined boxes become the next stage's anchors and are detached.

pub mod checkpoint;
pub mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::sigmoid;
use tape::{BindingId, Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    pub num_stages: usize,
    pub num_classes: usize,
    pub grid_size: usize,
    pub share_decoder: bool,
    /// Strength of the anchor/cell locality bias in cross-attention.
    pub locality_beta: f64,
    /// Side length of the initial anchor boxes.
    pub init_anchor_size: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            ffn_dim: 64,
            num_queries: 24,
            num_stages: 3,
            num_classes: 5,
            grid_size: 8,
            share_decoder: false,
            locality_beta: 1.0,
            init_anchor_size: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_stages == 0 {
            return bad("model.num_stages must be >= 1");
        }
        if self.grid_size < 2 {
            return bad("model.grid_size must be >= 2");
        }
        if self.d_model == 0 || self.ffn_dim == 0 || self.num_queries == 0 || self.num_classes == 0 {
            return bad("model dimensions must be positive");
        }
        Ok(())
    }

    pub fn cell_centers(&self) -> Vec<(f64, f64)> {
        let g = self.grid_size;
        (0..g * g)
            .map(|k| {
                let (row, col) = (k / g, k % g);
                ((col as f64 + 0.5) / g as f64, (row as f64 + 0.5) / g as f64)
            })
            .collect()
    }
}

/// One query's decoded box and per-class sigmoid scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub bbox: BBox,
    pub scores: Vec<f64>,
}

/// Query embeddings together with their anchors (stored as logits so that
/// `sigmoid(logit + delta)` refinement is exact).
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub embeddings: Tensor,
    pub anchor_logits: Tensor,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.embeddings.rows
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows == 0
    }

    pub fn from_boxes(embeddings: Tensor, anchors: &[BBox]) -> Self {
        let data = anchors.iter().flat_map(|b| b.to_array()).map(inverse_sigmoid).collect();
        Self { anchor_logits: Tensor::new(anchors.len(), 4, data), embeddings }
    }

    pub fn anchors(&self) -> Vec<BBox> {
        (0..self.anchor_logits.rows)
            .map(|i| {
                let r = self.anchor_logits.row(i);
                BBox::new(sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3]))
            })
            .collect()
    }

    /// Keeps the listed rows, in order (repeats allowed).
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
            Tensor::new(rows.len(), t.cols, data)
        };
        Self { embeddings: pick(&self.embeddings), anchor_logits: pick(&self.anchor_logits) }
    }
}

pub fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(1e-6, 1.0 - 1e-6);
    (x / (1.0 - x)).ln()
}

/// `G x G` grid of `d_model`-dimensional cell features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub size: usize,
    pub cells: Tensor,
}

impl FeatureGrid {
    pub fn dim(&self) -> usize {
        self.cells.cols
    }
}

/// Value-level output of one decoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    /// Refined queries, with the predicted boxes as their anchors.
    pub queries: QuerySet,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices into the layout for one decoder stage's tensors.
#[derive(Clone, Copy, Debug)]
struct StageSlots {
    sa_wq: usize,
    sa_wk: usize,
    sa_wv: usize,
    sa_wo: usize,
    ln1_g: usize,
    ln1_b: usize,
    ca_wq: usize,
    ca_wk: usize,
    ca_wv: usize,
    ca_pk: usize,
    ca_pv: usize,
    ca_wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    ln3_g: usize,
    ln3_b: usize,
    cls_w: usize,
    cls_b: usize,
    box_w1: usize,
    box_b1: usize,
    box_w2: usize,
    box_b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct GlobalSlots {
    query_embed: usize,
    query_anchor: usize,
    pos_w1: usize,
    pos_b1: usize,
    pos_w2: usize,
    pos_b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    global: GlobalSlots,
    /// One entry per stage; aliased when the decoder is shared.
    stages: Vec<StageSlots>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut total = 0;
        let mut add = |name: String, rows: usize, cols: usize| {
            specs.push(ParamSpec { name, rows, cols, offset: total });
            total += rows * cols;
            specs.len() - 1
        };
        let (d, f, c, n) = (cfg.d_model, cfg.ffn_dim, cfg.num_classes, cfg.num_queries);
        let global = GlobalSlots {
            query_embed: add("query.embed".into(), n, d),
            query_anchor: add("query.anchor_logit".into(), n, 4),
            pos_w1: add("pos.w1".into(), 4, d),
            pos_b1: add("pos.b1".into(), 1, d),
            pos_w2: add("pos.w2".into(), d, d),
            pos_b2: add("pos.b2".into(), 1, d),
        };
        let distinct = if cfg.share_decoder { 1 } else { cfg.num_stages };
        let mut blocks = Vec::new();
        for s in 0..distinct {
            let p = if cfg.share_decoder { "shared".to_string() } else { format!("stage{s}") };
            let mut a = |suffix: &str, rows, cols| add(format!("{p}.{suffix}"), rows, cols);
            blocks.push(StageSlots {
                sa_wq: a("sa.wq", d, d),
                sa_wk: a("sa.wk", d, d),
                sa_wv: a("sa.wv", d, d),
                sa_wo: a("sa.wo", d, d),
                ln1_g: a("ln1.g", 1, d),
                ln1_b: a("ln1.b", 1, d),
                ca_wq: a("ca.wq", d, d),
                ca_wk: a("ca.wk", d, d),
                ca_wv: a("ca.wv", d, d),
                ca_pk: a("ca.pk", 2, d),
                ca_pv: a("ca.pv", 2, d),
                ca_wo: a("ca.wo", d, d),
                ln2_g: a("ln2.g", 1, d),
                ln2_b: a("ln2.b", 1, d),
                ffn_w1: a("ffn.w1", d, f),
                ffn_b1: a("ffn.b1", 1, f),
                ffn_w2: a("ffn.w2", f, d),
                ffn_b2: a("ffn.b2", 1, d),
                ln3_g: a("ln3.g", 1, d),
                ln3_b: a("ln3.b", 1, d),
                cls_w: a("head.cls_w", d, c),
                cls_b: a("head.cls_b", 1, c),
                box_w1: a("head.box_w1", d, d),
                box_b1: a("head.box_b1", 1, d),
                box_w2: a("head.box_w2", d, 4),
                box_b2: a("head.box_b2", 1, 4),
            });
        }
        let stages = (0..cfg.num_stages)
            .map(|s| blocks[if cfg.share_decoder { 0 } else { s }])
            .collect();
        Self { specs, global, stages, total }
    }
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// All trainable values of one model, flat in declaration order.
///
/// Every instance (including clones) carries a distinct identity, so a graph
/// can assert which parameter set receives gradients.
#[derive(Debug)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    values: Vec<f64>,
    uid: u64,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.clone(),
            uid: fresh_uid(),
        }
    }
}

/// Prior probability used to initialise the class bias.
const CLS_PRIOR: f64 = 0.01;

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let layout = Layout::new(config);
        let values = vec![0.0; layout.total];
        Self { config: config.clone(), layout, values, uid: fresh_uid() }
    }

    /// Seeded initialisation: weights uniform in `+-1/sqrt(fan_in)`, layer-norm
    /// gains one, biases zero, class bias at a low prior, zero box-delta
    /// output layer, anchors on a uniform grid.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = p.layout.specs.clone();
        for spec in &specs {
            let name = spec.name.as_str();
            let slice = &mut p.values[spec.offset..spec.offset + spec.len()];
            if name == "query.anchor_logit" {
                continue;
            } else if name == "query.embed" {
                slice.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            } else if name.ends_with(".g") {
                slice.iter_mut().for_each(|x| *x = 1.0);
            } else if name.ends_with("head.cls_b") {
                let b = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
                slice.iter_mut().for_each(|x| *x = b);
            } else if name.ends_with("head.box_w2") || spec.rows == 1 {
                // zero box-delta layer and biases
            } else {
                let bound = 1.0 / (spec.rows as f64).sqrt();
                slice.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
            }
        }
        let n = config.num_queries;
        let k = (n as f64).sqrt().ceil() as usize;
        let anchor = p.layout.specs[p.layout.global.query_anchor].clone();
        let size = inverse_sigmoid(config.init_anchor_size);
        for q in 0..n {
            let (row, col) = (q / k, q % k);
            let rows = n.div_ceil(k);
            let cx = (col as f64 + 0.5) / k as f64;
            let cy = (row as f64 + 0.5) / rows as f64;
            let o = anchor.offset + q * 4;
            p.values[o..o + 4].copy_from_slice(&[inverse_sigmoid(cx), inverse_sigmoid(cy), size, size]);
        }
        p
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn binding(&self) -> BindingId {
        BindingId(self.uid)
    }

    /// True when both parameter sets have the same layout.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.layout.specs == other.layout.specs
    }

    /// Parameters belonging to the decoder stages (heads included).
    pub fn decoder_param_count(&self) -> usize {
        self.layout
            .specs
            .iter()
            .filter(|s| !s.name.starts_with("query.") && !s.name.starts_with("pos."))
            .map(|s| s.len())
            .sum()
    }

    /// Parameters of a single stage block.
    pub fn stage_param_count(&self) -> usize {
        self.layout.specs.iter().filter(|s| s.name.starts_with("stage0.") || s.name.starts_with("shared.")).map(|s| s.len()).sum()
    }

    fn tensor(&self, slot: usize) -> Tensor {
        let s = &self.layout.specs[slot];
        Tensor::new(s.rows, s.cols, self.values[s.offset..s.offset + s.len()].to_vec())
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<Tensor> {
        self.layout.specs.iter().position(|s| s.name == name).map(|k| self.tensor(k))
    }

    pub fn set_tensor_by_name(&mut self, name: &str, t: &Tensor) -> bool {
        match self.layout.specs.iter().find(|s| s.name == name) {
            Some(s) if s.len() == t.data.len() => {
                self.values[s.offset..s.offset + s.len()].copy_from_slice(&t.data);
                true
            }
            _ => false,
        }
    }

    /// The model's own learnable initial queries.
    pub fn initial_queries(&self) -> QuerySet {
        QuerySet {
            embeddings: self.tensor(self.layout.global.query_embed),
            anchor_logits: self.tensor(self.layout.global.query_anchor),
        }
    }
}

/// Whether parameter leaves receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

#[derive(Clone, Copy, Debug)]
struct StageNodesParams {
    sa_wq: NodeId,
    sa_wk: NodeId,
    sa_wv: NodeId,
    sa_wo: NodeId,
    ln1_g: NodeId,
    ln1_b: NodeId,
    ca_wq: NodeId,
    ca_wo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
    ln3_g: NodeId,
    ln3_b: NodeId,
    cls_w: NodeId,
    cls_b: NodeId,
    box_w1: NodeId,
    box_b1: NodeId,
    box_w2: NodeId,
    box_b2: NodeId,
    /// Projected feature keys and values for this stage.
    keys: NodeId,
    vals: NodeId,
}

/// Graph nodes for one stage of one query group.
#[derive(Clone, Copy, Debug)]
pub struct StageNodes {
    pub queries: NodeId,
    pub anchor_logits: NodeId,
    pub boxes: NodeId,
    pub logits: NodeId,
}

/// A model's parameters and feature projections materialised in a graph.
/// Several query groups can be decoded against the same context.
pub struct DecoderContext {
    config: ModelConfig,
    stages: Vec<StageNodesParams>,
    pos_w1: NodeId,
    pos_b1: NodeId,
    pos_w2: NodeId,
    pos_b2: NodeId,
    query_embed: NodeId,
    query_anchor: NodeId,
    cells: Vec<(f64, f64)>,
}

impl DecoderContext {
    pub fn new(graph: &mut Graph, params: &ModelParams, mode: ParamMode, features: &FeatureGrid) -> Self {
        let cfg = params.config.clone();
        assert_eq!(features.dim(), cfg.d_model, "feature dim must equal d_model");
        assert_eq!(features.size, cfg.grid_size, "feature grid size");
        if mode == ParamMode::Trainable {
            graph.bind(params.binding(), params.len());
        }
        let mut slot_nodes: Vec<Option<NodeId>> = vec![None; params.layout.specs.len()];
        let mut leaf = |graph: &mut Graph, slot: usize| -> NodeId {
            if let Some(id) = slot_nodes[slot] {
                return id;
            }
            let t = params.tensor(slot);
            let id = match mode {
                ParamMode::Trainable => graph.param(params.binding(), params.layout.specs[slot].offset, t),
                ParamMode::Frozen => graph.constant(t),
            };
            slot_nodes[slot] = Some(id);
            id
        };
        let g = params.layout.global;
        let pos_w1 = leaf(graph, g.pos_w1);
        let pos_b1 = leaf(graph, g.pos_b1);
        let pos_w2 = leaf(graph, g.pos_w2);
        let pos_b2 = leaf(graph, g.pos_b2);
        let query_embed = leaf(graph, g.query_embed);
        let query_anchor = leaf(graph, g.query_anchor);
        let feat = graph.constant(features.cells.clone());
        let centers = cfg.cell_centers();
        let cell_pos = graph.constant(Tensor::new(
            centers.len(),
            2,
            centers.iter().flat_map(|&(u, v)| [4.0 * (u - 0.5), 4.0 * (v - 0.5)]).collect(),
        ));
        let mut stages: Vec<StageNodesParams> = Vec::new();
        for (s, slots) in params.layout.stages.iter().enumerate() {
            if cfg.share_decoder && s > 0 {
                stages.push(stages[0]);
                continue;
            }
            let ca_wk = leaf(graph, slots.ca_wk);
            let ca_wv = leaf(graph, slots.ca_wv);
            // cell positions enter keys and values so that a read carries
            // where it came from
            let ca_pk = leaf(graph, slots.ca_pk);
            let ca_pv = leaf(graph, slots.ca_pv);
            let keys = graph.matmul(feat, ca_wk);
            let pk = graph.matmul(cell_pos, ca_pk);
            let keys = graph.add(keys, pk);
            let vals = graph.matmul(feat, ca_wv);
            let pv = graph.matmul(cell_pos, ca_pv);
            let vals = graph.add(vals, pv);
            stages.push(StageNodesParams {
                sa_wq: leaf(graph, slots.sa_wq),
                sa_wk: leaf(graph, slots.sa_wk),
                sa_wv: leaf(graph, slots.sa_wv),
                sa_wo: leaf(graph, slots.sa_wo),
                ln1_g: leaf(graph, slots.ln1_g),
                ln1_b: leaf(graph, slots.ln1_b),
                ca_wq: leaf(graph, slots.ca_wq),
                ca_wo: leaf(graph, slots.ca_wo),
                ln2_g: leaf(graph, slots.ln2_g),
                ln2_b: leaf(graph, slots.ln2_b),
                ffn_w1: leaf(graph, slots.ffn_w1),
                ffn_b1: leaf(graph, slots.ffn_b1),
                ffn_w2: leaf(graph, slots.ffn_w2),
                ffn_b2: leaf(graph, slots.ffn_b2),
                ln3_g: leaf(graph, slots.ln3_g),
                ln3_b: leaf(graph, slots.ln3_b),
                cls_w: leaf(graph, slots.cls_w),
                cls_b: leaf(graph, slots.cls_b),
                box_w1: leaf(graph, slots.box_w1),
                box_b1: leaf(graph, slots.box_b1),
                box_w2: leaf(graph, slots.box_w2),
                box_b2: leaf(graph, slots.box_b2),
                keys,
                vals,
            });
        }
        Self {
            cells: centers,
            config: cfg,
            stages,
            pos_w1,
            pos_b1,
            pos_w2,
            pos_b2,
            query_embed,
            query_anchor,
        }
    }

    /// Nodes of the model's own initial queries `(embeddings, anchor logits)`.
    pub fn own_queries(&self) -> (NodeId, NodeId) {
        (self.query_embed, self.query_anchor)
    }

    /// Decodes an external query set (treated as constant).
    pub fn run_constant(&self, graph: &mut Graph, queries: &QuerySet) -> Result<Vec<StageNodes>> {
        let e = graph.constant(queries.embeddings.clone());
        let a = graph.constant(queries.anchor_logits.clone());
        self.run(graph, e, a)
    }

    /// Decodes the model's own queries.
    pub fn run_own(&self, graph: &mut Graph) -> Result<Vec<StageNodes>> {
        self.run(graph, self.query_embed, self.query_anchor)
    }

    pub fn run(&self, graph: &mut Graph, embeddings: NodeId, anchor_logits: NodeId) -> Result<Vec<StageNodes>> {
        self.run_pinned(graph, embeddings, anchor_logits, &[])
    }

    /// Like [`run`](Self::run), but stage `s + 1` reads its anchor logits from
    /// `pinned[s]` when present instead of the refined boxes of stage `s`.
    /// Since the refinement is detached anyway, pinning the values recorded
    /// at some parameter point leaves gradients there unchanged; finite
    /// differences around that point then see the same detached function.
    pub fn run_pinned(&self, graph: &mut Graph, embeddings: NodeId, anchor_logits: NodeId, pinned: &[Tensor]) -> Result<Vec<StageNodes>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let (mut q, mut a) = (embeddings, anchor_logits);
        for s in 0..self.stages.len() {
            let nodes = self.stage(graph, s, q, a)?;
            out.push(nodes);
            q = nodes.queries;
            a = match pinned.get(s) {
                Some(t) => graph.constant(t.clone()),
                None => {
                    let boxes = graph.value(nodes.boxes);
                    let next = Tensor::new(boxes.rows, 4, boxes.data.iter().map(|&x| inverse_sigmoid(x)).collect());
                    graph.constant(next)
                }
            };
        }
        Ok(out)
    }

    fn stage(&self, g: &mut Graph, s: usize, q: NodeId, anchor_logits: NodeId) -> Result<StageNodes> {
        let p = self.stages[s];
        let inv_sqrt_d = 1.0 / (self.config.d_model as f64).sqrt();
        let anchors = g.sigmoid(anchor_logits);

        let h = g.matmul(anchors, self.pos_w1);
        let h = g.add_row(h, self.pos_b1);
        let h = g.relu(h);
        let h = g.matmul(h, self.pos_w2);
        let pos = g.add_row(h, self.pos_b2);

        // self-attention
        let x = g.add(q, pos);
        let sq = g.matmul(x, p.sa_wq);
        let sk = g.matmul(x, p.sa_wk);
        let sv = g.matmul(q, p.sa_wv);
        let logits = g.matmul_bt(sq, sk);
        let logits = g.scale(logits, inv_sqrt_d);
        let attn = g.softmax_rows(logits);
        let mixed = g.matmul(attn, sv);
        let mixed = g.matmul(mixed, p.sa_wo);
        let q1 = g.add(q, mixed);
        let q1 = self.norm(g, q1, p.ln1_g, p.ln1_b);

        // cross-attention
        let xq = g.add(q1, pos);
        let cq = g.matmul(xq, p.ca_wq);
        let scores = g.matmul_bt(cq, p.keys);
        let scores = g.scale(scores, inv_sqrt_d);
        let bias = g.anchor_bias(anchors, &self.cells, self.config.locality_beta, 1.0 / self.config.grid_size as f64);
        let scores = g.add(scores, bias);
        let attn = g.softmax_rows(scores);
        let read = g.matmul(attn, p.vals);
        let read = g.matmul(read, p.ca_wo);
        let q2 = g.add(q1, read);
        let q2 = self.norm(g, q2, p.ln2_g, p.ln2_b);

        // feed-forward
        let f = g.matmul(q2, p.ffn_w1);
        let f = g.add_row(f, p.ffn_b1);
        let f = g.relu(f);
        let f = g.matmul(f, p.ffn_w2);
        let f = g.add_row(f, p.ffn_b2);
        let q3 = g.add(q2, f);
        let q3 = self.norm(g, q3, p.ln3_g, p.ln3_b);

        // heads
        let cls = g.matmul(q3, p.cls_w);
        let cls = g.add_row(cls, p.cls_b);
        let hq = g.add(q3, pos);
        let bx = g.matmul(hq, p.box_w1);
        let bx = g.add_row(bx, p.box_b1);
        let bx = g.relu(bx);
        let bx = g.matmul(bx, p.box_w2);
        let delta = g.add_row(bx, p.box_b2);
        let refined = g.add(anchor_logits, delta);
        let boxes = g.sigmoid(refined);

        for node in [boxes, cls] {
            let v = g.value(node);
            if !v.is_finite() {
                let bad = v.data.iter().position(|x| !x.is_finite()).unwrap_or(0);
                return Err(Error::NonFiniteActivation { stage: s, query: bad / v.cols });
            }
        }
        Ok(StageNodes { queries: q3, anchor_logits, boxes, logits: cls })
    }

    fn norm(&self, g: &mut Graph, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let n = g.layer_norm(x);
        let n = g.mul_row(n, gain);
        g.add_row(n, bias)
    }
}

/// Reads predictions out of a stage's graph nodes.
pub fn stage_predictions(graph: &Graph, nodes: &StageNodes) -> Vec<Prediction> {
    let boxes = graph.value(nodes.boxes);
    let logits = graph.value(nodes.logits);
    (0..boxes.rows)
        .map(|i| {
            let b = boxes.row(i);
            Prediction {
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
                scores: logits.row(i).iter().map(|&x| sigmoid(x)).collect(),
            }
        })
        .collect()
}

/// Value-level output of a stage (refined queries carry the predicted boxes).
pub fn stage_output(graph: &Graph, nodes: &StageNodes) -> StageOutput {
    let boxes = graph.value(nodes.boxes);
    let logits = boxes.data.iter().map(|&x| inverse_sigmoid(x)).collect();
    StageOutput {
        queries: QuerySet {
            embeddings: graph.value(nodes.queries).clone(),
            anchor_logits: Tensor::new(boxes.rows, 4, logits),
        },
        predictions: stage_predictions(graph, nodes),
    }
}

/// Inference forward of the model's own queries; no gradients are recorded
/// against `params`.
pub fn forward(params: &ModelParams, features: &FeatureGrid) -> Result<Vec<StageOutput>> {
    let mut g = Graph::new();
    let ctx = DecoderContext::new(&mut g, params, ParamMode::Frozen, features);
    let nodes = ctx.run_own(&mut g)?;
    Ok(nodes.iter().map(|n| stage_output(&g, n)).collect())
}

/// Inference forward of an arbitrary query set through `params`.
pub fn forward_queries(params: &ModelParams, queries: &QuerySet, features: &FeatureGrid) -> Result<Vec<StageOutput>> {
    let mut g = Graph::new();
    let ctx = DecoderContext::new(&mut g, params, ParamMode::Frozen, features);
    let nodes = ctx.run_constant(&mut g, queries)?;
    Ok(nodes.iter().map(|n| stage_output(&g, n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            ffn_dim: 12,
            num_queries: 5,
            num_stages: 2,
            num_classes: 3,
            grid_size: 3,
            ..ModelConfig::default()
        }
    }

    fn features(cfg: &ModelConfig, seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.grid_size * cfg.grid_size;
        FeatureGrid {
            size: cfg.grid_size,
            cells: Tensor::new(n, cfg.d_model, (0..n * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        }
    }

    /// Random non-degenerate parameters (the default init zeroes the box layer).
    fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in p.values_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        p
    }

    #[test]
    fn shape_contract() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 1);
        let out = forward(&p, &features(&cfg, 2)).unwrap();
        assert_eq!(out.len(), cfg.num_stages);
        for s in &out {
            assert_eq!(s.predictions.len(), cfg.num_queries);
            for pr in &s.predictions {
                assert_eq!(pr.scores.len(), cfg.num_classes);
                assert!(pr.scores.iter().all(|&x| x > 0.0 && x < 1.0));
                for v in pr.bbox.to_array() {
                    assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_delta_head_returns_anchors() {
        let cfg = small_config();
        let mut p = random_params(&cfg, 3);
        for s in 0..cfg.num_stages {
            for name in ["head.box_w2", "head.box_b2"] {
                let full = format!("stage{s}.{name}");
                let t = p.tensor_by_name(&full).unwrap();
                assert!(p.set_tensor_by_name(&full, &Tensor::zeros(t.rows, t.cols)));
            }
        }
        let f = features(&cfg, 4);
        let out = forward(&p, &f).unwrap();
        let anchors = p.initial_queries().anchors();
        for (pr, a) in out[0].predictions.iter().zip(&anchors) {
            for (x, y) in pr.bbox.to_array().iter().zip(a.to_array()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // later stages keep the same boxes
        for (pr, a) in out[1].predictions.iter().zip(&anchors) {
            assert!((pr.bbox.cx - a.cx).abs() < 1e-9);
        }
    }

    #[test]
    fn single_stage_forward_is_one_decode_stage() {
        let mut cfg = small_config();
        cfg.num_stages = 1;
        let p = random_params(&cfg, 5);
        let f = features(&cfg, 6);
        let full = forward(&p, &f).unwrap();
        assert_eq!(full.len(), 1);
        let via_queries = forward_queries(&p, &p.initial_queries(), &f).unwrap();
        assert_eq!(full, via_queries);
    }

    #[test]
    fn shared_decoder_has_one_stage_of_parameters() {
        let mut cfg = small_config();
        cfg.num_stages = 3;
        let unshared = ModelParams::init(&cfg, 0);
        cfg.share_decoder = true;
        let shared = ModelParams::init(&cfg, 0);
        assert_eq!(shared.decoder_param_count(), shared.stage_param_count());
        assert_eq!(unshared.decoder_param_count(), 3 * unshared.stage_param_count());
        assert_eq!(shared.stage_param_count(), unshared.stage_param_count());
    }

    /// Gradient of `sum(w_box * boxes) + sum(w_cls * logits)` over all stages.
    fn weighted_output(p: &ModelParams, f: &FeatureGrid, seed: u64, pinned: &[Tensor]) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let ctx = DecoderContext::new(&mut g, p, ParamMode::Trainable, f);
        let (e, a) = ctx.own_queries();
        let stages = ctx.run_pinned(&mut g, e, a, pinned).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seeds = Vec::new();
        let mut total = 0.0;
        for s in &stages {
            for node in [s.boxes, s.logits] {
                let v = g.value(node);
                let w = Tensor::new(v.rows, v.cols, (0..v.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
                total += v.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>();
                seeds.push((node, w));
            }
        }
        let grads = g.backward(&seeds).unwrap();
        (total, grads.values)
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for share in [false, true] {
            let mut cfg = small_config();
            cfg.share_decoder = share;
            let p = random_params(&cfg, 8);
            let f = features(&cfg, 9);
            let pinned: Vec<Tensor> = forward(&p, &f).unwrap().into_iter().map(|o| o.queries.anchor_logits).collect();
            let (_, grad) = weighted_output(&p, &f, 10, &[]);
            assert_eq!(grad, weighted_output(&p, &f, 10, &pinned).1);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let h = 1e-6;
            for _ in 0..60 {
                let k = rng.gen_range(0..p.len());
                let mut plus = p.clone();
                plus.values_mut()[k] += h;
                let mut minus = p.clone();
                minus.values_mut()[k] -= h;
                let num = (weighted_output(&plus, &f, 10, &pinned).0 - weighted_output(&minus, &f, 10, &pinned).0) / (2.0 * h);
                let denom = grad[k].abs().max(num.abs()).max(1e-6);
                assert!((grad[k] - num).abs() / denom < 1e-3, "param {k}: {} vs {num}", grad[k]);
            }
        }
    }

    #[test]
    fn frozen_context_has_no_trainable_leaves() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg, 1);
        let mut g = Graph::new();
        let ctx = DecoderContext::new(&mut g, &p, ParamMode::Frozen, &features(&cfg, 1));
        ctx.run_own(&mut g).unwrap();
        assert_eq!(g.trainable_leaf_count(), 0);
        assert_eq!(g.binding(), None);
    }

    #[test]
    fn clones_have_distinct_identity() {
        let p = ModelParams::init(&small_config(), 1);
        let q = p.clone();
        assert_ne!(p.binding(), q.binding());
        assert_eq!(p.values(), q.values());
    }

    #[test]
    fn non_finite_activations_are_reported() {
        let cfg = small_config();
        let mut p = ModelParams::init(&cfg, 1);
        let t = p.tensor_by_name("stage0.head.cls_b").unwrap();
        let mut bad = t.clone();
        bad.data[0] = f64::NAN;
        p.set_tensor_by_name("stage0.head.cls_b", &bad);
        let err = forward(&p, &features(&cfg, 1)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation { stage: 0, .. }));
    }
}
