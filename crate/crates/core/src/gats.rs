//! GAT-S: two edge-aware graph attention layers (with residual projection and
//! layer norm), self-attention pooling, and a sigmoid readout.
//!
//! Layer update for node `i`, summed over heads `k`:
//!
//! ```text
//! z_ij  = relu(a_src . W h_i + a_dst . W h_j + a_edge . W_e h_ij)
//! alpha = softmax of z_i. over the neighbors of i
//! h'_i  = relu(sum_k sum_j alpha_ij (W h_j + W_e h_ij))
//! out_i = LayerNorm(h'_i + R h_i + r)
//! ```
//!
//! Neighborhoods exclude `i` itself; self information reaches the output
//! through the residual projection `R`.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Matrix, Tape, Triples, Var};
use crate::dataset::{InstanceRecord, Standardizer, EDGE_FEATURES, NODE_FEATURES};
use crate::error::{Error, Result};
use crate::rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub node_feature_dim: usize,
    pub edge_feature_dim: usize,
    pub hidden_dim: usize,
    pub heads_layer1: usize,
    pub heads_layer2: usize,
    /// Query/key/value width of the pooling layer.
    pub attention_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_hidden(64)
    }
}

impl ModelConfig {
    pub fn with_hidden(hidden_dim: usize) -> Self {
        Self {
            node_feature_dim: NODE_FEATURES,
            edge_feature_dim: EDGE_FEATURES,
            hidden_dim,
            heads_layer1: 4,
            heads_layer2: 1,
            attention_dim: hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.node_feature_dim,
            self.edge_feature_dim,
            self.hidden_dim,
            self.heads_layer1,
            self.heads_layer2,
            self.attention_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `hidden x in`.
    pub w: Matrix,
    /// `hidden x edge_in`.
    pub w_edge: Matrix,
    /// The attention vector, split into its source, neighbor and edge thirds
    /// (`1 x hidden` each).
    pub a_src: Matrix,
    pub a_dst: Matrix,
    pub a_edge: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub heads: Vec<HeadParams>,
    /// `hidden x in`.
    pub residual_w: Matrix,
    /// `1 x hidden`.
    pub residual_b: Matrix,
    pub norm_gain: Matrix,
    pub norm_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingParams {
    /// `d x hidden` each.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutParams {
    /// `hidden x d`.
    pub w_out: Matrix,
    /// `1 x hidden`.
    pub b_out: Matrix,
    /// `1 x hidden`.
    pub w_fc: Matrix,
    /// `1 x 1`.
    pub b_fc: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layer1: GatLayerParams,
    pub layer2: GatLayerParams,
    pub pooling: PoolingParams,
    pub readout: ReadoutParams,
    pub standardizer: Standardizer,
}

fn xavier(rows: usize, cols: usize, r: &mut rng::Rng) -> Matrix {
    let bound = xavier_bound(rows, cols);
    Matrix { rows, cols, data: (0..rows * cols).map(|_| r.gen_range(-bound..=bound)).collect() }
}

/// `sqrt(6 / (fan_in + fan_out))` for a `rows x cols` (out x in) weight.
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    libm::sqrt(6.0 / (rows + cols) as f64)
}

fn init_layer(heads: usize, input: usize, edge_in: usize, hidden: usize, r: &mut rng::Rng) -> GatLayerParams {
    GatLayerParams {
        heads: (0..heads)
            .map(|_| HeadParams {
                w: xavier(hidden, input, r),
                w_edge: xavier(hidden, edge_in, r),
                a_src: xavier(1, hidden, r),
                a_dst: xavier(1, hidden, r),
                a_edge: xavier(1, hidden, r),
            })
            .collect(),
        residual_w: xavier(hidden, input, r),
        residual_b: Matrix::zeros(1, hidden),
        norm_gain: Matrix::filled(1, hidden, 1.0),
        norm_bias: Matrix::zeros(1, hidden),
    }
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut r = rng::seeded(seed);
    let h = config.hidden_dim;
    let d = config.attention_dim;
    let layer1 = init_layer(config.heads_layer1, config.node_feature_dim, config.edge_feature_dim, h, &mut r);
    let layer2 = init_layer(config.heads_layer2, h, config.edge_feature_dim, h, &mut r);
    let pooling = PoolingParams { w_q: xavier(d, h, &mut r), w_k: xavier(d, h, &mut r), w_v: xavier(d, h, &mut r) };
    let readout = ReadoutParams {
        w_out: xavier(h, d, &mut r),
        b_out: Matrix::zeros(1, h),
        w_fc: xavier(1, h, &mut r),
        b_fc: Matrix::zeros(1, 1),
    };
    Ok(ModelParams { config: *config, layer1, layer2, pooling, readout, standardizer: Standardizer::identity() })
}

impl GatLayerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        for (k, head) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{k}.w"), &head.w));
            out.push((format!("{prefix}.head{k}.w_edge"), &head.w_edge));
            out.push((format!("{prefix}.head{k}.a_src"), &head.a_src));
            out.push((format!("{prefix}.head{k}.a_dst"), &head.a_dst));
            out.push((format!("{prefix}.head{k}.a_edge"), &head.a_edge));
        }
        out.push((format!("{prefix}.residual_w"), &self.residual_w));
        out.push((format!("{prefix}.residual_b"), &self.residual_b));
        out.push((format!("{prefix}.norm_gain"), &self.norm_gain));
        out.push((format!("{prefix}.norm_bias"), &self.norm_bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        for head in &mut self.heads {
            out.push(&mut head.w);
            out.push(&mut head.w_edge);
            out.push(&mut head.a_src);
            out.push(&mut head.a_dst);
            out.push(&mut head.a_edge);
        }
        out.push(&mut self.residual_w);
        out.push(&mut self.residual_b);
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_bias);
    }
}

impl ModelParams {
    /// Every learnable tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.layer1.visit("layer1", &mut out);
        self.layer2.visit("layer2", &mut out);
        out.push(("pooling.w_q".into(), &self.pooling.w_q));
        out.push(("pooling.w_k".into(), &self.pooling.w_k));
        out.push(("pooling.w_v".into(), &self.pooling.w_v));
        out.push(("readout.w_out".into(), &self.readout.w_out));
        out.push(("readout.b_out".into(), &self.readout.b_out));
        out.push(("readout.w_fc".into(), &self.readout.w_fc));
        out.push(("readout.b_fc".into(), &self.readout.b_fc));
        out
    }

    /// Mutable tensors, same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        self.layer1.visit_mut(&mut out);
        self.layer2.visit_mut(&mut out);
        out.push(&mut self.pooling.w_q);
        out.push(&mut self.pooling.w_k);
        out.push(&mut self.pooling.w_v);
        out.push(&mut self.readout.w_out);
        out.push(&mut self.readout.b_out);
        out.push(&mut self.readout.w_fc);
        out.push(&mut self.readout.b_fc);
        out
    }

    pub fn to_flat(&self) -> Vec<Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m.clone()).collect()
    }

    pub fn set_flat(&mut self, flat: &[Matrix]) -> Result<()> {
        let slots = self.tensors_mut();
        if slots.len() != flat.len() {
            return Err(Error::ShapeMismatch(format!("{} tensors for a model with {}", flat.len(), slots.len())));
        }
        for (slot, m) in slots.iter().zip(flat) {
            if slot.shape() != m.shape() {
                return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", slot.shape(), m.shape())));
            }
        }
        for (slot, m) in slots.into_iter().zip(flat) {
            slot.data.copy_from_slice(&m.data);
        }
        Ok(())
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    /// Checks every tensor shape against the config.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = init_params(&self.config, 0)?;
        let mine = self.named_tensors();
        let theirs = reference.named_tensors();
        if mine.len() != theirs.len() {
            return Err(Error::ShapeMismatch(format!("{} tensors, config implies {}", mine.len(), theirs.len())));
        }
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.shape() != b.shape() || a.data.len() != a.rows * a.cols {
                return Err(Error::ShapeMismatch(format!("{name}: {:?}, config implies {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

/// A standardized instance in the matrix form the network consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    /// `N x node_dim`.
    pub nodes: Matrix,
    /// `M x edge_dim`, one row per undirected edge.
    pub edges: Matrix,
    /// Both orientations of every edge as `(i, j, edge)`.
    pub triples: Triples,
    /// Row-major `N x N` neighbor mask.
    pub mask: Vec<bool>,
}

impl GraphInput {
    /// Builds the input from an already standardized record.
    pub fn from_standardized(record: &InstanceRecord) -> Result<Self> {
        record.check()?;
        let n = record.n_nodes();
        if n == 0 {
            return Err(Error::EmptyInput("graph with no nodes"));
        }
        let mut mask = vec![false; n * n];
        let mut triples = Vec::with_capacity(2 * record.edges.len());
        for (e, &(u, v)) in record.edges.iter().enumerate() {
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            if mask[u * n + v] {
                return Err(Error::InvalidGraph(format!("duplicate edge ({u}, {v})")));
            }
            mask[u * n + v] = true;
            mask[v * n + u] = true;
            triples.push((u, v, e));
            triples.push((v, u, e));
        }
        Ok(Self {
            nodes: Matrix::from_rows(&record.node_features),
            edges: Matrix::from_rows(&record.edge_features),
            triples: Arc::new(triples),
            mask,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.rows
    }
}

/// Tape handles of a recorded forward pass.
pub struct ForwardVars {
    /// Parameter leaves, in [`ModelParams::named_tensors`] order.
    pub params: Vec<Var>,
    pub y_hat: Var,
    pub pool_attention: Var,
    /// Per-layer, per-head neighbor attention.
    pub layer_attention: Vec<Vec<Var>>,
}

struct LayerVars {
    heads: Vec<[Var; 5]>,
    residual_w: Var,
    residual_b: Var,
    norm_gain: Var,
    norm_bias: Var,
}

fn layer_leaves(tape: &mut Tape, p: &GatLayerParams, all: &mut Vec<Var>) -> LayerVars {
    let mut leaf = |m: &Matrix| {
        let v = tape.leaf(m.clone());
        all.push(v);
        v
    };
    let heads = p
        .heads
        .iter()
        .map(|h| [leaf(&h.w), leaf(&h.w_edge), leaf(&h.a_src), leaf(&h.a_dst), leaf(&h.a_edge)])
        .collect();
    LayerVars {
        heads,
        residual_w: leaf(&p.residual_w),
        residual_b: leaf(&p.residual_b),
        norm_gain: leaf(&p.norm_gain),
        norm_bias: leaf(&p.norm_bias),
    }
}

fn gat_layer(tape: &mut Tape, lv: &LayerVars, x: Var, edge_feats: Var, g: &GraphInput) -> Result<(Var, Vec<Var>)> {
    let m = g.edges.rows;
    let mut total: Option<Var> = None;
    let mut attention = Vec::with_capacity(lv.heads.len());
    for &[w, w_edge, a_src, a_dst, a_edge] in &lv.heads {
        let wh = tape.matmul_nt(x, w)?;
        let we = tape.matmul_nt(edge_feats, w_edge)?;
        let s_src = tape.matmul_nt(wh, a_src)?;
        let s_dst = tape.matmul_nt(wh, a_dst)?;
        let s_edge = tape.matmul_nt(we, a_edge)?;
        let raw = tape.edge_scores(s_src, s_dst, s_edge, &g.triples)?;
        let z = tape.relu(raw);
        let alpha = tape.masked_row_softmax(z, &g.mask)?;
        let node_msg = tape.matmul(alpha, wh)?;
        let incidence = tape.pick_incidence(alpha, &g.triples, m)?;
        let edge_msg = tape.matmul(incidence, we)?;
        let msg = tape.add(node_msg, edge_msg)?;
        total = Some(match total {
            None => msg,
            Some(t) => tape.add(t, msg)?,
        });
        attention.push(alpha);
    }
    let total = total.ok_or(Error::InvalidConfig("layer with no heads".into()))?;
    let agg = tape.relu(total);
    let proj = tape.matmul_nt(x, lv.residual_w)?;
    let res = tape.add_row(proj, lv.residual_b)?;
    let sum = tape.add(agg, res)?;
    let out = tape.layer_norm(sum, lv.norm_gain, lv.norm_bias, LAYER_NORM_EPS)?;
    Ok((out, attention))
}

/// Records the full forward pass of `model` on a standardized input.
pub fn forward(tape: &mut Tape, model: &ModelParams, g: &GraphInput) -> Result<ForwardVars> {
    let cfg = &model.config;
    if g.nodes.cols != cfg.node_feature_dim || g.edges.cols != cfg.edge_feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "input has {} node / {} edge features, model expects {} / {}",
            g.nodes.cols, g.edges.cols, cfg.node_feature_dim, cfg.edge_feature_dim
        )));
    }
    let mut params = Vec::new();
    let l1 = layer_leaves(tape, &model.layer1, &mut params);
    let l2 = layer_leaves(tape, &model.layer2, &mut params);
    let mut leaf = |m: &Matrix| {
        let v = tape.leaf(m.clone());
        params.push(v);
        v
    };
    let w_q = leaf(&model.pooling.w_q);
    let w_k = leaf(&model.pooling.w_k);
    let w_v = leaf(&model.pooling.w_v);
    let w_out = leaf(&model.readout.w_out);
    let b_out = leaf(&model.readout.b_out);
    let w_fc = leaf(&model.readout.w_fc);
    let b_fc = leaf(&model.readout.b_fc);

    let x = tape.leaf(g.nodes.clone());
    let e = tape.leaf(g.edges.clone());
    let (h1, att1) = gat_layer(tape, &l1, x, e, g)?;
    let (h2, att2) = gat_layer(tape, &l2, h1, e, g)?;

    let q = tape.matmul_nt(h2, w_q)?;
    let k = tape.matmul_nt(h2, w_k)?;
    let v = tape.matmul_nt(h2, w_v)?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(cfg.attention_dim as f64));
    let att = tape.row_softmax(scaled);
    let z = tape.matmul(att, v)?;
    let graph_vec = tape.mean_rows(z)?;

    let hidden = tape.matmul_nt(graph_vec, w_out)?;
    let hidden = tape.add_row(hidden, b_out)?;
    let hidden = tape.relu(hidden);
    let logit = tape.matmul_nt(hidden, w_fc)?;
    let logit = tape.add_row(logit, b_fc)?;
    let y_hat = tape.sigmoid(logit);

    Ok(ForwardVars { params, y_hat, pool_attention: att, layer_attention: vec![att1, att2] })
}

/// Self-attention pooling on plain matrices: returns the graph vector
/// (`1 x d`) and the `N x N` attention matrix.
pub fn self_attention_pool(pooling: &PoolingParams, node_embeds: &Matrix) -> Result<(Matrix, Matrix)> {
    if node_embeds.rows == 0 {
        return Err(Error::EmptyInput("pooling over zero nodes"));
    }
    let mut t = Tape::new();
    let h = t.leaf(node_embeds.clone());
    let w_q = t.leaf(pooling.w_q.clone());
    let w_k = t.leaf(pooling.w_k.clone());
    let w_v = t.leaf(pooling.w_v.clone());
    let q = t.matmul_nt(h, w_q)?;
    let k = t.matmul_nt(h, w_k)?;
    let v = t.matmul_nt(h, w_v)?;
    let s = t.matmul_nt(q, k)?;
    let s = t.scale(s, 1.0 / libm::sqrt(pooling.w_q.rows as f64));
    let att = t.row_softmax(s);
    let z = t.matmul(att, v)?;
    let g = t.mean_rows(z)?;
    Ok((t.value(g).clone(), t.value(att).clone()))
}

/// Output of one GAT layer on plain matrices, plus each head's neighbor
/// attention.
pub fn gat_layer_forward(
    params: &GatLayerParams,
    node_embeds: &Matrix,
    edge_feats: &Matrix,
    g: &GraphInput,
) -> Result<(Matrix, Vec<Matrix>)> {
    let mut t = Tape::new();
    let mut all = Vec::new();
    let lv = layer_leaves(&mut t, params, &mut all);
    let x = t.leaf(node_embeds.clone());
    let e = t.leaf(edge_feats.clone());
    let (out, att) = gat_layer(&mut t, &lv, x, e, g)?;
    Ok((t.value(out).clone(), att.iter().map(|&a| t.value(a).clone()).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_hat: f64,
    /// Mean pooling attention received by each node; sums to one.
    pub node_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetailedPrediction {
    pub prediction: Prediction,
    pub pool_attention: Matrix,
    pub layer_attention: Vec<Vec<Matrix>>,
}

/// Column means of an attention matrix.
pub fn attention_received(att: &Matrix) -> Vec<f64> {
    let n = att.rows as f64;
    (0..att.cols).map(|j| (0..att.rows).map(|i| att.get(i, j)).sum::<f64>() / n).collect()
}

impl ModelParams {
    /// Prediction for a raw (unstandardized) record.
    pub fn predict(&self, record: &InstanceRecord) -> Result<Prediction> {
        Ok(self.predict_detailed(record)?.prediction)
    }

    pub fn predict_detailed(&self, record: &InstanceRecord) -> Result<DetailedPrediction> {
        let g = GraphInput::from_standardized(&self.standardizer.apply(record))?;
        self.predict_input(&g)
    }

    /// Prediction for an already standardized input.
    pub fn predict_input(&self, g: &GraphInput) -> Result<DetailedPrediction> {
        let mut tape = Tape::new();
        let fv = forward(&mut tape, self, g)?;
        let att = tape.value(fv.pool_attention).clone();
        Ok(DetailedPrediction {
            prediction: Prediction { y_hat: tape.value(fv.y_hat).data[0], node_weights: attention_received(&att) },
            pool_attention: att,
            layer_attention: fv
                .layer_attention
                .iter()
                .map(|heads| heads.iter().map(|&a| tape.value(a).clone()).collect())
                .collect(),
        })
    }

    /// Squared error of one standardized example plus the gradient of every
    /// parameter, in [`named_tensors`](Self::named_tensors) order.
    pub fn loss_and_grads(&self, g: &GraphInput, label: f64) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let fv = forward(&mut tape, self, g)?;
        let target = tape.leaf(Matrix::scalar(label));
        let diff = tape.sub(fv.y_hat, target)?;
        let sq = tape.mul(diff, diff)?;
        let grads = tape.backward(sq)?;
        Ok((tape.value(sq).data[0], collect_grads(&tape, &grads, &fv.params)))
    }
}

fn collect_grads(tape: &Tape, grads: &Gradients, params: &[Var]) -> Vec<Matrix> {
    params.iter().map(|&p| grads.get_or_zeros(p, tape.value(p).shape())).collect()
}

/// Gradient of `y_hat` itself with respect to every parameter.
pub fn output_grads(model: &ModelParams, g: &GraphInput) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let fv = forward(&mut tape, model, g)?;
    let grads = tape.backward(fv.y_hat)?;
    Ok((tape.value(fv.y_hat).data[0], collect_grads(&tape, &grads, &fv.params)))
}
