//! Heterogeneous graph representation learning: multi-one-hot node
//! initialization, relation-aware convolution layers with per-node-type and
//! per-edge-type weights, layer aggregation, and a self-supervised
//! edge-reconstruction training objective with hand-written backprop.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::hin::{Hin, NodeKind, NodeRef};
use crate::linalg::{dot, leaky_relu, sigmoid, Mat};

/// Dense vectors for every HIN node, rows aligned with a sorted node list.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    nodes: Vec<NodeRef>,
    pos: HashMap<NodeRef, usize>,
    vecs: Mat,
}

impl EmbeddingTable {
    pub fn new(nodes: Vec<NodeRef>, vecs: Mat) -> Result<Self> {
        if nodes.len() != vecs.rows() {
            return Err(Error::Shape(format!(
                "{} nodes but {} embedding rows",
                nodes.len(),
                vecs.rows()
            )));
        }
        let pos = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        Ok(EmbeddingTable { nodes, pos, vecs })
    }

    pub fn dim(&self) -> usize {
        self.vecs.cols()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeRef] {
        &self.nodes
    }

    pub fn vecs(&self) -> &Mat {
        &self.vecs
    }

    pub fn get(&self, node: &NodeRef) -> Result<&[f64]> {
        let idx = self
            .pos
            .get(node)
            .ok_or_else(|| Error::Reference(format!("no embedding for {node}")))?;
        Ok(self.vecs.row(*idx))
    }

    pub fn index_of(&self, node: &NodeRef) -> Option<usize> {
        self.pos.get(node).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.vecs.is_finite()
    }
}

/// Per-layer parameters: one weight matrix per node kind, one per edge
/// relation, a bias over the concatenated output, and a dropout rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Indexed by `NodeKind::index()`; `block x d_in` each.
    pub w_node: Vec<Mat>,
    /// Indexed by `RelationId.0`; `block x d_in` each.
    pub w_edge: Vec<Mat>,
    /// Length `d_out = 2 * block`.
    pub bias: Vec<f64>,
    pub dropout: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl LayerParams {
    pub fn block(&self) -> usize {
        self.d_out / 2
    }

    pub fn init<R: Rng>(
        num_relations: usize,
        d_in: usize,
        d_out: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d_out % 2 != 0 {
            return Err(Error::Shape(format!("layer output dim {d_out} must be even")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0,1)")));
        }
        let block = d_out / 2;
        let scale = (6.0 / (d_in + block) as f64).sqrt();
        let w_node = (0..NodeKind::ALL.len())
            .map(|_| Mat::uniform(block, d_in, -scale, scale, rng))
            .collect();
        let w_edge = (0..num_relations)
            .map(|_| Mat::uniform(block, d_in, -scale, scale, rng))
            .collect();
        Ok(LayerParams {
            w_node,
            w_edge,
            bias: vec![0.0; d_out],
            dropout,
            d_in,
            d_out,
        })
    }

    fn zeros_like(&self) -> Self {
        LayerParams {
            w_node: self
                .w_node
                .iter()
                .map(|m| Mat::zeros(m.rows(), m.cols()))
                .collect(),
            w_edge: self
                .w_edge
                .iter()
                .map(|m| Mat::zeros(m.rows(), m.cols()))
                .collect(),
            bias: vec![0.0; self.bias.len()],
            dropout: self.dropout,
            d_in: self.d_in,
            d_out: self.d_out,
        }
    }
}

/// Full graph module: convolution layers plus per-layer projections to the
/// shared output dimension summed by layer aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphRepModel {
    pub layers: Vec<LayerParams>,
    /// One `d_final x d_l` projection per layer.
    pub proj: Vec<Mat>,
    pub leaky_slope: f64,
}

/// Gradients mirroring `GraphRepModel`.
pub struct GraphRepGrads {
    pub layers: Vec<LayerParams>,
    pub proj: Vec<Mat>,
}

/// Layer-0 multi-one-hot vectors: a one-hot block over the node kinds
/// present in the HIN concatenated with a one-hot block over `id % buckets`.
pub fn init_node_embeddings(hin: &Hin, d0: usize) -> Result<EmbeddingTable> {
    let kinds: Vec<NodeKind> = hin.kinds().into_iter().collect();
    if d0 < kinds.len() + 1 {
        return Err(Error::Capacity(format!(
            "d0={d0} too small for {} node kinds plus an id bucket block",
            kinds.len()
        )));
    }
    let buckets = d0 - kinds.len();
    let nodes: Vec<NodeRef> = hin.nodes().copied().collect();
    let mut vecs = Mat::zeros(nodes.len(), d0);
    for (row, node) in nodes.iter().enumerate() {
        let kind_slot = kinds.iter().position(|k| *k == node.kind).unwrap();
        vecs.set(row, kind_slot, 1.0);
        vecs.set(row, kinds.len() + (node.id as usize % buckets), 1.0);
    }
    EmbeddingTable::new(nodes, vecs)
}

/// Per-layer forward cache used by backprop.
struct LayerCache {
    /// Post-dropout inputs, `n x d_in`.
    x: Mat,
    /// Dropout mask (0 or 1/(1-p)), `n x d_in`.
    mask: Mat,
    /// Per relation: summed post-dropout neighbor inputs, `n x d_in`.
    nb_sums: Vec<Mat>,
    /// Per relation, per node: neighbor count.
    nb_counts: Vec<Vec<usize>>,
    /// Pre-activation, `n x d_out`.
    z: Mat,
}

fn layer_forward_cached(
    hin: &Hin,
    table: &EmbeddingTable,
    params: &LayerParams,
    leaky_slope: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(EmbeddingTable, LayerCache)> {
    if table.dim() != params.d_in {
        return Err(Error::Shape(format!(
            "layer expects input dim {}, got {}",
            params.d_in,
            table.dim()
        )));
    }
    let n = table.len();
    let d_in = params.d_in;
    let block = params.block();
    let num_rel = params.w_edge.len();

    // One dropout mask per node per layer application, inverted scaling.
    let mut mask = Mat::zeros(n, d_in);
    let keep = 1.0 - params.dropout;
    for v in mask.data_mut() {
        *v = if train && params.dropout > 0.0 {
            if rng.gen_bool(keep) {
                1.0 / keep
            } else {
                0.0
            }
        } else {
            1.0
        };
    }
    let mut x = Mat::zeros(n, d_in);
    for i in 0..n {
        for j in 0..d_in {
            x.set(i, j, table.vecs().get(i, j) * mask.get(i, j));
        }
    }

    let mut nb_sums: Vec<Mat> = (0..num_rel).map(|_| Mat::zeros(n, d_in)).collect();
    let mut nb_counts: Vec<Vec<usize>> = vec![vec![0; n]; num_rel];
    for (i, node) in table.nodes().iter().enumerate() {
        for rel in 0..num_rel {
            let neighbors = hin.neighbors(node, crate::hin::RelationId(rel as u16))?;
            nb_counts[rel][i] = neighbors.len();
            for nb in neighbors {
                let nb_idx = table
                    .index_of(nb)
                    .ok_or_else(|| Error::Reference(format!("no embedding row for {nb}")))?;
                for j in 0..d_in {
                    let cur = nb_sums[rel].get(i, j);
                    nb_sums[rel].set(i, j, cur + x.get(nb_idx, j));
                }
            }
        }
    }

    let mut z = Mat::zeros(n, params.d_out);
    let mut out = Mat::zeros(n, params.d_out);
    for (i, node) in table.nodes().iter().enumerate() {
        let w_self = &params.w_node[node.kind.index()];
        let self_part = w_self.matvec(x.row(i));
        for b in 0..block {
            z.set(i, b, self_part[b] + params.bias[b]);
        }
        let mut nb_part = vec![0.0; block];
        for rel in 0..num_rel {
            let count = nb_counts[rel][i];
            if count == 0 {
                continue;
            }
            let agg = params.w_edge[rel].matvec(nb_sums[rel].row(i));
            for b in 0..block {
                nb_part[b] += agg[b] / count as f64;
            }
        }
        for b in 0..block {
            z.set(i, block + b, nb_part[b] + params.bias[block + b]);
        }
        for j in 0..params.d_out {
            out.set(i, j, leaky_relu(z.get(i, j), leaky_slope));
        }
    }

    let out_table = EmbeddingTable::new(table.nodes().to_vec(), out)?;
    Ok((
        out_table,
        LayerCache {
            x,
            mask,
            nb_sums,
            nb_counts,
            z,
        },
    ))
}

/// One relation-aware convolution layer. Dropout is active only in train
/// mode; nodes without neighbors under an edge type contribute a zero block
/// for that type.
pub fn layer_forward(
    hin: &Hin,
    table: &EmbeddingTable,
    params: &LayerParams,
    leaky_slope: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingTable> {
    layer_forward_cached(hin, table, params, leaky_slope, train, rng).map(|(t, _)| t)
}

/// Element-wise sum across per-layer tables sharing one dimension.
pub fn aggregate_layers(tables: &[EmbeddingTable]) -> Result<EmbeddingTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Shape("no layer tables to aggregate".into()))?;
    let d = first.dim();
    let mut sum = Mat::zeros(first.len(), d);
    for t in tables {
        if t.dim() != d || t.len() != first.len() || t.nodes() != first.nodes() {
            return Err(Error::Shape("layer tables disagree on nodes or dimension".into()));
        }
        sum.add_scaled(1.0, t.vecs());
    }
    EmbeddingTable::new(first.nodes().to_vec(), sum)
}

struct ForwardCache {
    layer_caches: Vec<LayerCache>,
    /// Raw (pre-projection) output of every layer.
    layer_tables: Vec<EmbeddingTable>,
}

impl GraphRepModel {
    pub fn out_dim(&self) -> usize {
        self.proj.first().map(|p| p.rows()).unwrap_or(0)
    }

    fn forward_cached(
        &self,
        hin: &Hin,
        h0: &EmbeddingTable,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(EmbeddingTable, ForwardCache)> {
        let mut layer_caches = Vec::new();
        let mut layer_tables = Vec::new();
        let mut current = h0.clone();
        for params in &self.layers {
            let (next, cache) =
                layer_forward_cached(hin, &current, params, self.leaky_slope, train, rng)?;
            layer_caches.push(cache);
            layer_tables.push(next.clone());
            current = next;
        }
        let projected: Vec<EmbeddingTable> = self
            .proj
            .iter()
            .zip(&layer_tables)
            .map(|(p, t)| {
                let mut out = Mat::zeros(t.len(), p.rows());
                for i in 0..t.len() {
                    let v = p.matvec(t.vecs().row(i));
                    out.row_mut(i).copy_from_slice(&v);
                }
                EmbeddingTable::new(t.nodes().to_vec(), out)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_table = aggregate_layers(&projected)?;
        Ok((
            final_table,
            ForwardCache {
                layer_caches,
                layer_tables,
            },
        ))
    }

    /// Final embeddings with dropout disabled.
    pub fn embed(&self, hin: &Hin, h0: &EmbeddingTable) -> Result<EmbeddingTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward_cached(hin, h0, false, &mut rng).map(|(t, _)| t)
    }

    /// Backprop `d_final` (gradient w.r.t. final embeddings) into parameter
    /// gradients. Layer `l`'s raw output feeds both its projection and
    /// layer `l+1`, so upstream gradients accumulate from both paths.
    fn backward(
        &self,
        hin: &Hin,
        h0: &EmbeddingTable,
        cache: &ForwardCache,
        d_final: &Mat,
    ) -> Result<GraphRepGrads> {
        let n = h0.len();
        let num_layers = self.layers.len();
        let mut grads = GraphRepGrads {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            proj: self
                .proj
                .iter()
                .map(|p| Mat::zeros(p.rows(), p.cols()))
                .collect(),
        };

        // Projection path: dProj_l += d_final h_l^T; dH_l += Proj_l^T d_final.
        let mut d_layer: Vec<Mat> = self
            .layers
            .iter()
            .map(|l| Mat::zeros(n, l.d_out))
            .collect();
        for l in 0..num_layers {
            let table = &cache.layer_tables[l];
            for i in 0..n {
                grads.proj[l].add_outer(1.0, d_final.row(i), table.vecs().row(i));
                let back = self.proj[l].matvec_t(d_final.row(i));
                for (slot, v) in d_layer[l].row_mut(i).iter_mut().zip(back) {
                    *slot += v;
                }
            }
        }

        for l in (0..num_layers).rev() {
            let params = &self.layers[l];
            let lc = &cache.layer_caches[l];
            let block = params.block();
            let num_rel = params.w_edge.len();
            let input_table = if l == 0 {
                h0
            } else {
                &cache.layer_tables[l - 1]
            };
            let nodes = input_table.nodes();

            // dZ = dH * lrelu'(z)
            let mut dz = Mat::zeros(n, params.d_out);
            for i in 0..n {
                for j in 0..params.d_out {
                    let slope = if lc.z.get(i, j) >= 0.0 {
                        1.0
                    } else {
                        self.leaky_slope
                    };
                    dz.set(i, j, d_layer[l].get(i, j) * slope);
                }
            }

            let mut dx = Mat::zeros(n, params.d_in);
            for (i, node) in nodes.iter().enumerate() {
                let dz_self = &dz.row(i)[..block];
                let dz_nb = &dz.row(i)[block..];
                for (b, &g) in dz.row(i).iter().enumerate() {
                    grads.layers[l].bias[b] += g;
                }
                let kind = node.kind.index();
                grads.layers[l].w_node[kind].add_outer(1.0, dz_self, lc.x.row(i));
                let back_self = params.w_node[kind].matvec_t(dz_self);
                for (slot, v) in dx.row_mut(i).iter_mut().zip(back_self) {
                    *slot += v;
                }
                for rel in 0..num_rel {
                    let count = lc.nb_counts[rel][i];
                    if count == 0 {
                        continue;
                    }
                    let inv = 1.0 / count as f64;
                    grads.layers[l].w_edge[rel].add_outer(inv, dz_nb, lc.nb_sums[rel].row(i));
                    let back_nb = params.w_edge[rel].matvec_t(dz_nb);
                    let neighbors = hin.neighbors(node, crate::hin::RelationId(rel as u16))?;
                    for nb in neighbors {
                        let nb_idx = input_table.index_of(nb).unwrap();
                        for (slot, &v) in dx.row_mut(nb_idx).iter_mut().zip(&back_nb) {
                            *slot += inv * v;
                        }
                    }
                }
            }

            // Through the dropout mask into the previous layer's output.
            if l > 0 {
                for i in 0..n {
                    for j in 0..params.d_in {
                        let g = dx.get(i, j) * lc.mask.get(i, j);
                        let cur = d_layer[l - 1].get(i, j);
                        d_layer[l - 1].set(i, j, cur + g);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Training configuration for the graph module.
#[derive(Debug, Clone)]
pub struct GraphRepConfig {
    /// Output dimension per convolution layer.
    pub layer_dims: Vec<usize>,
    /// Shared dimension after per-layer projection and aggregation.
    pub out_dim: usize,
    /// Id-bucket count for the multi-one-hot initialization.
    pub buckets: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GraphRepConfig {
    fn default() -> Self {
        GraphRepConfig {
            layer_dims: vec![64, 128],
            out_dim: 128,
            buckets: 16,
            dropout: 0.1,
            leaky_slope: 0.01,
            learning_rate: 0.05,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Logistic edge-reconstruction loss over (a, b, label) node pairs.
pub fn reconstruction_loss(table: &EmbeddingTable, pairs: &[(NodeRef, NodeRef, f64)]) -> Result<f64> {
    let mut loss = 0.0;
    for (a, b, y) in pairs {
        let p = sigmoid(dot(table.get(a)?, table.get(b)?)).clamp(1e-12, 1.0 - 1e-12);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(loss / pairs.len().max(1) as f64)
}

fn reconstruction_grad(table: &EmbeddingTable, pairs: &[(NodeRef, NodeRef, f64)]) -> Result<Mat> {
    let mut d_final = Mat::zeros(table.len(), table.dim());
    let scale = 1.0 / pairs.len().max(1) as f64;
    for (a, b, y) in pairs {
        let ia = table.index_of(a).unwrap();
        let ib = table.index_of(b).unwrap();
        let err = (sigmoid(dot(table.get(a)?, table.get(b)?)) - y) * scale;
        let hb: Vec<f64> = table.get(b)?.to_vec();
        let ha: Vec<f64> = table.get(a)?.to_vec();
        for (slot, v) in d_final.row_mut(ia).iter_mut().zip(&hb) {
            *slot += err * v;
        }
        for (slot, v) in d_final.row_mut(ib).iter_mut().zip(&ha) {
            *slot += err * v;
        }
    }
    Ok(d_final)
}

/// Loss and parameter gradients for a fixed pair set with dropout off.
/// Shared by training and the finite-difference checks.
pub fn reconstruction_loss_and_grads(
    model: &GraphRepModel,
    hin: &Hin,
    h0: &EmbeddingTable,
    pairs: &[(NodeRef, NodeRef, f64)],
) -> Result<(f64, GraphRepGrads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (final_table, cache) = model.forward_cached(hin, h0, false, &mut rng)?;
    let loss = reconstruction_loss(&final_table, pairs)?;
    let d_final = reconstruction_grad(&final_table, pairs)?;
    let grads = model.backward(hin, h0, &cache, &d_final)?;
    Ok((loss, grads))
}

fn sample_pairs(hin: &Hin, rng: &mut ChaCha8Rng) -> Vec<(NodeRef, NodeRef, f64)> {
    let nodes: Vec<NodeRef> = hin.nodes().copied().collect();
    let mut pairs = Vec::with_capacity(hin.edges().len() * 2);
    for e in hin.edges() {
        pairs.push((e.src, e.dst, 1.0));
        // Uniform corruption of the destination endpoint.
        for _ in 0..20 {
            let cand = nodes[rng.gen_range(0..nodes.len())];
            if cand != e.src && cand != e.dst {
                pairs.push((e.src, cand, 0.0));
                break;
            }
        }
    }
    pairs
}

fn apply_sgd(model: &mut GraphRepModel, grads: &GraphRepGrads, lr: f64) {
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in layer.w_node.iter_mut().zip(&g.w_node) {
            w.add_scaled(-lr, gw);
        }
        for (w, gw) in layer.w_edge.iter_mut().zip(&g.w_edge) {
            w.add_scaled(-lr, gw);
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    for (p, gp) in model.proj.iter_mut().zip(&grads.proj) {
        p.add_scaled(-lr, gp);
    }
}

pub fn init_model(hin: &Hin, cfg: &GraphRepConfig) -> Result<(GraphRepModel, EmbeddingTable)> {
    let kinds = hin.kinds().len();
    let d0 = kinds + cfg.buckets;
    let h0 = init_node_embeddings(hin, d0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_rel = hin.relations().len();
    let mut layers = Vec::new();
    let mut d_in = d0;
    for &d_out in &cfg.layer_dims {
        layers.push(LayerParams::init(num_rel, d_in, d_out, cfg.dropout, &mut rng)?);
        d_in = d_out;
    }
    let proj = cfg
        .layer_dims
        .iter()
        .map(|&d_l| {
            let scale = (6.0 / (d_l + cfg.out_dim) as f64).sqrt();
            Mat::uniform(cfg.out_dim, d_l, -scale, scale, &mut rng)
        })
        .collect();
    Ok((
        GraphRepModel {
            layers,
            proj,
            leaky_slope: cfg.leaky_slope,
        },
        h0,
    ))
}

/// Train the graph module under edge reconstruction with uniformly sampled
/// non-edges. Returns the model and final embeddings with dropout off.
pub fn train_graphrep(hin: &Hin, cfg: &GraphRepConfig) -> Result<(GraphRepModel, EmbeddingTable)> {
    let (mut model, h0) = init_model(hin, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut first_loss = None;
    let mut last_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let pairs = sample_pairs(hin, &mut rng);
        let (final_table, cache) = model.forward_cached(hin, &h0, true, &mut rng)?;
        let loss = reconstruction_loss(&final_table, &pairs)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: "non-finite reconstruction loss".into(),
            });
        }
        let d_final = reconstruction_grad(&final_table, &pairs)?;
        let grads = model.backward(hin, &h0, &cache, &d_final)?;
        apply_sgd(&mut model, &grads, cfg.learning_rate);
        first_loss.get_or_insert(loss);
        last_loss = loss;
    }
    if let Some(first) = first_loss {
        log::debug!("graphrep loss: first epoch {first:.4}, last epoch {last_loss:.4}");
    }
    let table = model.embed(hin, &h0)?;
    Ok((model, table))
}

/// Export final embeddings keyed by node kind and id.
pub fn embeddings_to_checkpoint(table: &EmbeddingTable) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set("kind", "embeddings");
    ck.set("nodes", table.len());
    ck.set("dim", table.dim());
    let mut keys = Mat::zeros(table.len(), 2);
    for (i, node) in table.nodes().iter().enumerate() {
        keys.set(i, 0, node.kind.index() as f64);
        keys.set(i, 1, node.id as f64);
    }
    ck.push_tensor("node_keys", keys);
    ck.push_tensor("embeddings", table.vecs().clone());
    ck
}

pub fn embeddings_from_checkpoint(ck: &Checkpoint) -> Result<EmbeddingTable> {
    let keys = ck.tensor("node_keys")?;
    let vecs = ck.tensor("embeddings")?;
    let mut nodes = Vec::with_capacity(keys.rows());
    for i in 0..keys.rows() {
        let kind = match keys.get(i, 0) as usize {
            0 => NodeKind::User,
            1 => NodeKind::Item,
            2 => NodeKind::UserAttr,
            3 => NodeKind::ItemAttr,
            other => {
                return Err(Error::Checkpoint(format!("bad node kind index {other}")));
            }
        };
        nodes.push(NodeRef {
            kind,
            id: keys.get(i, 1) as u32,
        });
    }
    EmbeddingTable::new(nodes, vecs.clone())
}
