//! Counterfactual explanation policy: GRU state encoder, attentive action
//! pruning, bilinear policy head, counterfactual reward, off-policy
//! (IPS-weighted) REINFORCE training, and greedy explanation extraction.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fairness::{disparity, DisparityConfig, GroupSplit, RecList};
use crate::graphrep::EmbeddingTable;
use crate::hin::{Hin, NodeKind, NodeRef};
use crate::linalg::{cosine, dot, hadamard, sigmoid, softmax, Mat};
use crate::recsys::{top_k, LatentFactors};

/// GRU cell parameters: update gate, reset gate, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// Input weights, each `d_s x d_x`.
    pub w: [Mat; 3],
    /// Recurrent weights, each `d_s x d_s`.
    pub u: [Mat; 3],
    /// Biases, each length `d_s`.
    pub b: [Vec<f64>; 3],
}

impl GruParams {
    pub fn state_dim(&self) -> usize {
        self.b[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].cols()
    }

    pub fn init<R: Rng>(d_x: usize, d_s: usize, rng: &mut R) -> Self {
        let scale = (1.0 / (d_x + d_s) as f64).sqrt();
        let mk_w = |rng: &mut R| Mat::uniform(d_s, d_x, -scale, scale, rng);
        let mk_u = |rng: &mut R| Mat::uniform(d_s, d_s, -scale, scale, rng);
        GruParams {
            w: [mk_w(rng), mk_w(rng), mk_w(rng)],
            u: [mk_u(rng), mk_u(rng), mk_u(rng)],
            b: [vec![0.0; d_s], vec![0.0; d_s], vec![0.0; d_s]],
        }
    }

    fn zeros_like(&self) -> Self {
        let zw = |m: &Mat| Mat::zeros(m.rows(), m.cols());
        GruParams {
            w: [zw(&self.w[0]), zw(&self.w[1]), zw(&self.w[2])],
            u: [zw(&self.u[0]), zw(&self.u[1]), zw(&self.u[2])],
            b: [
                vec![0.0; self.b[0].len()],
                vec![0.0; self.b[1].len()],
                vec![0.0; self.b[2].len()],
            ],
        }
    }
}

/// Per-step forward cache for backprop through time.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub s_prev: Vec<f64>,
    pub u_gate: Vec<f64>,
    pub r_gate: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub s: Vec<f64>,
}

/// One GRU step:
/// `u = sigma(W1 x + U1 s + b1)`, `r = sigma(W2 x + U2 s + b2)`,
/// `s_hat = tanh(W3 x + U3 (r . s) + b3)`, `s' = (1-u) . s + u . s_hat`.
pub fn encode_state(params: &GruParams, s_prev: &[f64], x: &[f64]) -> Result<GruCache> {
    if x.len() != params.input_dim() || s_prev.len() != params.state_dim() {
        return Err(Error::Shape(format!(
            "gru expects input {} / state {}, got {} / {}",
            params.input_dim(),
            params.state_dim(),
            x.len(),
            s_prev.len()
        )));
    }
    let gate = |i: usize| -> Vec<f64> {
        let mut a = params.w[i].matvec(x);
        let rec = params.u[i].matvec(s_prev);
        for (aj, (r, b)) in a.iter_mut().zip(rec.iter().zip(&params.b[i])) {
            *aj += r + b;
        }
        a
    };
    let u_gate: Vec<f64> = gate(0).into_iter().map(sigmoid).collect();
    let r_gate: Vec<f64> = gate(1).into_iter().map(sigmoid).collect();
    let mut a3 = params.w[2].matvec(x);
    let rs = hadamard(&r_gate, s_prev);
    let rec3 = params.u[2].matvec(&rs);
    for (aj, (r, b)) in a3.iter_mut().zip(rec3.iter().zip(&params.b[2])) {
        *aj += r + b;
    }
    let s_hat: Vec<f64> = a3.into_iter().map(f64::tanh).collect();
    let s: Vec<f64> = (0..params.state_dim())
        .map(|j| (1.0 - u_gate[j]) * s_prev[j] + u_gate[j] * s_hat[j])
        .collect();
    Ok(GruCache {
        s_prev: s_prev.to_vec(),
        u_gate,
        r_gate,
        s_hat,
        s,
    })
}

/// GRU input: concatenated embeddings of the current rec-list items.
pub fn state_input(embeddings: &EmbeddingTable, items: &[u32]) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(items.len() * embeddings.dim());
    for &item in items {
        x.extend_from_slice(embeddings.get(&NodeRef::item(item))?);
    }
    Ok(x)
}

/// Attributes reachable from the user or any rec-list item, ascending order.
pub fn candidate_attributes(hin: &Hin, user: u32, items: &[u32]) -> Result<Vec<NodeRef>> {
    let mut set: BTreeSet<NodeRef> = hin
        .attribute_neighbors(&NodeRef::user(user))?
        .into_iter()
        .collect();
    for &item in items {
        set.extend(hin.attribute_neighbors(&NodeRef::item(item))?);
    }
    Ok(set.into_iter().collect())
}

/// Attention parameters scoring each attribute against the state.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    /// `d_a x d_s`.
    pub w_s: Mat,
    /// `d_a x d_e`.
    pub w_h: Mat,
    /// Length `d_a`.
    pub b: Vec<f64>,
}

impl AttnParams {
    pub fn init<R: Rng>(d_a: usize, d_s: usize, d_e: usize, rng: &mut R) -> Self {
        let scale = (1.0 / (d_s + d_e) as f64).sqrt();
        AttnParams {
            w_s: Mat::uniform(d_a, d_s, -scale, scale, rng),
            w_h: Mat::uniform(d_a, d_e, -scale, scale, rng),
            b: vec![0.0; d_a],
        }
    }
}

/// Softmax-normalized attention weights over the attribute set. The raw
/// per-attribute score vector `ReLU(W_s s + W_h e_i + b)` is reduced to a
/// scalar by coordinate summation before normalization.
pub fn attention_scores(
    attn: &AttnParams,
    s: &[f64],
    attr_embeds: &Mat,
) -> Result<Vec<f64>> {
    if attr_embeds.rows() == 0 {
        return Err(Error::EmptyCandidates);
    }
    let base = attn.w_s.matvec(s);
    let scores: Vec<f64> = (0..attr_embeds.rows())
        .map(|i| {
            let proj = attn.w_h.matvec(attr_embeds.row(i));
            base.iter()
                .zip(proj.iter().zip(&attn.b))
                .map(|(&bs, (&p, &b))| (bs + p + b).max(0.0))
                .sum()
        })
        .collect();
    Ok(softmax(&scores))
}

/// Pruned candidate action set: attributes with the n-top attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub actions: Vec<NodeRef>,
    pub weights: Vec<f64>,
    pub n: usize,
}

/// Keep the top-`n` attributes by weight, ties broken by ascending
/// (kind, id); everything retained when the set is already small enough.
pub fn prune_actions(attrs: &[NodeRef], weights: &[f64], n: usize) -> CandidateSet {
    assert!(n >= 1, "candidate size must be at least 1");
    let mut order: Vec<usize> = (0..attrs.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap()
            .then(attrs[a].cmp(&attrs[b]))
    });
    order.truncate(n);
    CandidateSet {
        actions: order.iter().map(|&i| attrs[i]).collect(),
        weights: order.iter().map(|&i| weights[i]).collect(),
        n,
    }
}

/// Bilinear policy over the pruned candidates:
/// `pi(a|s) = softmax_a(s^T W_p e_a)`.
pub fn policy_distribution(w_p: &Mat, s: &[f64], cand_embeds: &Mat) -> Result<Vec<f64>> {
    if cand_embeds.rows() == 0 {
        return Err(Error::EmptyCandidates);
    }
    let left = w_p.matvec_t(s);
    let scores: Vec<f64> = (0..cand_embeds.rows())
        .map(|i| dot(&left, cand_embeds.row(i)))
        .collect();
    Ok(softmax(&scores))
}

/// Counterfactual reward: rationality bonus plus proximity.
/// `r = [delta_before - delta_after >= eps] + cos(U_u, U_u^cf) + mean_v cos(V_v, V_v^cf)`.
pub fn counterfactual_reward(
    before: &LatentFactors,
    after: &LatentFactors,
    user: u32,
    items: &[u32],
    delta_before: f64,
    delta_after: f64,
    epsilon: f64,
) -> Result<f64> {
    let bonus = if delta_before - delta_after >= epsilon {
        1.0
    } else {
        0.0
    };
    let user_term = cosine(before.user_row(user)?, after.user_row(user)?);
    let item_term = if items.is_empty() {
        0.0
    } else {
        let mut acc = 0.0;
        for &v in items {
            acc += cosine(before.item_row(v)?, after.item_row(v)?);
        }
        acc / items.len() as f64
    };
    Ok(bonus + user_term + item_term)
}

/// CRM return over logged (target propensity, logging propensity, reward)
/// steps with propensity-ratio clipping.
pub fn crm_return(steps: &[(f64, f64, f64)], gamma: f64, c_max: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut discount = 1.0;
    for &(pi_e, pi_0, r) in steps {
        if pi_0 <= 0.0 {
            return Err(Error::Propensity(pi_0));
        }
        total += discount * (pi_e / pi_0).clamp(0.0, c_max) * r;
        discount *= gamma;
    }
    Ok(total)
}

/// One logged decision step of a rollout.
#[derive(Debug, Clone)]
pub struct EpisodeStep {
    /// GRU input at this step (concatenated rec-list item embeddings).
    pub x: Vec<f64>,
    pub actions: Vec<NodeRef>,
    /// `|actions| x d_e` embedding rows aligned with `actions`.
    pub action_embeds: Mat,
    /// Index of the logged action within `actions`.
    pub chosen: usize,
    /// Logging-policy propensity of the chosen action.
    pub logging_propensity: f64,
    pub reward: f64,
}

/// A full logged episode with its discount factor.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub user: NodeRef,
    pub steps: Vec<EpisodeStep>,
    pub gamma: f64,
}

/// Explanation policy with all learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainPolicy {
    pub gru: GruParams,
    pub attn: AttnParams,
    /// Bilinear scoring head, `d_s x d_e`.
    pub w_p: Mat,
    /// When false, only the scoring head receives policy gradients.
    pub end_to_end: bool,
}

impl ExplainPolicy {
    pub fn init(d_x: usize, d_s: usize, d_e: usize, end_to_end: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ExplainPolicy {
            gru: GruParams::init(d_x, d_s, &mut rng),
            attn: AttnParams::init(d_s, d_s, d_e, &mut rng),
            w_p: Mat::uniform(d_s, d_e, -0.1, 0.1, &mut rng),
            end_to_end,
        }
    }

    /// Recompute the state sequence of a logged episode from parameters.
    fn unroll(&self, traj: &Trajectory) -> Result<Vec<GruCache>> {
        let mut caches = Vec::with_capacity(traj.steps.len());
        let mut s = vec![0.0; self.gru.state_dim()];
        for step in &traj.steps {
            let cache = encode_state(&self.gru, &s, &step.x)?;
            s = cache.s.clone();
            caches.push(cache);
        }
        Ok(caches)
    }
}

/// Gradients mirroring the trainable parts of `ExplainPolicy`.
pub struct PolicyGrads {
    pub gru: GruParams,
    pub w_p: Mat,
}

/// IPS objective of a batch:
/// `(1/T) sum_t gamma^t clip(pi_E/pi_0) r_t`, states recomputed from the
/// current parameters. Shared by training diagnostics and gradient checks.
pub fn policy_objective(policy: &ExplainPolicy, trajs: &[Trajectory], c_max: f64) -> Result<f64> {
    let mut total = 0.0;
    for traj in trajs {
        let caches = policy.unroll(traj)?;
        let t_len = traj.steps.len().max(1) as f64;
        let mut discount = 1.0;
        for (step, cache) in traj.steps.iter().zip(&caches) {
            let probs = policy_distribution(&policy.w_p, &cache.s, &step.action_embeds)?;
            if step.logging_propensity <= 0.0 {
                return Err(Error::Propensity(step.logging_propensity));
            }
            let w = (probs[step.chosen] / step.logging_propensity).clamp(0.0, c_max);
            total += discount * w * step.reward / t_len;
            discount *= traj.gamma;
        }
    }
    Ok(total)
}

/// Analytic gradient of `policy_objective`, exact while clipping is
/// inactive (the ratio's own derivative is `w * grad log pi_E`). Gradients
/// flow through the scoring head always, and through the GRU when the
/// policy is configured end-to-end.
pub fn policy_gradient(policy: &ExplainPolicy, trajs: &[Trajectory], c_max: f64) -> Result<PolicyGrads> {
    let d_s = policy.gru.state_dim();
    let mut grads = PolicyGrads {
        gru: policy.gru.zeros_like(),
        w_p: Mat::zeros(policy.w_p.rows(), policy.w_p.cols()),
    };
    for traj in trajs {
        let caches = policy.unroll(traj)?;
        let t_len = traj.steps.len().max(1) as f64;
        // ds[t]: gradient of the objective w.r.t. s_t.
        let mut ds: Vec<Vec<f64>> = vec![vec![0.0; d_s]; traj.steps.len()];
        let mut discount = 1.0;
        for (t, (step, cache)) in traj.steps.iter().zip(&caches).enumerate() {
            let probs = policy_distribution(&policy.w_p, &cache.s, &step.action_embeds)?;
            if step.logging_propensity <= 0.0 {
                return Err(Error::Propensity(step.logging_propensity));
            }
            let ratio = probs[step.chosen] / step.logging_propensity;
            let clipped = ratio.clamp(0.0, c_max);
            let coeff = discount * clipped * step.reward / t_len;
            discount *= traj.gamma;
            if coeff == 0.0 {
                continue;
            }
            // grad log pi = W_p-bilinear of (e_a - sum_b pi_b e_b).
            let d_e = step.action_embeds.cols();
            let mut e_diff = step.action_embeds.row(step.chosen).to_vec();
            for (i, &p) in probs.iter().enumerate() {
                for (slot, &v) in e_diff.iter_mut().zip(step.action_embeds.row(i)) {
                    *slot -= p * v;
                }
            }
            let _ = d_e;
            grads.w_p.add_outer(coeff, &cache.s, &e_diff);
            if policy.end_to_end {
                let back = policy.w_p.matvec(&e_diff);
                for (slot, &v) in ds[t].iter_mut().zip(&back) {
                    *slot += coeff * v;
                }
            }
        }
        if policy.end_to_end {
            // Backprop through time, latest step first.
            let mut carry = vec![0.0; d_s];
            for t in (0..traj.steps.len()).rev() {
                let cache = &caches[t];
                let step = &traj.steps[t];
                let mut d_st = ds[t].clone();
                for (slot, &c) in d_st.iter_mut().zip(&carry) {
                    *slot += c;
                }
                let mut d_prev = vec![0.0; d_s];
                let du: Vec<f64> = (0..d_s)
                    .map(|j| (cache.s_hat[j] - cache.s_prev[j]) * d_st[j])
                    .collect();
                let d_hat: Vec<f64> = (0..d_s).map(|j| cache.u_gate[j] * d_st[j]).collect();
                for j in 0..d_s {
                    d_prev[j] += (1.0 - cache.u_gate[j]) * d_st[j];
                }
                // Candidate branch (tanh).
                let da3: Vec<f64> = (0..d_s)
                    .map(|j| (1.0 - cache.s_hat[j] * cache.s_hat[j]) * d_hat[j])
                    .collect();
                grads.gru.w[2].add_outer(1.0, &da3, &step.x);
                let rs = hadamard(&cache.r_gate, &cache.s_prev);
                grads.gru.u[2].add_outer(1.0, &da3, &rs);
                for (b, &g) in grads.gru.b[2].iter_mut().zip(&da3) {
                    *b += g;
                }
                let back3 = policy.gru.u[2].matvec_t(&da3);
                let dr: Vec<f64> = (0..d_s).map(|j| back3[j] * cache.s_prev[j]).collect();
                for j in 0..d_s {
                    d_prev[j] += back3[j] * cache.r_gate[j];
                }
                // Gates (logistic).
                let da1: Vec<f64> = (0..d_s)
                    .map(|j| cache.u_gate[j] * (1.0 - cache.u_gate[j]) * du[j])
                    .collect();
                let da2: Vec<f64> = (0..d_s)
                    .map(|j| cache.r_gate[j] * (1.0 - cache.r_gate[j]) * dr[j])
                    .collect();
                grads.gru.w[0].add_outer(1.0, &da1, &step.x);
                grads.gru.u[0].add_outer(1.0, &da1, &cache.s_prev);
                grads.gru.w[1].add_outer(1.0, &da2, &step.x);
                grads.gru.u[1].add_outer(1.0, &da2, &cache.s_prev);
                for j in 0..d_s {
                    grads.gru.b[0][j] += da1[j];
                    grads.gru.b[1][j] += da2[j];
                }
                let b1 = policy.gru.u[0].matvec_t(&da1);
                let b2 = policy.gru.u[1].matvec_t(&da2);
                for j in 0..d_s {
                    d_prev[j] += b1[j] + b2[j];
                }
                carry = d_prev;
            }
        }
    }
    Ok(grads)
}

/// One gradient-ascent step on the CRM objective over a trajectory batch.
pub fn reinforce_step(
    policy: &mut ExplainPolicy,
    trajs: &[Trajectory],
    learning_rate: f64,
    c_max: f64,
) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::EmptyInput("trajectory batch".into()));
    }
    let grads = policy_gradient(policy, trajs, c_max)?;
    let finite = grads.w_p.is_finite()
        && grads.gru.w.iter().all(Mat::is_finite)
        && grads.gru.u.iter().all(Mat::is_finite)
        && grads.gru.b.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Training {
            epoch: 0,
            msg: "non-finite policy gradient".into(),
        });
    }
    policy.w_p.add_scaled(learning_rate, &grads.w_p);
    if policy.end_to_end {
        for i in 0..3 {
            policy.gru.w[i].add_scaled(learning_rate, &grads.gru.w[i]);
            policy.gru.u[i].add_scaled(learning_rate, &grads.gru.u[i]);
            for (b, &g) in policy.gru.b[i].iter_mut().zip(&grads.gru.b[i]) {
                *b += learning_rate * g;
            }
        }
    }
    Ok(())
}

/// Explanation-policy training hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct CfeConfig {
    pub state_dim: usize,
    pub top_k: usize,
    /// Attention-pruned candidate set size n.
    pub candidate_size: usize,
    pub episode_len: usize,
    pub episodes: usize,
    pub gamma: f64,
    pub c_max: f64,
    pub learning_rate: f64,
    pub end_to_end: bool,
    pub seed: u64,
}

impl Default for CfeConfig {
    fn default() -> Self {
        CfeConfig {
            state_dim: 32,
            top_k: 20,
            candidate_size: 12,
            episode_len: 5,
            episodes: 200,
            gamma: 0.9,
            c_max: 10.0,
            learning_rate: 0.05,
            end_to_end: true,
            seed: 0,
        }
    }
}

fn embed_rows(embeddings: &EmbeddingTable, nodes: &[NodeRef]) -> Result<Mat> {
    let mut m = Mat::zeros(nodes.len(), embeddings.dim());
    for (i, node) in nodes.iter().enumerate() {
        m.row_mut(i).copy_from_slice(embeddings.get(node)?);
    }
    Ok(m)
}

/// Fuse each active attribute's embedding into every owner's factor row
/// (element-wise product), attributes applied in ascending (kind, id)
/// order. Rows of users or items absent from the factor index are skipped.
pub fn fuse_owned(
    factors: &LatentFactors,
    embeddings: &EmbeddingTable,
    hin: &Hin,
    active: &BTreeSet<NodeRef>,
) -> Result<LatentFactors> {
    let mut fused = factors.clone();
    let d = fused.dim();
    for attr in active {
        let e = embeddings.get(attr)?;
        if e.len() != d {
            return Err(Error::Shape(format!(
                "embedding dim {} != factor dim {d}",
                e.len()
            )));
        }
        for owner in hin.attribute_owners(attr)? {
            let row = match owner.kind {
                NodeKind::User => factors
                    .user_index
                    .index_of(owner.id)
                    .map(|i| fused.users.row_mut(i)),
                NodeKind::Item => factors
                    .item_index
                    .index_of(owner.id)
                    .map(|i| fused.items.row_mut(i)),
                _ => None,
            };
            if let Some(row) = row {
                for (x, &v) in row.iter_mut().zip(e) {
                    *x *= v;
                }
            }
        }
    }
    Ok(fused)
}

fn user_disparity(rec: &RecList, groups: &GroupSplit, dcfg: &DisparityConfig) -> f64 {
    disparity(std::slice::from_ref(rec), groups, dcfg)
}

/// Everything the rollout and extraction loops need read-only.
pub struct CfeContext<'a> {
    pub hin: &'a Hin,
    pub factors: &'a LatentFactors,
    pub embeddings: &'a EmbeddingTable,
    pub groups: &'a GroupSplit,
    pub dcfg: &'a DisparityConfig,
    pub exclude: &'a std::collections::HashMap<u32, BTreeSet<u32>>,
}

impl CfeContext<'_> {
    fn rank(&self, factors: &LatentFactors, user: u32, k: usize) -> Result<RecList> {
        let empty = BTreeSet::new();
        let exclude = self.exclude.get(&user).unwrap_or(&empty);
        top_k(factors, user, k, exclude)
    }
}

/// Roll out one episode for `user` under the exploration (logging) policy:
/// uniform over the pruned candidate set. The rollout starts from the
/// all-attributes fused state; each action removes one attribute from the
/// active set, re-fuses the remainder from pristine factors and re-ranks,
/// so the counterfactual asks what the list looks like with the attribute
/// absent. Returns None when the user has no candidate attributes at the
/// first step.
pub fn run_episode(
    ctx: &CfeContext,
    policy: &ExplainPolicy,
    cfg: &CfeConfig,
    user: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Trajectory>> {
    let mut active: BTreeSet<NodeRef> = ctx.hin.attributes().into_iter().collect();
    let mut fused = fuse_owned(ctx.factors, ctx.embeddings, ctx.hin, &active)?;
    let mut rec = ctx.rank(&fused, user, cfg.top_k)?;
    let mut s = vec![0.0; policy.gru.state_dim()];
    let mut steps = Vec::new();
    for _ in 0..cfg.episode_len {
        let items: Vec<u32> = rec.item_ids().collect();
        let x = state_input(ctx.embeddings, &items)?;
        let cache = encode_state(&policy.gru, &s, &x)?;
        s = cache.s.clone();
        let attrs: Vec<NodeRef> = candidate_attributes(ctx.hin, user, &items)?
            .into_iter()
            .filter(|a| active.contains(a))
            .collect();
        if attrs.is_empty() {
            break;
        }
        let attr_embeds = embed_rows(ctx.embeddings, &attrs)?;
        let weights = attention_scores(&policy.attn, &s, &attr_embeds)?;
        let cand = prune_actions(&attrs, &weights, cfg.candidate_size);
        let cand_embeds = embed_rows(ctx.embeddings, &cand.actions)?;
        // Logging policy: uniform over the pruned candidates.
        let chosen = rng.gen_range(0..cand.actions.len());
        let logging_propensity = 1.0 / cand.actions.len() as f64;
        let attr = cand.actions[chosen];
        let delta_before = user_disparity(&rec, ctx.groups, ctx.dcfg);
        active.remove(&attr);
        let next = fuse_owned(ctx.factors, ctx.embeddings, ctx.hin, &active)?;
        let next_rec = ctx.rank(&next, user, cfg.top_k)?;
        let delta_after = user_disparity(&next_rec, ctx.groups, ctx.dcfg);
        let reward = counterfactual_reward(
            &fused,
            &next,
            user,
            &items,
            delta_before,
            delta_after,
            ctx.dcfg.epsilon,
        )?;
        steps.push(EpisodeStep {
            x,
            actions: cand.actions.clone(),
            action_embeds: cand_embeds,
            chosen,
            logging_propensity,
            reward,
        });
        fused = next;
        rec = next_rec;
    }
    if steps.is_empty() {
        return Ok(None);
    }
    Ok(Some(Trajectory {
        user: NodeRef::user(user),
        steps,
        gamma: cfg.gamma,
    }))
}

/// Train the explanation policy by episodic rollouts under the uniform
/// logging policy with IPS-corrected REINFORCE updates.
pub fn train_explainer(ctx: &CfeContext, cfg: &CfeConfig) -> Result<ExplainPolicy> {
    let d_e = ctx.embeddings.dim();
    let d_x = cfg.top_k * d_e;
    let mut policy = ExplainPolicy::init(d_x, cfg.state_dim, d_e, cfg.end_to_end, cfg.seed);
    let users = ctx.factors.user_index.ids().to_vec();
    if users.is_empty() {
        return Err(Error::EmptyInput("no users to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut skipped = 0usize;
    let mut reward_acc = 0.0;
    let mut reward_n = 0usize;
    for episode in 0..cfg.episodes {
        let user = users[rng.gen_range(0..users.len())];
        match run_episode(ctx, &policy, cfg, user, &mut rng)? {
            Some(traj) => {
                reward_acc += traj.steps.iter().map(|s| s.reward).sum::<f64>();
                reward_n += traj.steps.len();
                reinforce_step(&mut policy, &[traj], cfg.learning_rate, cfg.c_max)?;
            }
            None => {
                skipped += 1;
                log::debug!("episode {episode}: user {user} has no candidate attributes");
            }
        }
    }
    if reward_n > 0 {
        log::debug!(
            "explainer training: mean step reward {:.4} over {} steps ({} episodes skipped)",
            reward_acc / reward_n as f64,
            reward_n,
            skipped
        );
    }
    Ok(policy)
}

/// A ranked counterfactual explanation for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationSet {
    pub user: NodeRef,
    /// Removal order with the per-step disparity drop each attribute
    /// achieved when it was erased.
    pub attributes: Vec<(NodeRef, f64)>,
    /// Whether the set reached the configured disparity-reduction target.
    pub valid: bool,
}

/// Disparity of the user's list while sequentially removing `attrs` from
/// the all-attributes fused state (re-fuse the remainder from pristine
/// factors, re-rank, repeat). Returns the initial disparity and the
/// disparity after each removal.
pub fn deploy_sequence(
    ctx: &CfeContext,
    user: u32,
    k: usize,
    attrs: &[NodeRef],
) -> Result<(f64, Vec<f64>)> {
    let mut active: BTreeSet<NodeRef> = ctx.hin.attributes().into_iter().collect();
    let fused = fuse_owned(ctx.factors, ctx.embeddings, ctx.hin, &active)?;
    let rec = ctx.rank(&fused, user, k)?;
    let initial = user_disparity(&rec, ctx.groups, ctx.dcfg);
    let mut after = Vec::with_capacity(attrs.len());
    for attr in attrs {
        active.remove(attr);
        let fused = fuse_owned(ctx.factors, ctx.embeddings, ctx.hin, &active)?;
        let rec = ctx.rank(&fused, user, k)?;
        after.push(user_disparity(&rec, ctx.groups, ctx.dcfg));
    }
    Ok((initial, after))
}

/// Greedy argmax rollout removing attributes from the all-attributes fused
/// state until the cumulative disparity reduction reaches epsilon or the
/// budget is exhausted, then truncated to the shortest valid prefix.
pub fn extract_explanations(
    ctx: &CfeContext,
    policy: &ExplainPolicy,
    cfg: &CfeConfig,
    user: u32,
    budget: usize,
) -> Result<ExplanationSet> {
    let mut active: BTreeSet<NodeRef> = ctx.hin.attributes().into_iter().collect();
    let fused = fuse_owned(ctx.factors, ctx.embeddings, ctx.hin, &active)?;
    let mut rec = ctx.rank(&fused, user, cfg.top_k)?;
    let initial = user_disparity(&rec, ctx.groups, ctx.dcfg);
    let mut s = vec![0.0; policy.gru.state_dim()];
    let mut deployed: Vec<(NodeRef, f64)> = Vec::new();
    let mut current = initial;
    while deployed.len() < budget {
        let items: Vec<u32> = rec.item_ids().collect();
        let x = state_input(ctx.embeddings, &items)?;
        let cache = encode_state(&policy.gru, &s, &x)?;
        s = cache.s.clone();
        let attrs: Vec<NodeRef> = candidate_attributes(ctx.hin, user, &items)?
            .into_iter()
            .filter(|a| active.contains(a))
            .collect();
        if attrs.is_empty() {
            break;
        }
        let attr_embeds = embed_rows(ctx.embeddings, &attrs)?;
        let weights = attention_scores(&policy.attn, &s, &attr_embeds)?;
        let cand = prune_actions(&attrs, &weights, cfg.candidate_size);
        let cand_embeds = embed_rows(ctx.embeddings, &cand.actions)?;
        let probs = policy_distribution(&policy.w_p, &s, &cand_embeds)?;
        // Argmax with ties by ascending attribute id.
        let mut best = 0;
        for i in 1..probs.len() {
            if probs[i] > probs[best]
                || (probs[i] == probs[best] && cand.actions[i] < cand.actions[best])
            {
                best = i;
            }
        }
        let attr = cand.actions[best];
        active.remove(&attr);
        let next_fused = fuse_owned(ctx.factors, ctx.embeddings, ctx.hin, &active)?;
        rec = ctx.rank(&next_fused, user, cfg.top_k)?;
        let next = user_disparity(&rec, ctx.groups, ctx.dcfg);
        deployed.push((attr, current - next));
        current = next;
        if initial - current >= ctx.dcfg.epsilon && ctx.dcfg.epsilon > 0.0 {
            break;
        }
        if ctx.dcfg.epsilon == 0.0 {
            // Zero threshold: the first deployment already satisfies it.
            break;
        }
    }
    let valid = initial - current >= ctx.dcfg.epsilon && !deployed.is_empty();
    if valid {
        // Minimality: truncate to the shortest prefix that still clears
        // the threshold when replayed from the all-attributes fused state.
        let attrs: Vec<NodeRef> = deployed.iter().map(|(a, _)| *a).collect();
        for prefix in 1..attrs.len() {
            let (init, after) = deploy_sequence(ctx, user, cfg.top_k, &attrs[..prefix])?;
            if init - after[prefix - 1] >= ctx.dcfg.epsilon {
                deployed.truncate(prefix);
                break;
            }
        }
    }
    Ok(ExplanationSet {
        user: NodeRef::user(user),
        attributes: deployed,
        valid,
    })
}

/// JSON-lines export: one object per user.
pub fn export_explanations(sets: &[ExplanationSet], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for set in sets {
        let attrs: Vec<serde_json::Value> = set
            .attributes
            .iter()
            .map(|(a, drop)| {
                serde_json::json!({
                    "id": a.id,
                    "kind": a.kind.as_str(),
                    "disparity_drop": drop,
                })
            })
            .collect();
        let obj = serde_json::json!({
            "user_id": set.user.id,
            "attributes": attrs,
            "valid": set.valid,
        });
        writeln!(f, "{obj}")?;
    }
    Ok(())
}

/// Read an explanation export back (inverse of `export_explanations`).
pub fn import_explanations(path: &Path) -> Result<Vec<ExplanationSet>> {
    let text = std::fs::read_to_string(path)?;
    let mut sets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: msg.to_string(),
        };
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
        let user = v["user_id"].as_u64().ok_or_else(|| bad("missing user_id"))? as u32;
        let mut attributes = Vec::new();
        for a in v["attributes"].as_array().ok_or_else(|| bad("missing attributes"))? {
            let id = a["id"].as_u64().ok_or_else(|| bad("missing attribute id"))? as u32;
            let kind = a["kind"]
                .as_str()
                .and_then(NodeKind::parse)
                .ok_or_else(|| bad("bad attribute kind"))?;
            let drop = a["disparity_drop"].as_f64().unwrap_or(0.0);
            attributes.push((NodeRef { kind, id }, drop));
        }
        let valid = v["valid"].as_bool().ok_or_else(|| bad("missing valid flag"))?;
        sets.push(ExplanationSet {
            user: NodeRef::user(user),
            attributes,
            valid,
        });
    }
    Ok(sets)
}

pub fn policy_to_checkpoint(policy: &ExplainPolicy) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set("kind", "policy");
    ck.set("state_dim", policy.gru.state_dim());
    ck.set("input_dim", policy.gru.input_dim());
    ck.set("embed_dim", policy.w_p.cols());
    ck.set("end_to_end", policy.end_to_end);
    for i in 0..3 {
        ck.push_tensor(&format!("gru_w{i}"), policy.gru.w[i].clone());
        ck.push_tensor(&format!("gru_u{i}"), policy.gru.u[i].clone());
        ck.push_tensor(
            &format!("gru_b{i}"),
            Mat::from_vec(1, policy.gru.b[i].len(), policy.gru.b[i].clone()).unwrap(),
        );
    }
    ck.push_tensor("attn_ws", policy.attn.w_s.clone());
    ck.push_tensor("attn_wh", policy.attn.w_h.clone());
    ck.push_tensor(
        "attn_b",
        Mat::from_vec(1, policy.attn.b.len(), policy.attn.b.clone()).unwrap(),
    );
    ck.push_tensor("w_p", policy.w_p.clone());
    ck
}

pub fn policy_from_checkpoint(ck: &Checkpoint) -> Result<ExplainPolicy> {
    let row = |name: &str| -> Result<Vec<f64>> { Ok(ck.tensor(name)?.row(0).to_vec()) };
    let gru = GruParams {
        w: [
            ck.tensor("gru_w0")?.clone(),
            ck.tensor("gru_w1")?.clone(),
            ck.tensor("gru_w2")?.clone(),
        ],
        u: [
            ck.tensor("gru_u0")?.clone(),
            ck.tensor("gru_u1")?.clone(),
            ck.tensor("gru_u2")?.clone(),
        ],
        b: [row("gru_b0")?, row("gru_b1")?, row("gru_b2")?],
    };
    Ok(ExplainPolicy {
        gru,
        attn: AttnParams {
            w_s: ck.tensor("attn_ws")?.clone(),
            w_h: ck.tensor("attn_wh")?.clone(),
            b: row("attn_b")?,
        },
        w_p: ck.tensor("w_p")?.clone(),
        end_to_end: ck.get_parsed("end_to_end")?,
    })
}
