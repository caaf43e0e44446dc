//! Item-group construction, exposure counting, fairness disparity, and the
//! ranking/fairness evaluation metrics.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::hin::{InteractionLog, NodeRef};

/// One user's Top-K list with scores, highest first.
#[derive(Debug, Clone, PartialEq)]
pub struct RecList {
    pub user: NodeRef,
    pub items: Vec<(u32, f64)>,
}

impl RecList {
    pub fn item_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().map(|(id, _)| *id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Head (popular) vs long-tail item groups.
#[derive(Debug, Clone)]
pub struct GroupSplit {
    pub head: BTreeSet<u32>,
    pub tail: BTreeSet<u32>,
    pub counts: HashMap<u32, usize>,
}

impl GroupSplit {
    pub fn num_items(&self) -> usize {
        self.head.len() + self.tail.len()
    }
}

/// Disparity and reward thresholds.
#[derive(Debug, Clone, Copy)]
pub struct DisparityConfig {
    /// Trade-off weight between the demographic-parity and exact-k terms.
    pub lambda: f64,
    /// Exact-k exposure maximum.
    pub alpha: f64,
    /// Disparity-change threshold consumed by the explanation model.
    pub epsilon: f64,
}

impl DisparityConfig {
    /// `lambda = 1`; `alpha` set to the head/tail size ratio of `groups`, the
    /// value at which a perfectly proportional allocation has zero disparity.
    pub fn defaults_for(groups: &GroupSplit) -> Self {
        let alpha = if groups.head.is_empty() {
            1.0
        } else {
            groups.tail.len() as f64 / groups.head.len() as f64
        };
        DisparityConfig {
            lambda: 1.0,
            alpha,
            epsilon: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.alpha <= 0.0 || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "invalid disparity config: lambda={} alpha={} epsilon={}",
                self.lambda, self.alpha, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-evaluation-point metric values.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FairnessReport {
    pub k: usize,
    pub ndcg: f64,
    pub hr: f64,
    pub ht: f64,
    pub gini: f64,
    pub disparity: f64,
}

/// Rank items by positive-interaction count descending; the top 20% (ceil,
/// ties broken by ascending item id) form the head group.
pub fn split_groups(train: &InteractionLog) -> GroupSplit {
    let mut counts: HashMap<u32, usize> = train.items().into_iter().map(|i| (i, 0)).collect();
    for r in train.positives() {
        *counts.entry(r.item).or_insert(0) += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.iter().map(|(&i, &c)| (i, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = ranked.len();
    let head_size = ((0.2 * n as f64).ceil() as usize).min(n);
    let head: BTreeSet<u32> = ranked[..head_size].iter().map(|(i, _)| *i).collect();
    let tail: BTreeSet<u32> = ranked[head_size..].iter().map(|(i, _)| *i).collect();
    GroupSplit { head, tail, counts }
}

/// Total occurrences of `group` items across all lists.
pub fn exposure(recs: &[RecList], group: &BTreeSet<u32>) -> usize {
    recs.iter()
        .flat_map(|r| r.item_ids())
        .filter(|i| group.contains(i))
        .count()
}

/// Fairness disparity: `|psi_dp| + lambda * |psi_ek|` with
/// `psi_dp = |G1| * Exp(G0) - |G0| * Exp(G1)` and
/// `psi_ek = alpha * Exp(G0) - Exp(G1)`.
pub fn disparity(recs: &[RecList], groups: &GroupSplit, cfg: &DisparityConfig) -> f64 {
    let e0 = exposure(recs, &groups.head) as f64;
    let e1 = exposure(recs, &groups.tail) as f64;
    let psi_dp = groups.tail.len() as f64 * e0 - groups.head.len() as f64 * e1;
    let psi_ek = cfg.alpha * e0 - e1;
    psi_dp.abs() + cfg.lambda * psi_ek.abs()
}

/// Binary-relevance NDCG@K averaged over users with non-empty ground truth.
/// Gain 1, discount `1/log2(rank+1)`, ideal places the user's positives at
/// the best possible ranks within K.
pub fn ndcg_at_k(recs: &[RecList], truth: &HashMap<u32, BTreeSet<u32>>, k: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in recs {
        let Some(pos) = truth.get(&rec.user.id) else {
            continue;
        };
        if pos.is_empty() {
            continue;
        }
        let mut dcg = 0.0;
        for (rank, item) in rec.item_ids().take(k).enumerate() {
            if pos.contains(&item) {
                dcg += 1.0 / ((rank + 2) as f64).log2();
            }
        }
        let ideal_hits = pos.len().min(k);
        let idcg: f64 = (0..ideal_hits).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        sum += dcg / idcg;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of users (with non-empty ground truth) having at least one
/// positive in their Top-K.
pub fn hr_at_k(recs: &[RecList], truth: &HashMap<u32, BTreeSet<u32>>, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut n = 0usize;
    for rec in recs {
        let Some(pos) = truth.get(&rec.user.id) else {
            continue;
        };
        if pos.is_empty() {
            continue;
        }
        n += 1;
        if rec.item_ids().take(k).any(|i| pos.contains(&i)) {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Mean over lists of (head items in list) / K.
pub fn ht_at_k(recs: &[RecList], groups: &GroupSplit, k: usize) -> f64 {
    if recs.is_empty() {
        return 0.0;
    }
    let sum: f64 = recs
        .iter()
        .map(|r| r.item_ids().take(k).filter(|i| groups.head.contains(i)).count() as f64 / k as f64)
        .sum();
    sum / recs.len() as f64
}

/// Gini coefficient of per-item exposure counts over the full catalog,
/// zero-exposure items included. Zero when total exposure is zero.
pub fn gini_at_k(recs: &[RecList], catalog: &BTreeSet<u32>, k: usize) -> f64 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for rec in recs {
        for item in rec.item_ids().take(k) {
            *counts.entry(item).or_insert(0) += 1;
        }
    }
    let n = catalog.len();
    if n == 0 {
        return 0.0;
    }
    let mut xs: Vec<f64> = catalog
        .iter()
        .map(|i| counts.get(i).copied().unwrap_or(0) as f64)
        .collect();
    let total: f64 = xs.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    // Sorted form of sum_i sum_j |x_i - x_j| / (2 n total).
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut acc = 0.0;
    for (rank, x) in xs.iter().enumerate() {
        acc += (2.0 * (rank as f64 + 1.0) - n as f64 - 1.0) * x;
    }
    acc / (n as f64 * total)
}

/// All metrics for one set of lists at one evaluation point.
pub fn evaluate(
    recs: &[RecList],
    truth: &HashMap<u32, BTreeSet<u32>>,
    groups: &GroupSplit,
    catalog: &BTreeSet<u32>,
    cfg: &DisparityConfig,
    k: usize,
) -> FairnessReport {
    FairnessReport {
        k,
        ndcg: ndcg_at_k(recs, truth, k),
        hr: hr_at_k(recs, truth, k),
        ht: ht_at_k(recs, groups, k),
        gini: gini_at_k(recs, catalog, k),
        disparity: disparity(recs, groups, cfg),
    }
}
