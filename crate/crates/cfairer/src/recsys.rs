//! Matrix-factorization recommender: SGD training on a logistic
//! cross-entropy objective, Top-K list generation, and element-wise
//! counterfactual fusion of attribute embeddings.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fairness::RecList;
use crate::hin::{InteractionLog, NodeRef};
use crate::linalg::{dot, sigmoid, Mat};

/// Maps raw external ids to dense row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct IdIndex {
    ids: Vec<u32>,
    pos: HashMap<u32, usize>,
}

impl IdIndex {
    pub fn from_ids(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        let pos = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        IdIndex { ids, pos }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.pos.get(&id).copied()
    }

    pub fn id_at(&self, idx: usize) -> u32 {
        self.ids[idx]
    }
}

/// Trained user/item factor matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    pub users: Mat,
    pub items: Mat,
    pub user_index: IdIndex,
    pub item_index: IdIndex,
}

impl LatentFactors {
    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn num_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_index.len()
    }

    pub fn user_row(&self, user: u32) -> Result<&[f64]> {
        let idx = self
            .user_index
            .index_of(user)
            .ok_or_else(|| Error::Reference(format!("unknown user {user}")))?;
        Ok(self.users.row(idx))
    }

    pub fn item_row(&self, item: u32) -> Result<&[f64]> {
        let idx = self
            .item_index
            .index_of(item)
            .ok_or_else(|| Error::Reference(format!("unknown item {item}")))?;
        Ok(self.items.row(idx))
    }
}

/// Hyperparameters for MF training.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    /// Uniformly sampled unseen items per positive, per epoch.
    pub negative_ratio: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 128,
            learning_rate: 0.05,
            l2: 1e-4,
            epochs: 30,
            negative_ratio: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Raw inner product of user and item factors. The logistic squashing is
/// applied only inside the loss; ranking uses the raw score.
pub fn predict_score(factors: &LatentFactors, user: u32, item: u32) -> Result<f64> {
    Ok(dot(factors.user_row(user)?, factors.item_row(item)?))
}

fn init_factors(log: &InteractionLog, cfg: &TrainConfig) -> LatentFactors {
    let user_index = IdIndex::from_ids(log.users());
    let item_index = IdIndex::from_ids(log.items());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let users = Mat::uniform(user_index.len(), cfg.dim, -0.01, 0.01, &mut rng);
    let items = Mat::uniform(item_index.len(), cfg.dim, -0.01, 0.01, &mut rng);
    LatentFactors {
        users,
        items,
        user_index,
        item_index,
    }
}

/// Cross-entropy over observed labels plus sampled negatives, with the
/// inner product squashed through a logistic. Returns (loss, sample count).
fn epoch_samples(
    log: &InteractionLog,
    factors: &LatentFactors,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, f64)> {
    let n_items = factors.item_index.len();
    let seen = log.positive_items_by_user();
    let mut samples: Vec<(usize, usize, f64)> = Vec::new();
    for r in &log.records {
        let u = factors.user_index.index_of(r.user).unwrap();
        let v = factors.item_index.index_of(r.item).unwrap();
        samples.push((u, v, r.rating));
        if r.rating > 0.0 {
            let user_seen = seen.get(&r.user);
            for _ in 0..cfg.negative_ratio {
                // Rejection-sample an unseen item; give up after a few tries
                // when the user has seen almost the whole catalog.
                let mut neg = rng.gen_range(0..n_items);
                for _ in 0..10 {
                    let id = factors.item_index.id_at(neg);
                    if user_seen.map_or(true, |s| !s.contains(&id)) {
                        break;
                    }
                    neg = rng.gen_range(0..n_items);
                }
                samples.push((u, neg, 0.0));
            }
        }
    }
    samples.shuffle(rng);
    samples
}

/// Loss of the current factors over a fixed sample set.
pub fn mf_loss(factors: &LatentFactors, samples: &[(usize, usize, f64)], l2: f64) -> f64 {
    let mut loss = 0.0;
    for &(u, v, y) in samples {
        let p = sigmoid(dot(factors.users.row(u), factors.items.row(v)));
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        loss += 0.5
            * l2
            * (dot(factors.users.row(u), factors.users.row(u))
                + dot(factors.items.row(v), factors.items.row(v)));
    }
    loss
}

/// Analytic gradient of `mf_loss` with respect to every factor entry.
/// Shared by training and the finite-difference checks.
pub fn mf_loss_grad(
    factors: &LatentFactors,
    samples: &[(usize, usize, f64)],
    l2: f64,
) -> (Mat, Mat) {
    let d = factors.dim();
    let mut gu = Mat::zeros(factors.users.rows(), d);
    let mut gv = Mat::zeros(factors.items.rows(), d);
    for &(u, v, y) in samples {
        let urow = factors.users.row(u);
        let vrow = factors.items.row(v);
        let err = sigmoid(dot(urow, vrow)) - y;
        for j in 0..d {
            gu.row_mut(u)[j] += err * vrow[j] + l2 * urow[j];
            gv.row_mut(v)[j] += err * urow[j] + l2 * vrow[j];
        }
    }
    (gu, gv)
}

/// SGD on the logistic cross-entropy objective. Deterministic given the seed.
pub fn train_mf(train: &InteractionLog, cfg: &TrainConfig) -> Result<LatentFactors> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training log".into()));
    }
    let mut factors = init_factors(train, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut first_epoch_loss = None;
    let mut last_epoch_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let samples = epoch_samples(train, &factors, cfg, &mut rng);
        let mut loss = 0.0;
        for &(u, v, y) in &samples {
            let score = dot(factors.users.row(u), factors.items.row(v));
            let p = sigmoid(score).clamp(1e-12, 1.0 - 1e-12);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            let err = sigmoid(score) - y;
            let d = cfg.dim;
            for j in 0..d {
                let uj = factors.users.get(u, j);
                let vj = factors.items.get(v, j);
                factors
                    .users
                    .set(u, j, uj - cfg.learning_rate * (err * vj + cfg.l2 * uj));
                factors
                    .items
                    .set(v, j, vj - cfg.learning_rate * (err * uj + cfg.l2 * vj));
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: "non-finite loss".into(),
            });
        }
        first_epoch_loss.get_or_insert(loss);
        last_epoch_loss = loss;
    }
    if let Some(first) = first_epoch_loss {
        log::debug!("mf training loss: first epoch {first:.4}, last epoch {last_epoch_loss:.4}");
    }
    Ok(factors)
}

/// K highest-scoring items for `user`, excluding `exclude`, ties broken by
/// ascending item id.
pub fn top_k(
    factors: &LatentFactors,
    user: u32,
    k: usize,
    exclude: &BTreeSet<u32>,
) -> Result<RecList> {
    assert!(k >= 1, "K must be at least 1");
    let urow = factors.user_row(user)?;
    let excluded_known = exclude
        .iter()
        .filter(|i| factors.item_index.index_of(**i).is_some())
        .count();
    if k > factors.num_items() - excluded_known {
        return Err(Error::Capacity(format!(
            "K={k} exceeds {} candidate items",
            factors.num_items() - excluded_known
        )));
    }
    let mut scored: Vec<(u32, f64)> = (0..factors.num_items())
        .filter_map(|idx| {
            let id = factors.item_index.id_at(idx);
            if exclude.contains(&id) {
                None
            } else {
                Some((id, dot(urow, factors.items.row(idx))))
            }
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(RecList {
        user: NodeRef::user(user),
        items: scored,
    })
}

/// Which side of the factor matrices a fused attribute touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionSide {
    User,
    Item,
}

/// Element-wise product fusion of an attribute embedding. User-side: the
/// state's user row only. Item-side: every item in the state's rec list.
/// Other rows are untouched; the input is not mutated, so repeated fusion
/// accumulates by feeding the previous output back in.
pub fn fuse(
    factors: &LatentFactors,
    user: u32,
    rec_items: &[u32],
    embedding: &[f64],
    side: FusionSide,
) -> Result<LatentFactors> {
    if embedding.len() != factors.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} != factor dim {}",
            embedding.len(),
            factors.dim()
        )));
    }
    let mut out = factors.clone();
    match side {
        FusionSide::User => {
            let idx = factors
                .user_index
                .index_of(user)
                .ok_or_else(|| Error::Reference(format!("unknown user {user}")))?;
            for (x, e) in out.users.row_mut(idx).iter_mut().zip(embedding) {
                *x *= e;
            }
        }
        FusionSide::Item => {
            for &item in rec_items {
                let idx = factors
                    .item_index
                    .index_of(item)
                    .ok_or_else(|| Error::Reference(format!("unknown item {item}")))?;
                for (x, e) in out.items.row_mut(idx).iter_mut().zip(embedding) {
                    *x *= e;
                }
            }
        }
    }
    Ok(out)
}

/// Persist factors (with id maps) in the shared checkpoint container.
pub fn factors_to_checkpoint(f: &LatentFactors) -> crate::checkpoint::Checkpoint {
    let mut ck = crate::checkpoint::Checkpoint::new();
    ck.set("kind", "factors");
    ck.set("dim", f.dim());
    let ids_tensor = |ids: &[u32]| {
        Mat::from_vec(1, ids.len(), ids.iter().map(|&v| v as f64).collect()).unwrap()
    };
    ck.push_tensor("user_ids", ids_tensor(f.user_index.ids()));
    ck.push_tensor("item_ids", ids_tensor(f.item_index.ids()));
    ck.push_tensor("users", f.users.clone());
    ck.push_tensor("items", f.items.clone());
    ck
}

pub fn factors_from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<LatentFactors> {
    let ids = |name: &str| -> Result<Vec<u32>> {
        Ok(ck.tensor(name)?.row(0).iter().map(|&v| v as u32).collect())
    };
    Ok(LatentFactors {
        users: ck.tensor("users")?.clone(),
        items: ck.tensor("items")?.clone(),
        user_index: IdIndex::from_ids(ids("user_ids")?),
        item_index: IdIndex::from_ids(ids("item_ids")?),
    })
}
