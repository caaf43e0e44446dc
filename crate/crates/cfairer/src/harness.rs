//! Evaluation harness: synthetic dataset generation with a long-tailed
//! popularity profile and planted biased attributes, heuristic explanation
//! baselines, the attribute-erasure evaluation protocol, and report export.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cfe::{fuse_owned, ExplanationSet};
use crate::error::{Error, Result};
use crate::fairness::{evaluate, split_groups, DisparityConfig, FairnessReport, GroupSplit, RecList};
use crate::graphrep::EmbeddingTable;
use crate::hin::{Hin, Interaction, InteractionLog, NodeKind, NodeRef};
use crate::recsys::{top_k, LatentFactors};

/// Synthetic dataset shape.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub user_attrs: usize,
    pub item_attrs: usize,
    /// Interaction draws; duplicates are skipped, so the log may be smaller.
    pub interactions: usize,
    /// Power-law exponent of item popularity (0 = uniform).
    pub skew: f64,
    /// Item attributes attached to (nearly) every head item and few tail items.
    pub planted_attrs: usize,
    /// Neutral high-frequency item attributes attached across both groups.
    pub hub_attrs: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 200,
            items: 300,
            user_attrs: 10,
            item_attrs: 40,
            interactions: 10_000,
            skew: 1.5,
            planted_attrs: 3,
            hub_attrs: 4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.interactions == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.skew < 0.0 {
            return Err(Error::Config("skew exponent must be non-negative".into()));
        }
        if self.planted_attrs + self.hub_attrs > self.item_attrs {
            return Err(Error::Config(
                "planted + hub attributes exceed the item-attribute count".into(),
            ));
        }
        Ok(())
    }
}

/// Generated log plus attribute edge lists in the loader format.
pub struct SyntheticData {
    pub log: InteractionLog,
    pub user_attr_edges: Vec<(u32, u32, String)>,
    pub item_attr_edges: Vec<(u32, u32, String)>,
}

/// Deterministic synthetic dataset: item popularity follows a power law
/// with the configured exponent; planted attributes attach to every head
/// item and at most 10% of tail items.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Cumulative popularity weights w_i = (i+1)^-skew.
    let weights: Vec<f64> = (0..cfg.items)
        .map(|i| ((i + 1) as f64).powf(-cfg.skew))
        .collect();
    let mut cum = Vec::with_capacity(cfg.items);
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cum.push(acc);
    }
    let total = acc;

    let mut seen: HashSet<(u32, u32)> = HashSet::new();
    let mut records = Vec::new();
    for t in 0..cfg.interactions {
        let user = rng.gen_range(0..cfg.users) as u32;
        let draw = rng.gen_range(0.0..total);
        let item = cum.partition_point(|&c| c < draw).min(cfg.items - 1) as u32;
        if seen.insert((user, item)) {
            // Rating 5 so the standard binarization threshold keeps these
            // as positives when the log goes through the preprocessing path.
            records.push(Interaction {
                user,
                item,
                rating: 5.0,
                timestamp: t as i64,
            });
        }
    }
    let log = InteractionLog::new(records);

    let groups = split_groups(&log);
    let tail: Vec<u32> = groups.tail.iter().copied().collect();
    let mut item_attr_edges: Vec<(u32, u32, String)> = Vec::new();
    let attach = |item: u32, attr: u32, edges: &mut Vec<(u32, u32, String)>| {
        edges.push((item, attr, "tagged".to_string()));
    };
    for a in 0..cfg.planted_attrs as u32 {
        for &item in &groups.head {
            attach(item, a, &mut item_attr_edges);
        }
        let tail_quota = tail.len() / 10;
        for _ in 0..tail_quota {
            let item = tail[rng.gen_range(0..tail.len())];
            attach(item, a, &mut item_attr_edges);
        }
    }
    let all_items: Vec<u32> = log.items();
    for a in cfg.planted_attrs as u32..(cfg.planted_attrs + cfg.hub_attrs) as u32 {
        for &item in &all_items {
            if rng.gen_bool(0.6) {
                attach(item, a, &mut item_attr_edges);
            }
        }
    }
    for a in (cfg.planted_attrs + cfg.hub_attrs) as u32..cfg.item_attrs as u32 {
        let n = rng.gen_range(1..=3);
        for _ in 0..n {
            let item = all_items[rng.gen_range(0..all_items.len())];
            attach(item, a, &mut item_attr_edges);
        }
    }
    item_attr_edges.sort();
    item_attr_edges.dedup();

    let mut user_attr_edges: Vec<(u32, u32, String)> = Vec::new();
    if cfg.user_attrs > 0 {
        for &user in &log.users() {
            let n = rng.gen_range(1..=2usize.min(cfg.user_attrs));
            for _ in 0..n {
                let attr = rng.gen_range(0..cfg.user_attrs) as u32;
                user_attr_edges.push((user, attr, "has".to_string()));
            }
        }
        user_attr_edges.sort();
        user_attr_edges.dedup();
    }

    Ok(SyntheticData {
        log,
        user_attr_edges,
        item_attr_edges,
    })
}

/// Random-explanation baseline: uniform attribute selection without
/// replacement for each user.
pub fn baseline_rdexp(
    space: &[NodeRef],
    users: &[u32],
    budget: usize,
    seed: u64,
) -> Vec<ExplanationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users
        .iter()
        .map(|&user| {
            let mut pool: Vec<NodeRef> = space.to_vec();
            let mut picked = Vec::new();
            while picked.len() < budget && !pool.is_empty() {
                let idx = rng.gen_range(0..pool.len());
                picked.push((pool.swap_remove(idx), 0.0));
            }
            ExplanationSet {
                user: NodeRef::user(user),
                attributes: picked,
                valid: false,
            }
        })
        .collect()
}

/// Which attribute side a popularity baseline ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopSide {
    User,
    Item,
}

/// Popularity baseline: attributes of the chosen side ranked by the number
/// of positive interactions whose user/item carries them, descending, ties
/// by ascending id. Every user receives the same ranked list.
pub fn baseline_pop(
    side: PopSide,
    log: &InteractionLog,
    user_attr_edges: &[(u32, u32, String)],
    item_attr_edges: &[(u32, u32, String)],
    users: &[u32],
    budget: usize,
) -> Vec<ExplanationSet> {
    let (edges, kind) = match side {
        PopSide::User => (user_attr_edges, NodeKind::UserAttr),
        PopSide::Item => (item_attr_edges, NodeKind::ItemAttr),
    };
    let mut owner_attrs: HashMap<u32, Vec<u32>> = HashMap::new();
    for (owner, attr, _) in edges {
        owner_attrs.entry(*owner).or_default().push(*attr);
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for r in log.positives() {
        let owner = match side {
            PopSide::User => r.user,
            PopSide::Item => r.item,
        };
        if let Some(attrs) = owner_attrs.get(&owner) {
            for &a in attrs {
                *counts.entry(a).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(budget);
    let attrs: Vec<(NodeRef, f64)> = ranked
        .into_iter()
        .map(|(a, _)| (NodeRef { kind, id: a }, 0.0))
        .collect();
    users
        .iter()
        .map(|&user| ExplanationSet {
            user: NodeRef::user(user),
            attributes: attrs.clone(),
            valid: false,
        })
        .collect()
}

/// Shared read-only inputs of the erasure protocol.
pub struct EvalSetup<'a> {
    pub factors: &'a LatentFactors,
    pub embeddings: &'a EmbeddingTable,
    pub hin: &'a Hin,
    pub groups: &'a GroupSplit,
    pub dcfg: &'a DisparityConfig,
    /// Test positives per user.
    pub truth: &'a HashMap<u32, BTreeSet<u32>>,
    /// Seen (train-positive) items excluded from Top-K per user.
    pub exclude: &'a HashMap<u32, BTreeSet<u32>>,
    pub k: usize,
}

/// Fuse each active attribute's embedding into every owner's factor row
/// (element-wise product), attributes applied in ascending (kind, id) order.
pub fn fuse_all(setup: &EvalSetup, active: &BTreeSet<NodeRef>) -> Result<LatentFactors> {
    fuse_owned(setup.factors, setup.embeddings, setup.hin, active)
}

/// Top-K lists for every user under the given factors.
pub fn rank_all(setup: &EvalSetup, factors: &LatentFactors) -> Result<Vec<RecList>> {
    let empty = BTreeSet::new();
    factors
        .user_index
        .ids()
        .iter()
        .map(|&u| top_k(factors, u, setup.k, setup.exclude.get(&u).unwrap_or(&empty)))
        .collect()
}

fn evaluate_point(setup: &EvalSetup, recs: &[RecList]) -> FairnessReport {
    let catalog: BTreeSet<u32> = setup.factors.item_index.ids().iter().copied().collect();
    evaluate(recs, setup.truth, setup.groups, &catalog, setup.dcfg, setup.k)
}

/// Evaluation point zero: all attributes fused into their owners.
pub fn starting_point(setup: &EvalSetup) -> Result<(Vec<RecList>, FairnessReport)> {
    let active: BTreeSet<NodeRef> = setup.hin.attributes().into_iter().collect();
    let fused = fuse_all(setup, &active)?;
    let recs = rank_all(setup, &fused)?;
    let report = evaluate_point(setup, &recs);
    Ok((recs, report))
}

/// One method's erasure trajectory.
#[derive(Debug, Clone)]
pub struct ErasureCurve {
    pub method: String,
    pub erasure_length: usize,
    /// (cumulative erased attribute count, metrics) per point; point 0 is
    /// the all-attributes starting point.
    pub points: Vec<(usize, FairnessReport)>,
}

/// Erasure protocol: per point, remove each user's next-ranked explanation
/// attribute from the global fused set (top-E of each list considered),
/// re-fuse the remainder from pristine factors, re-rank, evaluate.
pub fn erase_and_evaluate(
    setup: &EvalSetup,
    explanations: &[ExplanationSet],
    erasure_length: usize,
    method: &str,
) -> Result<ErasureCurve> {
    let mut active: BTreeSet<NodeRef> = setup.hin.attributes().into_iter().collect();
    let fused = fuse_all(setup, &active)?;
    let recs = rank_all(setup, &fused)?;
    let mut points = vec![(0usize, evaluate_point(setup, &recs))];
    let mut erased = 0usize;
    for step in 0..erasure_length {
        let mut removed_any = false;
        for set in explanations {
            if let Some((attr, _)) = set.attributes.get(step) {
                if active.remove(attr) {
                    erased += 1;
                    removed_any = true;
                }
            }
        }
        let _ = removed_any;
        let fused = fuse_all(setup, &active)?;
        let recs = rank_all(setup, &fused)?;
        points.push((erased, evaluate_point(setup, &recs)));
    }
    Ok(ErasureCurve {
        method: method.to_string(),
        erasure_length,
        points,
    })
}

/// Report format selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// One row per (method, point): `method,erased,ndcg,hr,ht,gini,disparity`.
/// The JSON variant mirrors the same keys as an array of objects.
pub fn export_report(curves: &[ErasureCurve], path: &Path, format: ReportFormat) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Csv => {
            writeln!(f, "method,erased,ndcg,hr,ht,gini,disparity")?;
            for curve in curves {
                for (erased, r) in &curve.points {
                    writeln!(
                        f,
                        "{},{},{},{},{},{},{}",
                        curve.method, erased, r.ndcg, r.hr, r.ht, r.gini, r.disparity
                    )?;
                }
            }
        }
        ReportFormat::Json => {
            let rows: Vec<serde_json::Value> = curves
                .iter()
                .flat_map(|curve| {
                    curve.points.iter().map(move |(erased, r)| {
                        serde_json::json!({
                            "method": curve.method,
                            "erased": erased,
                            "ndcg": r.ndcg,
                            "hr": r.hr,
                            "ht": r.ht,
                            "gini": r.gini,
                            "disparity": r.disparity,
                        })
                    })
                })
                .collect();
            writeln!(f, "{}", serde_json::to_string_pretty(&rows)?)?;
        }
    }
    Ok(())
}

/// Read curves back from the CSV layout written by `export_report`. Rows
/// are grouped by method in file order; `k` is not stored in the file and
/// must be supplied.
pub fn import_report_csv(path: &Path, k: usize) -> Result<Vec<ErasureCurve>> {
    let text = std::fs::read_to_string(path)?;
    let mut curves: Vec<ErasureCurve> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 7 columns, got {}", fields.len()),
            });
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad number {:?}", fields[idx]),
            })
        };
        let erased = num(1)? as usize;
        let report = FairnessReport {
            k,
            ndcg: num(2)?,
            hr: num(3)?,
            ht: num(4)?,
            gini: num(5)?,
            disparity: num(6)?,
        };
        match curves.last_mut() {
            Some(c) if c.method == fields[0] => c.points.push((erased, report)),
            _ => curves.push(ErasureCurve {
                method: fields[0].to_string(),
                erasure_length: 0,
                points: vec![(erased, report)],
            }),
        }
    }
    for c in &mut curves {
        c.erasure_length = c.points.len().saturating_sub(1);
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::recsys::IdIndex;

    #[test]
    fn synthetic_zero_skew_is_roughly_uniform() {
        let cfg = SyntheticConfig {
            users: 100,
            items: 20,
            interactions: 10_000,
            skew: 0.0,
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for r in data.log.positives() {
            *counts.entry(r.item).or_insert(0) += 1;
        }
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert!((*max as f64) / (*min as f64) < 3.0, "max={max} min={min}");
    }

    #[test]
    fn synthetic_skew_concentrates_head_share() {
        let cfg = SyntheticConfig {
            users: 200,
            items: 100,
            interactions: 10_000,
            skew: 1.5,
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let groups = split_groups(&data.log);
        let total = data.log.positives().count() as f64;
        let head = data
            .log
            .positives()
            .filter(|r| groups.head.contains(&r.item))
            .count() as f64;
        assert!(head / total > 0.6, "head share {}", head / total);
    }

    #[test]
    fn synthetic_seed_determinism() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.user_attr_edges, b.user_attr_edges);
        assert_eq!(a.item_attr_edges, b.item_attr_edges);
    }

    #[test]
    fn synthetic_planted_attribute_coverage() {
        let cfg = SyntheticConfig::default();
        let data = generate_synthetic(&cfg).unwrap();
        let groups = split_groups(&data.log);
        for a in 0..cfg.planted_attrs as u32 {
            let tagged: BTreeSet<u32> = data
                .item_attr_edges
                .iter()
                .filter(|(_, attr, _)| *attr == a)
                .map(|(item, _, _)| *item)
                .collect();
            let head_cov = groups.head.iter().filter(|i| tagged.contains(i)).count() as f64
                / groups.head.len() as f64;
            let tail_cov = groups.tail.iter().filter(|i| tagged.contains(i)).count() as f64
                / groups.tail.len() as f64;
            assert!(head_cov >= 0.8, "attr {a}: head coverage {head_cov}");
            assert!(tail_cov <= 0.2, "attr {a}: tail coverage {tail_cov}");
        }
    }

    #[test]
    fn rdexp_full_budget_covers_space_and_repeats() {
        let space: Vec<NodeRef> = (0..6).map(NodeRef::item_attr).collect();
        let a = baseline_rdexp(&space, &[0, 1], 6, 3);
        for set in &a {
            let got: BTreeSet<NodeRef> = set.attributes.iter().map(|(n, _)| *n).collect();
            assert_eq!(got, space.iter().copied().collect());
        }
        let b = baseline_rdexp(&space, &[0, 1], 6, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn rdexp_first_pick_is_uniform() {
        // First-slot frequencies over many users, 3 sigma band around p=1/6.
        let space: Vec<NodeRef> = (0..6).map(NodeRef::item_attr).collect();
        let users: Vec<u32> = (0..10_000).collect();
        let sets = baseline_rdexp(&space, &users, 1, 9);
        let mut freq: HashMap<u32, usize> = HashMap::new();
        for s in &sets {
            *freq.entry(s.attributes[0].0.id).or_insert(0) += 1;
        }
        let n = users.len() as f64;
        let p = 1.0 / 6.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for a in 0..6u32 {
            let count = *freq.get(&a).unwrap_or(&0) as f64;
            assert!(
                (count - n * p).abs() < 3.0 * sigma,
                "attr {a}: count {count}"
            );
        }
    }

    fn pop_log() -> (InteractionLog, Vec<(u32, u32, String)>) {
        // Item 0 in 3 interactions, item 1 in 1; attr 0 on item 0, attr 1 on
        // item 1, attr 2 on both.
        let recs = vec![
            Interaction { user: 0, item: 0, rating: 1.0, timestamp: 0 },
            Interaction { user: 1, item: 0, rating: 1.0, timestamp: 1 },
            Interaction { user: 2, item: 0, rating: 1.0, timestamp: 2 },
            Interaction { user: 0, item: 1, rating: 1.0, timestamp: 3 },
        ];
        let edges = vec![
            (0, 0, "tagged".to_string()),
            (1, 1, "tagged".to_string()),
            (0, 2, "tagged".to_string()),
            (1, 2, "tagged".to_string()),
        ];
        (InteractionLog::new(recs), edges)
    }

    #[test]
    fn pop_baseline_ranks_by_interaction_exposure() {
        let (log, edges) = pop_log();
        let sets = baseline_pop(PopSide::Item, &log, &[], &edges, &[0], 3);
        let ids: Vec<u32> = sets[0].attributes.iter().map(|(n, _)| n.id).collect();
        // Counts: attr 0 -> 3, attr 2 -> 4, attr 1 -> 1.
        assert_eq!(ids, vec![2, 0, 1]);
        assert!(sets[0]
            .attributes
            .iter()
            .all(|(n, _)| n.kind == NodeKind::ItemAttr));
    }

    #[test]
    fn pop_baseline_matches_brute_force_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let recs: Vec<Interaction> = (0..200)
            .map(|t| Interaction {
                user: rng.gen_range(0..20),
                item: rng.gen_range(0..30),
                rating: 1.0,
                timestamp: t,
            })
            .collect();
        let log = InteractionLog::new(recs);
        let edges: Vec<(u32, u32, String)> = (0..60)
            .map(|_| (rng.gen_range(0..30), rng.gen_range(0..8), "tagged".to_string()))
            .collect();
        let sets = baseline_pop(PopSide::Item, &log, &[], &edges, &[0], 8);
        let mut expect: HashMap<u32, usize> = HashMap::new();
        for r in log.positives() {
            for (owner, attr, _) in &edges {
                if *owner == r.item {
                    *expect.entry(*attr).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(u32, usize)> = expect.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let want: Vec<u32> = ranked.iter().map(|(a, _)| *a).collect();
        let got: Vec<u32> = sets[0].attributes.iter().map(|(n, _)| n.id).collect();
        assert_eq!(got, want[..got.len()]);
    }

    #[test]
    fn pop_baseline_user_side_excludes_item_attrs() {
        let (log, item_edges) = pop_log();
        let user_edges = vec![(0, 5, "has".to_string())];
        let sets = baseline_pop(PopSide::User, &log, &user_edges, &item_edges, &[0], 10);
        assert_eq!(sets[0].attributes.len(), 1);
        assert_eq!(sets[0].attributes[0].0, NodeRef::user_attr(5));
    }

    fn tiny_setup() -> (Hin, LatentFactors, EmbeddingTable, GroupSplit) {
        let recs = vec![
            Interaction { user: 0, item: 0, rating: 1.0, timestamp: 0 },
            Interaction { user: 0, item: 1, rating: 1.0, timestamp: 1 },
            Interaction { user: 1, item: 0, rating: 1.0, timestamp: 2 },
            Interaction { user: 1, item: 2, rating: 1.0, timestamp: 3 },
        ];
        let log = InteractionLog::new(recs);
        let hin = Hin::build(
            &log,
            &[(0, 0, "has".into())],
            &[(0, 0, "tagged".into()), (2, 1, "tagged".into())],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let factors = LatentFactors {
            users: Mat::uniform(2, 3, -0.5, 0.5, &mut rng),
            items: Mat::uniform(3, 3, -0.5, 0.5, &mut rng),
            user_index: IdIndex::from_ids(vec![0, 1]),
            item_index: IdIndex::from_ids(vec![0, 1, 2]),
        };
        let nodes: Vec<NodeRef> = hin.nodes().copied().collect();
        let embeds =
            EmbeddingTable::new(nodes.clone(), Mat::uniform(nodes.len(), 3, 0.5, 1.5, &mut rng))
                .unwrap();
        let groups = split_groups(&log);
        (hin, factors, embeds, groups)
    }

    #[test]
    fn starting_point_without_attributes_is_plain_mf() {
        let (_, factors, _, groups) = tiny_setup();
        // A HIN with no attribute nodes at all.
        let log = InteractionLog::new(vec![
            Interaction { user: 0, item: 0, rating: 1.0, timestamp: 0 },
            Interaction { user: 1, item: 1, rating: 1.0, timestamp: 1 },
        ]);
        let hin = Hin::build(&log, &[(0, 0, "has".into())], &[]).unwrap();
        // Give the lone user attribute an all-ones embedding: fusion is the
        // identity, so the starting lists equal plain MF lists.
        let nodes: Vec<NodeRef> = hin.nodes().copied().collect();
        let embeds = EmbeddingTable::new(
            nodes.clone(),
            Mat::from_vec(nodes.len(), 3, vec![1.0; nodes.len() * 3]).unwrap(),
        )
        .unwrap();
        let truth = HashMap::new();
        let exclude = HashMap::new();
        let dcfg = DisparityConfig::defaults_for(&groups);
        let setup = EvalSetup {
            factors: &factors,
            embeddings: &embeds,
            hin: &hin,
            groups: &groups,
            dcfg: &dcfg,
            truth: &truth,
            exclude: &exclude,
            k: 2,
        };
        let (recs, _) = starting_point(&setup).unwrap();
        let plain = rank_all(&setup, &factors).unwrap();
        assert_eq!(recs, plain);
    }

    #[test]
    fn fuse_all_matches_hand_fusion() {
        let (hin, factors, embeds, groups) = tiny_setup();
        let truth = HashMap::new();
        let exclude = HashMap::new();
        let dcfg = DisparityConfig::defaults_for(&groups);
        let setup = EvalSetup {
            factors: &factors,
            embeddings: &embeds,
            hin: &hin,
            groups: &groups,
            dcfg: &dcfg,
            truth: &truth,
            exclude: &exclude,
            k: 2,
        };
        let active: BTreeSet<NodeRef> = hin.attributes().into_iter().collect();
        let fused = fuse_all(&setup, &active).unwrap();
        // Hand fusion: user 0 gets user_attr 0; item 0 gets item_attr 0;
        // item 2 gets item_attr 1.
        let ua0 = embeds.get(&NodeRef::user_attr(0)).unwrap();
        for j in 0..3 {
            assert!((fused.users.get(0, j) - factors.users.get(0, j) * ua0[j]).abs() < 1e-12);
        }
        let ia0 = embeds.get(&NodeRef::item_attr(0)).unwrap();
        for j in 0..3 {
            assert!((fused.items.get(0, j) - factors.items.get(0, j) * ia0[j]).abs() < 1e-12);
        }
        // Untouched rows stay bitwise identical.
        assert_eq!(fused.users.row(1), factors.users.row(1));
        assert_eq!(fused.items.row(1), factors.items.row(1));
    }

    #[test]
    fn erasure_point_zero_equals_starting_point() {
        let (hin, factors, embeds, groups) = tiny_setup();
        let truth: HashMap<u32, BTreeSet<u32>> = HashMap::from([(0, BTreeSet::from([2]))]);
        let exclude = HashMap::new();
        let dcfg = DisparityConfig::defaults_for(&groups);
        let setup = EvalSetup {
            factors: &factors,
            embeddings: &embeds,
            hin: &hin,
            groups: &groups,
            dcfg: &dcfg,
            truth: &truth,
            exclude: &exclude,
            k: 2,
        };
        let (_, start) = starting_point(&setup).unwrap();
        let curve = erase_and_evaluate(&setup, &[], 3, "none").unwrap();
        assert_eq!(curve.points.len(), 4);
        assert_eq!(curve.points[0].1.disparity, start.disparity);
        // No explanations: every point is the unchanged starting point.
        for (erased, report) in &curve.points {
            assert_eq!(*erased, 0);
            assert_eq!(report.disparity, start.disparity);
            assert_eq!(report.ht, start.ht);
        }
    }

    #[test]
    fn erasure_absent_attribute_leaves_point_unchanged() {
        let (hin, factors, embeds, groups) = tiny_setup();
        let truth = HashMap::new();
        let exclude = HashMap::new();
        let dcfg = DisparityConfig::defaults_for(&groups);
        let setup = EvalSetup {
            factors: &factors,
            embeddings: &embeds,
            hin: &hin,
            groups: &groups,
            dcfg: &dcfg,
            truth: &truth,
            exclude: &exclude,
            k: 2,
        };
        let ghost = vec![ExplanationSet {
            user: NodeRef::user(0),
            attributes: vec![(NodeRef::item_attr(99), 0.0)],
            valid: false,
        }];
        let curve = erase_and_evaluate(&setup, &ghost, 1, "ghost").unwrap();
        assert_eq!(curve.points[1].0, 0);
        assert_eq!(curve.points[0].1.ht, curve.points[1].1.ht);
    }

    #[test]
    fn erasure_counts_are_cumulative_and_monotone() {
        let (hin, factors, embeds, groups) = tiny_setup();
        let truth = HashMap::new();
        let exclude = HashMap::new();
        let dcfg = DisparityConfig::defaults_for(&groups);
        let setup = EvalSetup {
            factors: &factors,
            embeddings: &embeds,
            hin: &hin,
            groups: &groups,
            dcfg: &dcfg,
            truth: &truth,
            exclude: &exclude,
            k: 2,
        };
        let expl = vec![ExplanationSet {
            user: NodeRef::user(0),
            attributes: vec![
                (NodeRef::item_attr(0), 0.0),
                (NodeRef::user_attr(0), 0.0),
                (NodeRef::item_attr(1), 0.0),
            ],
            valid: true,
        }];
        let curve = erase_and_evaluate(&setup, &expl, 3, "m").unwrap();
        let counts: Vec<usize> = curve.points.iter().map(|(c, _)| *c).collect();
        assert_eq!(counts, vec![0, 1, 2, 3]);
    }

    #[test]
    fn report_export_round_trip() {
        let report = FairnessReport {
            k: 5,
            ndcg: 0.5,
            hr: 0.75,
            ht: 0.4,
            gini: 0.3,
            disparity: 12.5,
        };
        let curves = vec![ErasureCurve {
            method: "cfairer".into(),
            erasure_length: 1,
            points: vec![(0, report.clone()), (1, report)],
        }];
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("r.csv");
        let json = dir.path().join("r.json");
        export_report(&curves, &csv, ReportFormat::Csv).unwrap();
        export_report(&curves, &json, ReportFormat::Json).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "method,erased,ndcg,hr,ht,gini,disparity");
        assert_eq!(lines.next().unwrap(), "cfairer,0,0.5,0.75,0.4,0.3,12.5");
        let parsed: Vec<serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0]["method"], "cfairer");
        assert_eq!(parsed[1]["erased"], 1);
        let back = import_report_csv(&csv, 5).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].points.len(), 2);
        assert_eq!(back[0].points[1].1.disparity, 12.5);
    }
}
