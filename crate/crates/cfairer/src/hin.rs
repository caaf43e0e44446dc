//! Heterogeneous information network: typed nodes/edges, interaction logs,
//! and the preprocessing pipeline (binarization, k-core, chronological split).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Node type set. Users, items and the two attribute sides cover the
/// datasets this pipeline ingests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    User,
    Item,
    UserAttr,
    ItemAttr,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [
        NodeKind::User,
        NodeKind::Item,
        NodeKind::UserAttr,
        NodeKind::ItemAttr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::Item => "item",
            NodeKind::UserAttr => "user_attr",
            NodeKind::ItemAttr => "item_attr",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        match s {
            "user" => Some(NodeKind::User),
            "item" => Some(NodeKind::Item),
            "user_attr" => Some(NodeKind::UserAttr),
            "item_attr" => Some(NodeKind::ItemAttr),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            NodeKind::User => 0,
            NodeKind::Item => 1,
            NodeKind::UserAttr => 2,
            NodeKind::ItemAttr => 3,
        }
    }
}

/// Typed node reference. Ids are unique within a kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub id: u32,
}

impl NodeRef {
    pub fn user(id: u32) -> Self {
        NodeRef {
            kind: NodeKind::User,
            id,
        }
    }
    pub fn item(id: u32) -> Self {
        NodeRef {
            kind: NodeKind::Item,
            id,
        }
    }
    pub fn user_attr(id: u32) -> Self {
        NodeRef {
            kind: NodeKind::UserAttr,
            id,
        }
    }
    pub fn item_attr(id: u32) -> Self {
        NodeRef {
            kind: NodeKind::ItemAttr,
            id,
        }
    }

    pub fn is_attribute(&self) -> bool {
        matches!(self.kind, NodeKind::UserAttr | NodeKind::ItemAttr)
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.id)
    }
}

/// Interned edge relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u16);

/// Directed typed edge as stored; traversal indexes both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TypedEdge {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub relation: RelationId,
}

/// One interaction record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub timestamp: i64,
}

/// Timestamped (user, item, rating) records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(records: Vec<Interaction>) -> Self {
        InteractionLog { records }
    }

    /// Distinct user ids, ascending.
    pub fn users(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.user).collect();
        set.into_iter().collect()
    }

    /// Distinct item ids, ascending.
    pub fn items(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.item).collect();
        set.into_iter().collect()
    }

    pub fn num_users(&self) -> usize {
        self.records.iter().map(|r| r.user).collect::<HashSet<_>>().len()
    }

    pub fn num_items(&self) -> usize {
        self.records.iter().map(|r| r.item).collect::<HashSet<_>>().len()
    }

    pub fn positives(&self) -> impl Iterator<Item = &Interaction> {
        self.records.iter().filter(|r| r.rating > 0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Positive item set per user, for Top-K exclusion and ground truth.
    pub fn positive_items_by_user(&self) -> HashMap<u32, BTreeSet<u32>> {
        let mut map: HashMap<u32, BTreeSet<u32>> = HashMap::new();
        for r in self.positives() {
            map.entry(r.user).or_default().insert(r.item);
        }
        map
    }
}

/// Chronological train/validation/test partitions.
#[derive(Debug, Clone)]
pub struct SplitLog {
    pub train: InteractionLog,
    pub validation: InteractionLog,
    pub test: InteractionLog,
    pub fractions: (f64, f64, f64),
}

/// Load a tab-separated interactions file: `user item rating timestamp`.
/// Lines starting with `#` are ignored. Duplicate (user, item) pairs keep
/// the record with the latest timestamp.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut latest: HashMap<(u32, u32), Interaction> = HashMap::new();
    let mut order: Vec<(u32, u32)> = Vec::new();
    let mut saw_data = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        saw_data = true;
        let rec = parse_interaction_line(trimmed).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        })?;
        let key = (rec.user, rec.item);
        match latest.get(&key) {
            Some(prev) if prev.timestamp > rec.timestamp => {}
            _ => {
                if !latest.contains_key(&key) {
                    order.push(key);
                }
                latest.insert(key, rec);
            }
        }
    }
    if !saw_data {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    let records = order.into_iter().map(|k| latest[&k]).collect();
    Ok(InteractionLog::new(records))
}

fn parse_interaction_line(line: &str) -> std::result::Result<Interaction, String> {
    let mut fields = line.split('\t');
    let user = fields
        .next()
        .ok_or("missing user column")?
        .parse::<u32>()
        .map_err(|e| format!("bad user id: {e}"))?;
    let item = fields
        .next()
        .ok_or("missing item column")?
        .parse::<u32>()
        .map_err(|e| format!("bad item id: {e}"))?;
    let rating = fields
        .next()
        .ok_or("missing rating column")?
        .parse::<f64>()
        .map_err(|e| format!("bad rating: {e}"))?;
    let timestamp = fields
        .next()
        .ok_or("missing timestamp column")?
        .parse::<i64>()
        .map_err(|e| format!("bad timestamp: {e}"))?;
    if timestamp < 0 {
        return Err("negative timestamp".into());
    }
    Ok(Interaction {
        user,
        item,
        rating,
        timestamp,
    })
}

/// Ratings at or above `threshold` become 1, the rest 0. Negatives are kept
/// for loss evaluation and negative sampling.
pub fn binarize(log: &InteractionLog, threshold: f64) -> InteractionLog {
    let records = log
        .records
        .iter()
        .map(|r| Interaction {
            rating: if r.rating >= threshold { 1.0 } else { 0.0 },
            ..*r
        })
        .collect();
    InteractionLog::new(records)
}

/// Iteratively drop users/items with fewer than `k` positive interactions
/// until a fixpoint. Degrees count positives only; negative records of a
/// removed user or item are dropped along with it.
pub fn apply_k_core(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    assert!(k >= 1, "k must be at least 1");
    let mut user_deg: HashMap<u32, usize> = HashMap::new();
    let mut item_deg: HashMap<u32, usize> = HashMap::new();
    for r in log.positives() {
        *user_deg.entry(r.user).or_insert(0) += 1;
        *item_deg.entry(r.item).or_insert(0) += 1;
    }
    let mut live_users: HashSet<u32> = user_deg.keys().copied().collect();
    let mut live_items: HashSet<u32> = item_deg.keys().copied().collect();
    loop {
        let drop_users: Vec<u32> = live_users
            .iter()
            .filter(|u| user_deg.get(u).copied().unwrap_or(0) < k)
            .copied()
            .collect();
        let drop_items: Vec<u32> = live_items
            .iter()
            .filter(|i| item_deg.get(i).copied().unwrap_or(0) < k)
            .copied()
            .collect();
        if drop_users.is_empty() && drop_items.is_empty() {
            break;
        }
        for u in &drop_users {
            live_users.remove(u);
        }
        for i in &drop_items {
            live_items.remove(i);
        }
        user_deg.clear();
        item_deg.clear();
        for r in log.positives() {
            if live_users.contains(&r.user) && live_items.contains(&r.item) {
                *user_deg.entry(r.user).or_insert(0) += 1;
                *item_deg.entry(r.item).or_insert(0) += 1;
            }
        }
    }
    let records: Vec<Interaction> = log
        .records
        .iter()
        .filter(|r| live_users.contains(&r.user) && live_items.contains(&r.item))
        .copied()
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyCore { k });
    }
    Ok(InteractionLog::new(records))
}

/// Per-user chronological split: first `ceil(f_train * n)` records by
/// (timestamp, item id) go to train, next `ceil(f_valid * n)` to validation,
/// the remainder to test.
pub fn chronological_split(
    log: &InteractionLog,
    fractions: (f64, f64, f64),
) -> Result<SplitLog> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    if ((ft + fv + fe) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fe
        )));
    }
    let mut per_user: BTreeMap<u32, Vec<Interaction>> = BTreeMap::new();
    for r in &log.records {
        per_user.entry(r.user).or_default().push(*r);
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (_, mut recs) in per_user {
        recs.sort_by_key(|r| (r.timestamp, r.item));
        let n = recs.len();
        let n_train = ((ft * n as f64).ceil() as usize).min(n);
        let n_valid = ((fv * n as f64).ceil() as usize).min(n - n_train);
        for (idx, r) in recs.into_iter().enumerate() {
            if idx < n_train {
                train.push(r);
            } else if idx < n_train + n_valid {
                valid.push(r);
            } else {
                test.push(r);
            }
        }
    }
    Ok(SplitLog {
        train: InteractionLog::new(train),
        validation: InteractionLog::new(valid),
        test: InteractionLog::new(test),
        fractions,
    })
}

/// Relation carried by every positive user-item interaction edge.
pub const INTERACTS: &str = "interacts";

/// The heterogeneous information network with a both-way adjacency index.
#[derive(Debug, Clone)]
pub struct Hin {
    nodes: BTreeSet<NodeRef>,
    relations: Vec<String>,
    edges: Vec<TypedEdge>,
    adj: HashMap<(NodeRef, RelationId), Vec<NodeRef>>,
}

impl Hin {
    /// Assemble the HIN from positive interactions plus attribute edges.
    /// Attribute edge endpoints must reference users/items present in `log`.
    pub fn build(
        log: &InteractionLog,
        user_attr_edges: &[(u32, u32, String)],
        item_attr_edges: &[(u32, u32, String)],
    ) -> Result<Hin> {
        let users: BTreeSet<u32> = log.users().into_iter().collect();
        let items: BTreeSet<u32> = log.items().into_iter().collect();

        let mut relations: Vec<String> = vec![INTERACTS.to_string()];
        let mut rel_ids: HashMap<String, RelationId> = HashMap::new();
        rel_ids.insert(INTERACTS.to_string(), RelationId(0));
        let mut intern = |name: &str, relations: &mut Vec<String>| -> RelationId {
            if let Some(&id) = rel_ids.get(name) {
                return id;
            }
            let id = RelationId(relations.len() as u16);
            relations.push(name.to_string());
            rel_ids.insert(name.to_string(), id);
            id
        };

        let mut nodes: BTreeSet<NodeRef> = BTreeSet::new();
        for &u in &users {
            nodes.insert(NodeRef::user(u));
        }
        for &i in &items {
            nodes.insert(NodeRef::item(i));
        }

        let mut edges: Vec<TypedEdge> = Vec::new();
        for r in log.positives() {
            edges.push(TypedEdge {
                src: NodeRef::user(r.user),
                dst: NodeRef::item(r.item),
                relation: RelationId(0),
            });
        }
        for (owner, attr, rel) in user_attr_edges {
            if !users.contains(owner) {
                return Err(Error::Reference(format!(
                    "user attribute edge references unknown user {owner}"
                )));
            }
            let rel = intern(rel, &mut relations);
            let a = NodeRef::user_attr(*attr);
            nodes.insert(a);
            edges.push(TypedEdge {
                src: NodeRef::user(*owner),
                dst: a,
                relation: rel,
            });
        }
        for (owner, attr, rel) in item_attr_edges {
            if !items.contains(owner) {
                return Err(Error::Reference(format!(
                    "item attribute edge references unknown item {owner}"
                )));
            }
            let rel = intern(rel, &mut relations);
            let a = NodeRef::item_attr(*attr);
            nodes.insert(a);
            edges.push(TypedEdge {
                src: NodeRef::item(*owner),
                dst: a,
                relation: rel,
            });
        }
        edges.sort();
        edges.dedup();
        for e in &edges {
            if e.src == e.dst {
                return Err(Error::Reference(format!("self loop on {}", e.src)));
            }
        }

        let kinds: BTreeSet<NodeKind> = nodes.iter().map(|n| n.kind).collect();
        let hetero = kinds.len() + relations.len();
        if hetero <= 2 {
            return Err(Error::Heterogeneity(hetero));
        }

        let mut adj: HashMap<(NodeRef, RelationId), Vec<NodeRef>> = HashMap::new();
        for e in &edges {
            adj.entry((e.src, e.relation)).or_default().push(e.dst);
            adj.entry((e.dst, e.relation)).or_default().push(e.src);
        }
        for list in adj.values_mut() {
            list.sort();
            list.dedup();
        }

        Ok(Hin {
            nodes,
            relations,
            edges,
            adj,
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRef> {
        self.nodes.iter()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, node: &NodeRef) -> bool {
        self.nodes.contains(node)
    }

    pub fn edges(&self) -> &[TypedEdge] {
        &self.edges
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations
            .iter()
            .position(|r| r == name)
            .map(|i| RelationId(i as u16))
    }

    pub fn kinds(&self) -> BTreeSet<NodeKind> {
        self.nodes.iter().map(|n| n.kind).collect()
    }

    /// Neighbors of `node` under `relation`, ascending (kind, id) order.
    pub fn neighbors(&self, node: &NodeRef, relation: RelationId) -> Result<&[NodeRef]> {
        if !self.nodes.contains(node) {
            return Err(Error::Reference(format!("unknown node {node}")));
        }
        Ok(self
            .adj
            .get(&(*node, relation))
            .map(|v| v.as_slice())
            .unwrap_or(&[]))
    }

    /// Neighbors of `node` across all relations, deduplicated, ascending.
    pub fn neighbors_all(&self, node: &NodeRef) -> Result<Vec<NodeRef>> {
        if !self.nodes.contains(node) {
            return Err(Error::Reference(format!("unknown node {node}")));
        }
        let mut out: BTreeSet<NodeRef> = BTreeSet::new();
        for rid in 0..self.relations.len() {
            if let Some(list) = self.adj.get(&(*node, RelationId(rid as u16))) {
                out.extend(list.iter().copied());
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Attribute neighbors of a user or item node.
    pub fn attribute_neighbors(&self, node: &NodeRef) -> Result<Vec<NodeRef>> {
        Ok(self
            .neighbors_all(node)?
            .into_iter()
            .filter(|n| n.is_attribute())
            .collect())
    }

    /// Every attribute node, ascending.
    pub fn attributes(&self) -> Vec<NodeRef> {
        self.nodes
            .iter()
            .filter(|n| n.is_attribute())
            .copied()
            .collect()
    }

    /// Owners (users/items) connected to an attribute node, ascending.
    pub fn attribute_owners(&self, attr: &NodeRef) -> Result<Vec<NodeRef>> {
        Ok(self
            .neighbors_all(attr)?
            .into_iter()
            .filter(|n| !n.is_attribute())
            .collect())
    }
}

/// Dataset bundle: interaction splits, attribute edges and a key=value manifest.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub split: SplitLog,
    pub user_attr_edges: Vec<(u32, u32, String)>,
    pub item_attr_edges: Vec<(u32, u32, String)>,
}

impl DatasetBundle {
    pub fn build_hin(&self) -> Result<Hin> {
        // Attribute edges may reference users/items whose every positive
        // interaction fell outside train; keep only resolvable ones.
        let users: HashSet<u32> = self.split.train.users().into_iter().collect();
        let items: HashSet<u32> = self.split.train.items().into_iter().collect();
        let ua: Vec<_> = self
            .user_attr_edges
            .iter()
            .filter(|(o, _, _)| users.contains(o))
            .cloned()
            .collect();
        let ia: Vec<_> = self
            .item_attr_edges
            .iter()
            .filter(|(o, _, _)| items.contains(o))
            .cloned()
            .collect();
        Hin::build(&self.split.train, &ua, &ia)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_interactions(&dir.join("train.tsv"), &self.split.train)?;
        write_interactions(&dir.join("validation.tsv"), &self.split.validation)?;
        write_interactions(&dir.join("test.tsv"), &self.split.test)?;
        write_attr_edges(&dir.join("user_attrs.tsv"), &self.user_attr_edges)?;
        write_attr_edges(&dir.join("item_attrs.tsv"), &self.item_attr_edges)?;
        let mut manifest = std::fs::File::create(dir.join("manifest.txt"))?;
        let (ft, fv, fe) = self.split.fractions;
        writeln!(manifest, "format_version=1")?;
        writeln!(manifest, "train_records={}", self.split.train.len())?;
        writeln!(manifest, "validation_records={}", self.split.validation.len())?;
        writeln!(manifest, "test_records={}", self.split.test.len())?;
        writeln!(manifest, "num_users={}", self.split.train.num_users())?;
        writeln!(manifest, "num_items={}", self.split.train.num_items())?;
        writeln!(manifest, "user_attr_edges={}", self.user_attr_edges.len())?;
        writeln!(manifest, "item_attr_edges={}", self.item_attr_edges.len())?;
        writeln!(manifest, "fractions={ft},{fv},{fe}")?;
        writeln!(
            manifest,
            "node_kinds={}",
            NodeKind::ALL.map(|k| k.as_str()).join(",")
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<DatasetBundle> {
        let manifest_path = dir.join("manifest.txt");
        let manifest = std::fs::read_to_string(&manifest_path)?;
        let mut fractions = (0.6, 0.2, 0.2);
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("fractions=") {
                let parts: Vec<f64> = rest
                    .split(',')
                    .map(|p| p.parse().unwrap_or(f64::NAN))
                    .collect();
                if parts.len() == 3 && parts.iter().all(|v| v.is_finite()) {
                    fractions = (parts[0], parts[1], parts[2]);
                }
            }
        }
        let split = SplitLog {
            train: load_interactions(&dir.join("train.tsv"))?,
            validation: load_interactions(&dir.join("validation.tsv"))?,
            test: load_interactions(&dir.join("test.tsv"))?,
            fractions,
        };
        Ok(DatasetBundle {
            split,
            user_attr_edges: load_attr_edges(&dir.join("user_attrs.tsv"))?,
            item_attr_edges: load_attr_edges(&dir.join("item_attrs.tsv"))?,
        })
    }
}

pub fn write_interactions(path: &Path, log: &InteractionLog) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# user\titem\trating\ttimestamp")?;
    for r in &log.records {
        writeln!(f, "{}\t{}\t{}\t{}", r.user, r.item, r.rating, r.timestamp)?;
    }
    Ok(())
}

pub fn write_attr_edges(path: &Path, edges: &[(u32, u32, String)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# node\tattribute\trelation")?;
    for (owner, attr, rel) in edges {
        writeln!(f, "{owner}\t{attr}\t{rel}")?;
    }
    Ok(())
}

/// Attribute-edge file: tab-separated `node_id attribute_id relation_name`.
pub fn load_attr_edges(path: &Path) -> Result<Vec<(u32, u32, String)>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let parse = |f: Option<&str>, what: &str| -> Result<u32> {
            f.ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("missing {what} column"),
            })?
            .parse::<u32>()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad {what}: {e}"),
            })
        };
        let owner = parse(fields.next(), "node id")?;
        let attr = parse(fields.next(), "attribute id")?;
        let rel = fields.next().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: "missing relation column".into(),
        })?;
        out.push((owner, attr, rel.to_string()));
    }
    Ok(out)
}
