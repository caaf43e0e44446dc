//! End-to-end orchestration shared by the CLI commands: each step consumes
//! only documented artifacts of the previous steps, all placed under the
//! run's output directory.
//!
//! Artifacts:
//! - `dataset/`              prepared splits + attribute edges + manifest
//! - `rec.ckpt`              trained factor checkpoint
//! - `graph.ckpt`            node embedding checkpoint
//! - `policy.ckpt`           explanation-policy checkpoint
//! - `explanations.jsonl`    per-user explanation export
//! - `curve_<method>.csv`    per-method erasure curves
//! - `report.csv` / `report.json`  merged report
//! - `config.resolved.txt`   fully resolved configuration echo

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use crate::cfe::{
    export_explanations, extract_explanations, import_explanations, policy_to_checkpoint,
    train_explainer, CfeContext, ExplainPolicy,
};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fairness::{split_groups, DisparityConfig, GroupSplit};
use crate::graphrep::{
    embeddings_from_checkpoint, embeddings_to_checkpoint, train_graphrep, EmbeddingTable,
};
use crate::harness::{
    baseline_pop, baseline_rdexp, erase_and_evaluate, export_report, generate_synthetic,
    import_report_csv, EvalSetup, PopSide, ReportFormat,
};
use crate::hin::{
    apply_k_core, binarize, chronological_split, load_attr_edges, load_interactions,
    DatasetBundle, Hin,
};
use crate::recsys::{
    factors_from_checkpoint, factors_to_checkpoint, train_mf, LatentFactors,
};

fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("dataset")
}

/// Load, binarize, k-core filter and split the interactions; falls back to
/// the synthetic generator when no interactions path is configured.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let (raw, user_attr_edges, item_attr_edges) = match &cfg.interactions_path {
        Some(path) => {
            let log = load_interactions(path)?;
            let ua = match &cfg.user_attrs_path {
                Some(p) => load_attr_edges(p)?,
                None => Vec::new(),
            };
            let ia = match &cfg.item_attrs_path {
                Some(p) => load_attr_edges(p)?,
                None => Vec::new(),
            };
            (log, ua, ia)
        }
        None => {
            let data = generate_synthetic(&cfg.synthetic)?;
            (data.log, data.user_attr_edges, data.item_attr_edges)
        }
    };
    let binarized = binarize(&raw, cfg.rating_threshold);
    let cored = apply_k_core(&binarized, cfg.k_core)?;
    let split = chronological_split(&cored, cfg.fractions)?;
    let bundle = DatasetBundle {
        split,
        user_attr_edges,
        item_attr_edges,
    };
    bundle.save(&dataset_dir(cfg))?;
    cfg.write_resolved(&cfg.out_dir)?;
    log::info!(
        "prepared dataset: {} train / {} validation / {} test records",
        bundle.split.train.len(),
        bundle.split.validation.len(),
        bundle.split.test.len()
    );
    Ok(bundle)
}

pub fn cmd_train_rec(cfg: &RunConfig) -> Result<LatentFactors> {
    let bundle = DatasetBundle::load(&dataset_dir(cfg))?;
    let factors = train_mf(&bundle.split.train, &cfg.rec)?;
    factors_to_checkpoint(&factors).save_text(&cfg.out_dir.join("rec.ckpt"))?;
    Ok(factors)
}

pub fn cmd_train_graph(cfg: &RunConfig) -> Result<EmbeddingTable> {
    let bundle = DatasetBundle::load(&dataset_dir(cfg))?;
    let hin = bundle.build_hin()?;
    let (_, table) = train_graphrep(&hin, &cfg.graph)?;
    embeddings_to_checkpoint(&table).save_text(&cfg.out_dir.join("graph.ckpt"))?;
    Ok(table)
}

/// Everything the explanation and evaluation stages share.
pub struct Stage {
    pub bundle: DatasetBundle,
    pub hin: Hin,
    pub factors: LatentFactors,
    pub embeddings: EmbeddingTable,
    pub groups: GroupSplit,
    pub dcfg: DisparityConfig,
    pub exclude: HashMap<u32, BTreeSet<u32>>,
    pub truth: HashMap<u32, BTreeSet<u32>>,
}

pub fn load_stage(cfg: &RunConfig) -> Result<Stage> {
    let bundle = DatasetBundle::load(&dataset_dir(cfg))?;
    let hin = bundle.build_hin()?;
    let factors = factors_from_checkpoint(&Checkpoint::load(&cfg.out_dir.join("rec.ckpt"))?)?;
    let embeddings =
        embeddings_from_checkpoint(&Checkpoint::load(&cfg.out_dir.join("graph.ckpt"))?)?;
    let groups = split_groups(&bundle.split.train);
    let mut dcfg = DisparityConfig::defaults_for(&groups);
    dcfg.lambda = cfg.lambda;
    if let Some(alpha) = cfg.alpha {
        dcfg.alpha = alpha;
    }
    dcfg.epsilon = cfg.epsilon;
    dcfg.validate()?;
    let exclude = bundle.split.train.positive_items_by_user();
    let truth = bundle.split.test.positive_items_by_user();
    Ok(Stage {
        bundle,
        hin,
        factors,
        embeddings,
        groups,
        dcfg,
        exclude,
        truth,
    })
}

impl Stage {
    pub fn cfe_context(&self) -> CfeContext<'_> {
        CfeContext {
            hin: &self.hin,
            factors: &self.factors,
            embeddings: &self.embeddings,
            groups: &self.groups,
            dcfg: &self.dcfg,
            exclude: &self.exclude,
        }
    }

    pub fn eval_setup(&self, k: usize) -> EvalSetup<'_> {
        EvalSetup {
            factors: &self.factors,
            embeddings: &self.embeddings,
            hin: &self.hin,
            groups: &self.groups,
            dcfg: &self.dcfg,
            truth: &self.truth,
            exclude: &self.exclude,
            k,
        }
    }
}

pub fn cmd_explain(cfg: &RunConfig) -> Result<ExplainPolicy> {
    let stage = load_stage(cfg)?;
    let ctx = stage.cfe_context();
    let policy = train_explainer(&ctx, &cfg.cfe)?;
    policy_to_checkpoint(&policy).save_text(&cfg.out_dir.join("policy.ckpt"))?;
    let budget = cfg.explanation_budget();
    let mut sets = Vec::new();
    for &user in stage.factors.user_index.ids() {
        sets.push(extract_explanations(&ctx, &policy, &cfg.cfe, user, budget)?);
    }
    export_explanations(&sets, &cfg.out_dir.join("explanations.jsonl"))?;
    log::info!(
        "extracted explanations for {} users ({} valid)",
        sets.len(),
        sets.iter().filter(|s| s.valid).count()
    );
    Ok(policy)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let stage = load_stage(cfg)?;
    let setup = stage.eval_setup(cfg.cfe.top_k);
    let e = cfg.erasure_length;
    let budget = cfg.explanation_budget();
    let users: Vec<u32> = stage.factors.user_index.ids().to_vec();

    let cfairer = import_explanations(&cfg.out_dir.join("explanations.jsonl"))?;
    let space = stage.hin.attributes();
    let rdexp = baseline_rdexp(&space, &users, budget, cfg.seed.wrapping_add(10));
    let pop_user = baseline_pop(
        PopSide::User,
        &stage.bundle.split.train,
        &stage.bundle.user_attr_edges,
        &stage.bundle.item_attr_edges,
        &users,
        budget,
    );
    let pop_item = baseline_pop(
        PopSide::Item,
        &stage.bundle.split.train,
        &stage.bundle.user_attr_edges,
        &stage.bundle.item_attr_edges,
        &users,
        budget,
    );
    for (method, sets) in [
        ("cfairer", &cfairer),
        ("rdexp", &rdexp),
        ("pop_user", &pop_user),
        ("pop_item", &pop_item),
    ] {
        let curve = erase_and_evaluate(&setup, sets, e, method)?;
        export_report(
            std::slice::from_ref(&curve),
            &cfg.out_dir.join(format!("curve_{method}.csv")),
            ReportFormat::Csv,
        )?;
    }
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(&cfg.out_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("curve_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no curve files under {}",
            cfg.out_dir.display()
        )));
    }
    let mut curves = Vec::new();
    for path in &names {
        curves.extend(import_report_csv(path, cfg.cfe.top_k)?);
    }
    export_report(&curves, &cfg.out_dir.join("report.csv"), ReportFormat::Csv)?;
    export_report(&curves, &cfg.out_dir.join("report.json"), ReportFormat::Json)?;
    Ok(())
}
