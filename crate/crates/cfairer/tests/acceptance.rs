//! End-to-end acceptance suite. Each test covers one release criterion and
//! prints a single PASS line when it holds; tolerances and runtime budgets
//! are asserted inline.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfairer::cfe::{
    candidate_attributes, counterfactual_reward, crm_return, deploy_sequence,
    extract_explanations, fuse_owned, policy_distribution, policy_gradient, policy_objective,
    train_explainer, CfeConfig, CfeContext, EpisodeStep, ExplainPolicy, Trajectory,
};
use cfairer::fairness::{
    disparity, gini_at_k, hr_at_k, ht_at_k, ndcg_at_k, split_groups, DisparityConfig, GroupSplit,
    RecList,
};
use cfairer::graphrep::{
    init_model, reconstruction_loss_and_grads, EmbeddingTable, GraphRepConfig, GraphRepModel,
};
use cfairer::harness::{
    baseline_pop, baseline_rdexp, erase_and_evaluate, generate_synthetic, EvalSetup, PopSide,
    SyntheticConfig,
};
use cfairer::hin::{
    apply_k_core, binarize, chronological_split, Hin, Interaction, InteractionLog, NodeKind,
    NodeRef,
};
use cfairer::linalg::{cosine, Mat};
use cfairer::recsys::{
    mf_loss, mf_loss_grad, top_k, IdIndex, LatentFactors,
};

// ---------------------------------------------------------------------------
// 1. Ranking/fairness metrics against brute-force reference implementations.
// ---------------------------------------------------------------------------

fn ref_exposure(recs: &[RecList], group: &BTreeSet<u32>) -> usize {
    let mut count = 0;
    for rec in recs {
        for &(item, _) in &rec.items {
            for &g in group {
                if g == item {
                    count += 1;
                }
            }
        }
    }
    count
}

fn ref_disparity(recs: &[RecList], groups: &GroupSplit, cfg: &DisparityConfig) -> f64 {
    let e0 = ref_exposure(recs, &groups.head) as f64;
    let e1 = ref_exposure(recs, &groups.tail) as f64;
    let dp = groups.tail.len() as f64 * e0 - groups.head.len() as f64 * e1;
    let ek = cfg.alpha * e0 - e1;
    dp.abs() + cfg.lambda * ek.abs()
}

fn ref_ndcg(recs: &[RecList], truth: &HashMap<u32, BTreeSet<u32>>, k: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for rec in recs {
        let pos = match truth.get(&rec.user.id) {
            Some(p) if !p.is_empty() => p,
            _ => continue,
        };
        counted += 1;
        let mut dcg = 0.0;
        for rank in 0..rec.items.len().min(k) {
            if pos.contains(&rec.items[rank].0) {
                dcg += 1.0 / ((rank as f64) + 2.0).log2();
            }
        }
        let mut idcg = 0.0;
        for rank in 0..pos.len().min(k) {
            idcg += 1.0 / ((rank as f64) + 2.0).log2();
        }
        total += dcg / idcg;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn ref_hr(recs: &[RecList], truth: &HashMap<u32, BTreeSet<u32>>, k: usize) -> f64 {
    let mut hits = 0;
    let mut counted = 0;
    for rec in recs {
        let pos = match truth.get(&rec.user.id) {
            Some(p) if !p.is_empty() => p,
            _ => continue,
        };
        counted += 1;
        let mut hit = false;
        for rank in 0..rec.items.len().min(k) {
            if pos.contains(&rec.items[rank].0) {
                hit = true;
            }
        }
        if hit {
            hits += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        hits as f64 / counted as f64
    }
}

fn ref_ht(recs: &[RecList], groups: &GroupSplit, k: usize) -> f64 {
    if recs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for rec in recs {
        let mut head = 0;
        for rank in 0..rec.items.len().min(k) {
            if groups.head.contains(&rec.items[rank].0) {
                head += 1;
            }
        }
        total += head as f64 / k as f64;
    }
    total / recs.len() as f64
}

fn ref_gini(recs: &[RecList], catalog: &BTreeSet<u32>, k: usize) -> f64 {
    let mut counts: Vec<f64> = Vec::new();
    for &item in catalog {
        let mut c = 0;
        for rec in recs {
            for rank in 0..rec.items.len().min(k) {
                if rec.items[rank].0 == item {
                    c += 1;
                }
            }
        }
        counts.push(c as f64);
    }
    let n = counts.len();
    let total: f64 = counts.iter().sum();
    if n == 0 || total == 0.0 {
        return 0.0;
    }
    let mut abs_diff = 0.0;
    for a in &counts {
        for b in &counts {
            abs_diff += (a - b).abs();
        }
    }
    abs_diff / (2.0 * n as f64 * total)
}

fn random_metric_instance(
    rng: &mut ChaCha8Rng,
) -> (
    Vec<RecList>,
    HashMap<u32, BTreeSet<u32>>,
    GroupSplit,
    BTreeSet<u32>,
    DisparityConfig,
    usize,
) {
    let n_items = rng.gen_range(10..30u32);
    let catalog: BTreeSet<u32> = (0..n_items).collect();
    let mut head = BTreeSet::new();
    for &i in &catalog {
        if rng.gen_bool(0.25) {
            head.insert(i);
        }
    }
    if head.is_empty() {
        head.insert(0);
    }
    if head.len() == catalog.len() {
        head.remove(&(n_items - 1));
    }
    let tail: BTreeSet<u32> = catalog.difference(&head).copied().collect();
    let groups = GroupSplit {
        head,
        tail,
        counts: HashMap::new(),
    };
    let k = rng.gen_range(1..8usize).min(n_items as usize);
    let n_users = rng.gen_range(3..10u32);
    let mut recs = Vec::new();
    let mut truth = HashMap::new();
    for u in 0..n_users {
        let mut pool: Vec<u32> = catalog.iter().copied().collect();
        let mut items = Vec::new();
        for _ in 0..k {
            let idx = rng.gen_range(0..pool.len());
            items.push((pool.swap_remove(idx), rng.gen_range(-2.0..2.0)));
        }
        items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        recs.push(RecList {
            user: NodeRef::user(u),
            items,
        });
        if rng.gen_bool(0.8) {
            let mut pos = BTreeSet::new();
            for &i in &catalog {
                if rng.gen_bool(0.2) {
                    pos.insert(i);
                }
            }
            truth.insert(u, pos);
        }
    }
    let cfg = DisparityConfig {
        lambda: rng.gen_range(0.0..2.0),
        alpha: rng.gen_range(0.1..5.0),
        epsilon: 0.0,
    };
    (recs, truth, groups, catalog, cfg, k)
}

#[test]
fn criterion_1_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    for case in 0..200 {
        let (recs, truth, groups, catalog, cfg, k) = random_metric_instance(&mut rng);
        let tol = 1e-9;
        let d = (disparity(&recs, &groups, &cfg) - ref_disparity(&recs, &groups, &cfg)).abs();
        assert!(d <= tol, "case {case}: disparity off by {d}");
        let d = (ndcg_at_k(&recs, &truth, k) - ref_ndcg(&recs, &truth, k)).abs();
        assert!(d <= tol, "case {case}: ndcg off by {d}");
        let d = (hr_at_k(&recs, &truth, k) - ref_hr(&recs, &truth, k)).abs();
        assert!(d <= tol, "case {case}: hr off by {d}");
        let d = (ht_at_k(&recs, &groups, k) - ref_ht(&recs, &groups, k)).abs();
        assert!(d <= tol, "case {case}: ht off by {d}");
        let d = (gini_at_k(&recs, &catalog, k) - ref_gini(&recs, &catalog, k)).abs();
        assert!(d <= tol, "case {case}: gini off by {d}");
    }
    assert!(start.elapsed().as_secs() < 10, "metric oracle suite too slow");
    println!("criterion 1/8 metric oracles: PASS");
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients against central finite differences.
// ---------------------------------------------------------------------------

fn vec_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, f) in analytic.iter().zip(fd) {
        diff += (a - f) * (a - f);
        norm += f * f;
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

fn mf_fd_check(rng: &mut ChaCha8Rng) {
    let d = 5;
    let factors = LatentFactors {
        users: Mat::uniform(3, d, -0.8, 0.8, rng),
        items: Mat::uniform(4, d, -0.8, 0.8, rng),
        user_index: IdIndex::from_ids(vec![0, 1, 2]),
        item_index: IdIndex::from_ids(vec![0, 1, 2, 3]),
    };
    let samples = vec![
        (0, 0, 1.0),
        (0, 2, 0.0),
        (1, 1, 1.0),
        (1, 3, 0.0),
        (2, 0, 0.0),
        (2, 2, 1.0),
    ];
    let l2 = 0.01;
    let (gu, gv) = mf_loss_grad(&factors, &samples, l2);
    let mut analytic: Vec<f64> = gu.data().to_vec();
    analytic.extend_from_slice(gv.data());
    let h = 1e-6;
    let mut fd = Vec::new();
    let mut probe = factors.clone();
    for side in 0..2 {
        let len = if side == 0 {
            probe.users.data().len()
        } else {
            probe.items.data().len()
        };
        for idx in 0..len {
            let grab = |p: &mut LatentFactors| -> *mut f64 {
                if side == 0 {
                    &mut p.users.data_mut()[idx]
                } else {
                    &mut p.items.data_mut()[idx]
                }
            };
            let slot = grab(&mut probe);
            unsafe {
                let orig = *slot;
                *slot = orig + h;
                let up = mf_loss(&probe, &samples, l2);
                *slot = orig - h;
                let down = mf_loss(&probe, &samples, l2);
                *slot = orig;
                fd.push((up - down) / (2.0 * h));
            }
        }
    }
    let err = vec_rel_err(&analytic, &fd);
    assert!(err < 1e-4, "mf gradient rel err {err}");
}

fn tiny_hin(rng: &mut ChaCha8Rng) -> (InteractionLog, Hin) {
    let mut recs = Vec::new();
    let mut t = 0;
    for u in 0..3u32 {
        for i in 0..3u32 {
            if rng.gen_bool(0.7) {
                recs.push(Interaction {
                    user: u,
                    item: i,
                    rating: 1.0,
                    timestamp: t,
                });
                t += 1;
            }
        }
    }
    recs.push(Interaction {
        user: 0,
        item: 0,
        rating: 1.0,
        timestamp: t,
    });
    let log = InteractionLog::new(recs);
    let hin = Hin::build(
        &log,
        &[(0, 0, "has".into()), (1, 1, "has".into())],
        &[(0, 0, "tagged".into()), (1, 0, "tagged".into()), (2, 1, "tagged".into())],
    )
    .unwrap();
    (log, hin)
}

fn graph_fd_check(rng: &mut ChaCha8Rng) {
    let (_, hin) = tiny_hin(rng);
    let cfg = GraphRepConfig {
        layer_dims: vec![4, 4],
        out_dim: 4,
        buckets: 4,
        dropout: 0.0,
        leaky_slope: 0.01,
        learning_rate: 0.0,
        epochs: 0,
        seed: 5,
    };
    let (mut model, h0) = init_model(&hin, &cfg).unwrap();
    let nodes: Vec<NodeRef> = hin.nodes().copied().collect();
    let mut pairs = Vec::new();
    for e in hin.edges().iter().take(6) {
        pairs.push((e.src, e.dst, 1.0));
    }
    pairs.push((nodes[0], nodes[nodes.len() - 1], 0.0));
    let loss_of = |m: &GraphRepModel| reconstruction_loss_and_grads(m, &hin, &h0, &pairs).unwrap().0;
    let (_, grads) = reconstruction_loss_and_grads(&model, &hin, &h0, &pairs).unwrap();

    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    let h = 1e-5;
    let num_layers = model.layers.len();
    for l in 0..num_layers {
        for part in 0..3 {
            let count = match part {
                0 => model.layers[l].w_node.len(),
                1 => model.layers[l].w_edge.len(),
                _ => 1,
            };
            for m in 0..count {
                let len = match part {
                    0 => model.layers[l].w_node[m].data().len(),
                    1 => model.layers[l].w_edge[m].data().len(),
                    _ => model.layers[l].bias.len(),
                };
                for idx in 0..len {
                    let g = match part {
                        0 => grads.layers[l].w_node[m].data()[idx],
                        1 => grads.layers[l].w_edge[m].data()[idx],
                        _ => grads.layers[l].bias[idx],
                    };
                    analytic.push(g);
                    let slot: *mut f64 = match part {
                        0 => &mut model.layers[l].w_node[m].data_mut()[idx],
                        1 => &mut model.layers[l].w_edge[m].data_mut()[idx],
                        _ => &mut model.layers[l].bias[idx],
                    };
                    unsafe {
                        let orig = *slot;
                        *slot = orig + h;
                        let up = loss_of(&model);
                        *slot = orig - h;
                        let down = loss_of(&model);
                        *slot = orig;
                        fd.push((up - down) / (2.0 * h));
                    }
                }
            }
        }
    }
    for l in 0..model.proj.len() {
        for idx in 0..model.proj[l].data().len() {
            analytic.push(grads.proj[l].data()[idx]);
            let slot: *mut f64 = &mut model.proj[l].data_mut()[idx];
            unsafe {
                let orig = *slot;
                *slot = orig + h;
                let up = loss_of(&model);
                *slot = orig - h;
                let down = loss_of(&model);
                *slot = orig;
                fd.push((up - down) / (2.0 * h));
            }
        }
    }
    let err = vec_rel_err(&analytic, &fd);
    assert!(err < 1e-4, "graph gradient rel err {err}");
}

fn toy_trajectories(rng: &mut ChaCha8Rng, d_x: usize, d_e: usize) -> Vec<Trajectory> {
    let mut trajs = Vec::new();
    for u in 0..2u32 {
        let mut steps = Vec::new();
        for _ in 0..3 {
            let n_actions = 3;
            let x: Vec<f64> = (0..d_x).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let actions: Vec<NodeRef> = (0..n_actions as u32).map(NodeRef::item_attr).collect();
            let action_embeds = Mat::uniform(n_actions, d_e, -1.0, 1.0, rng);
            steps.push(EpisodeStep {
                x,
                actions,
                action_embeds,
                chosen: rng.gen_range(0..n_actions),
                logging_propensity: 1.0 / n_actions as f64,
                reward: rng.gen_range(-1.0..2.0),
            });
        }
        trajs.push(Trajectory {
            user: NodeRef::user(u),
            steps,
            gamma: 0.9,
        });
    }
    trajs
}

fn policy_fd_check(rng: &mut ChaCha8Rng) {
    let (d_x, d_s, d_e) = (6, 4, 4);
    let mut policy = ExplainPolicy::init(d_x, d_s, d_e, true, 11);
    let trajs = toy_trajectories(rng, d_x, d_e);
    let c_max = 1e9; // clipping inactive so the analytic gradient is exact
    let grads = policy_gradient(&policy, &trajs, c_max).unwrap();
    let objective = |p: &ExplainPolicy| policy_objective(p, &trajs, c_max).unwrap();

    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    let h = 1e-6;
    for idx in 0..policy.w_p.data().len() {
        analytic.push(grads.w_p.data()[idx]);
        let slot: *mut f64 = &mut policy.w_p.data_mut()[idx];
        unsafe {
            let orig = *slot;
            *slot = orig + h;
            let up = objective(&policy);
            *slot = orig - h;
            let down = objective(&policy);
            *slot = orig;
            fd.push((up - down) / (2.0 * h));
        }
    }
    for gate in 0..3 {
        for part in 0..3 {
            let len = match part {
                0 => policy.gru.w[gate].data().len(),
                1 => policy.gru.u[gate].data().len(),
                _ => policy.gru.b[gate].len(),
            };
            for idx in 0..len {
                let g = match part {
                    0 => grads.gru.w[gate].data()[idx],
                    1 => grads.gru.u[gate].data()[idx],
                    _ => grads.gru.b[gate][idx],
                };
                analytic.push(g);
                let slot: *mut f64 = match part {
                    0 => &mut policy.gru.w[gate].data_mut()[idx],
                    1 => &mut policy.gru.u[gate].data_mut()[idx],
                    _ => &mut policy.gru.b[gate][idx],
                };
                unsafe {
                    let orig = *slot;
                    *slot = orig + h;
                    let up = objective(&policy);
                    *slot = orig - h;
                    let down = objective(&policy);
                    *slot = orig;
                    fd.push((up - down) / (2.0 * h));
                }
            }
        }
    }
    let err = vec_rel_err(&analytic, &fd);
    assert!(err < 1e-4, "policy gradient rel err {err}");
}

#[test]
fn criterion_2_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    mf_fd_check(&mut rng);
    graph_fd_check(&mut rng);
    policy_fd_check(&mut rng);
    assert!(start.elapsed().as_secs() < 30, "gradient checks too slow");
    println!("criterion 2/8 gradient checks: PASS");
}

// ---------------------------------------------------------------------------
// 3. IPS unbiasedness on a fully enumerable one-step decision problem.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_ips_unbiasedness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let (d_s, d_e, n_actions) = (3, 3, 4);
    let w_p = Mat::uniform(d_s, d_e, -0.7, 0.7, &mut rng);
    let s: Vec<f64> = (0..d_s).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let embeds = Mat::uniform(n_actions, d_e, -1.0, 1.0, &mut rng);
    let rewards = [1.0, -0.5, 2.0, 0.3];
    let probs = policy_distribution(&w_p, &s, &embeds).unwrap();
    let exact: f64 = probs.iter().zip(&rewards).map(|(p, r)| p * r).sum();

    let pi_0 = 1.0 / n_actions as f64;
    let n = 100_000usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let a = rng.gen_range(0..n_actions);
        let est = crm_return(&[(probs[a], pi_0, rewards[a])], 1.0, 1e12).unwrap();
        sum += est;
        sum_sq += est * est;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let se = (var / n as f64).sqrt();
    assert!(se > 0.0, "degenerate sampling variance");
    assert!(
        (mean - exact).abs() < 3.0 * se,
        "ips estimate {mean} vs exact {exact} (se {se})"
    );
    assert!(start.elapsed().as_secs() < 60, "ips check too slow");
    println!("criterion 3/8 ips unbiasedness: PASS");
}

// ---------------------------------------------------------------------------
// 4. Greedy extraction cardinality vs exhaustive subset-search minimum.
// ---------------------------------------------------------------------------

fn combos(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// One seeded instance: two over-exposed head items carried into the list
/// only by a shared "booster" attribute; every other attribute sits on one
/// tail item with a near-identity embedding, so erasing the booster is the
/// unique single-attribute fix. A tenth of the instances omit the booster
/// and therefore admit no fix at all. Returns whether the trained greedy
/// extraction cardinality equals the exhaustive subset-search minimum
/// (agreeing "no solution" counts as a match).
fn minimality_case(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_users, n_items, n_attrs) = (4u32, 10u32, 10u32);
    let mut recs = Vec::new();
    let mut t = 0i64;
    for u in 0..n_users {
        for i in 0..2u32 {
            recs.push(Interaction {
                user: u,
                item: i,
                rating: 1.0,
                timestamp: t,
            });
            t += 1;
        }
    }
    for i in 2..n_items {
        recs.push(Interaction {
            user: rng.gen_range(0..n_users),
            item: i,
            rating: 1.0,
            timestamp: t,
        });
        t += 1;
    }
    let log = InteractionLog::new(recs);
    let has_booster = rng.gen_bool(0.9);
    let mut item_edges: Vec<(u32, u32, String)> = Vec::new();
    if has_booster {
        item_edges.push((0, 0, "tagged".into()));
        item_edges.push((1, 0, "tagged".into()));
    }
    for a in 1..n_attrs {
        item_edges.push((rng.gen_range(2..n_items), a, "tagged".into()));
    }
    item_edges.sort();
    let hin = Hin::build(&log, &[], &item_edges).unwrap();

    // Geometry: boosted head items strictly outrank every tail item, and
    // strictly trail every tail item once the booster is erased; the
    // near-identity attributes can never flip either ordering.
    let d = 4;
    let users_m = Mat::uniform(n_users as usize, d, 0.9, 1.1, &mut rng);
    let mut items_m = Mat::uniform(n_items as usize, d, 0.8, 1.2, &mut rng);
    for i in 0..2 {
        for j in 0..d {
            items_m.set(i, j, rng.gen_range(0.4..0.6));
        }
    }
    let factors = LatentFactors {
        users: users_m,
        items: items_m,
        user_index: IdIndex::from_ids((0..n_users).collect()),
        item_index: IdIndex::from_ids((0..n_items).collect()),
    };
    let nodes: Vec<NodeRef> = hin.nodes().copied().collect();
    let mut vecs = Mat::zeros(nodes.len(), d);
    for (i, node) in nodes.iter().enumerate() {
        let (lo, hi) = match node.kind {
            NodeKind::ItemAttr if node.id == 0 && has_booster => (4.0, 4.4),
            NodeKind::ItemAttr | NodeKind::UserAttr => (0.95, 1.05),
            _ => (-1.0, 1.0),
        };
        for j in 0..d {
            vecs.set(i, j, rng.gen_range(lo..hi));
        }
    }
    let table = EmbeddingTable::new(nodes, vecs).unwrap();
    let groups = split_groups(&log);
    let mut dcfg = DisparityConfig::defaults_for(&groups);
    dcfg.epsilon = 10.0;
    let exclude = HashMap::new();
    let ctx = CfeContext {
        hin: &hin,
        factors: &factors,
        embeddings: &table,
        groups: &groups,
        dcfg: &dcfg,
        exclude: &exclude,
    };
    let ccfg = CfeConfig {
        state_dim: 8,
        top_k: 3,
        candidate_size: 6,
        episode_len: 2,
        episodes: 150,
        seed,
        ..CfeConfig::default()
    };
    let policy = train_explainer(&ctx, &ccfg).unwrap();
    let got = extract_explanations(&ctx, &policy, &ccfg, 0, n_attrs as usize).unwrap();

    let all_attrs: BTreeSet<NodeRef> = hin.attributes().into_iter().collect();
    let fused = fuse_owned(&factors, &table, &hin, &all_attrs).unwrap();
    let rec0 = top_k(&fused, 0, 3, &BTreeSet::new()).unwrap();
    let items0: Vec<u32> = rec0.item_ids().collect();
    let space = candidate_attributes(&hin, 0, &items0).unwrap();
    // Final ranking depends only on the removed set, so subsets in
    // ascending order are enough.
    let mut min_card = None;
    'search: for size in 1..=space.len() {
        for combo in combos(space.len(), size) {
            let seq: Vec<NodeRef> = combo.iter().map(|&i| space[i]).collect();
            let (init, after) = deploy_sequence(&ctx, 0, 3, &seq).unwrap();
            if init - after[after.len() - 1] >= dcfg.epsilon {
                min_card = Some(size);
                break 'search;
            }
        }
    }
    let ok = match (min_card, got.valid) {
        (Some(m), true) => got.attributes.len() == m,
        (None, false) => true,
        _ => false,
    };
    if !ok {
        eprintln!(
            "seed {seed}: exhaustive {min_card:?}, greedy valid={} len={}",
            got.valid,
            got.attributes.len()
        );
    }
    ok
}

#[test]
fn criterion_4_counterfactual_minimality() {
    let start = Instant::now();
    let matches = (0..100).filter(|&s| minimality_case(s as u64)).count();
    assert!(
        matches >= 95,
        "greedy matched the exhaustive minimum in only {matches}/100 instances"
    );
    assert!(start.elapsed().as_secs() < 300, "minimality sweep too slow");
    println!("criterion 4/8 counterfactual minimality: PASS ({matches}/100)");
}

// ---------------------------------------------------------------------------
// 5. Erasure-curve trend on the planted-bias synthetic dataset.
// ---------------------------------------------------------------------------

struct TrendCurves {
    cfair_ht: Vec<f64>,
    cfair_gini: Vec<f64>,
    rdexp_ht: Vec<f64>,
    popitem_ht: Vec<f64>,
}

fn trend_run(seed: u64) -> TrendCurves {
    let syn = SyntheticConfig {
        users: 200,
        items: 300,
        user_attrs: 10,
        item_attrs: 40,
        interactions: 6_000,
        skew: 0.6,
        planted_attrs: 3,
        hub_attrs: 4,
        seed,
    };
    let data = generate_synthetic(&syn).unwrap();
    let log = data.log;
    let hin = Hin::build(&log, &data.user_attr_edges, &data.item_attr_edges).unwrap();
    let groups = split_groups(&log);
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    // Items the planted attributes tag: all heads plus a slice of tails.
    let mut planted_tagged: BTreeSet<u32> = BTreeSet::new();
    for a in 0..syn.planted_attrs as u32 {
        let attr = NodeRef { kind: NodeKind::ItemAttr, id: a };
        for owner in hin.attribute_owners(&attr).unwrap() {
            if owner.kind == NodeKind::Item {
                planted_tagged.insert(owner.id);
            }
        }
    }
    // Fillers whose owners are all untagged tails get a flat boost; their
    // owners form the equalised band below.
    let mut filler_boost: HashMap<u32, f64> = HashMap::new();
    let mut band_product: HashMap<u32, f64> = HashMap::new();
    for attr in hin.attributes() {
        if attr.kind != NodeKind::ItemAttr
            || attr.id < (syn.planted_attrs + syn.hub_attrs) as u32
        {
            continue;
        }
        let owners: Vec<u32> = hin
            .attribute_owners(&attr)
            .unwrap()
            .into_iter()
            .filter(|o| o.kind == NodeKind::Item)
            .map(|o| o.id)
            .collect();
        let clean = owners
            .iter()
            .all(|id| !groups.head.contains(id) && !planted_tagged.contains(id));
        if !clean {
            continue;
        }
        let b = rng.gen_range(2.8..3.0);
        filler_boost.insert(attr.id, b);
        for id in owners {
            *band_product.entry(id).or_insert(1.0) *= b;
        }
    }

    // Hand-built factors instead of a trained model, so the score geometry
    // is explicit. Users are positive and near-parallel; each item has a
    // flat per-coordinate scale (fixing the catalogue-wide order) plus
    // zero-mean direction noise (deciding near-ties per user). Heads span
    // scales 1.0..1.5 and carry a stacked planted boost of about 3x; the
    // band tails land exactly at BAND once their filler boost multiplies
    // in, which is below every boosted head but above the mid-scale heads
    // once the strong planted attribute goes.
    const BAND: f64 = 1.89;
    let mut heads_by_count: Vec<u32> = groups.head.iter().copied().collect();
    heads_by_count.sort_by_key(|it| {
        (std::cmp::Reverse(groups.counts.get(it).copied().unwrap_or(0)), *it)
    });
    let head_rank: HashMap<u32, usize> = heads_by_count
        .iter()
        .enumerate()
        .map(|(r, &it)| (it, r))
        .collect();
    let item_ids: Vec<u32> = log.items();
    let mut items_m = Mat::zeros(item_ids.len(), d);
    for (row, it) in item_ids.iter().enumerate() {
        let scale = if let Some(&r) = head_rank.get(it) {
            1.5 - 0.5 * r as f64 / (heads_by_count.len().max(2) - 1) as f64
        } else if let Some(&bp) = band_product.get(it) {
            BAND / bp
        } else if planted_tagged.contains(it) {
            rng.gen_range(0.40..0.55)
        } else {
            rng.gen_range(0.55..0.75)
        };
        let noise: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let mean = noise.iter().sum::<f64>() / d as f64;
        for j in 0..d {
            items_m.set(row, j, scale * (1.0 + noise[j] - mean));
        }
    }
    let user_ids: Vec<u32> = log.users();
    let users_m = Mat::uniform(user_ids.len(), d, 0.5, 1.5, &mut rng);
    let factors = LatentFactors {
        users: users_m,
        items: items_m,
        user_index: IdIndex::from_ids(user_ids),
        item_index: IdIndex::from_ids(item_ids),
    };

    let nodes: Vec<NodeRef> = hin.nodes().copied().collect();
    let mut vecs = Mat::zeros(nodes.len(), d);
    for (i, node) in nodes.iter().enumerate() {
        let flat = match node.kind {
            // Staggered planted boosts: removing the strong one already
            // drops the mid-scale heads below the band, so the reward
            // bonus fires on the first removal instead of only on the
            // last.
            NodeKind::ItemAttr if node.id == 0 => Some(2.2),
            NodeKind::ItemAttr if node.id == 1 => Some(1.3),
            NodeKind::ItemAttr if node.id == 2 => Some(1.05),
            NodeKind::ItemAttr => {
                Some(filler_boost.get(&node.id).copied().unwrap_or(1.0))
            }
            NodeKind::UserAttr => Some(1.0),
            _ => None,
        };
        for j in 0..d {
            let v = flat.unwrap_or_else(|| rng.gen_range(-1.0..1.0));
            vecs.set(i, j, v);
        }
    }
    let table = EmbeddingTable::new(nodes, vecs).unwrap();
    let mut dcfg = DisparityConfig::defaults_for(&groups);
    dcfg.epsilon = 300.0;
    // No seen-item exclusions here: every user ranks the full catalogue, so
    // the starting lists coincide and the erasure effect is isolated from
    // per-user history gaps.
    let exclude = HashMap::new();
    let truth = HashMap::new();
    let ctx = CfeContext {
        hin: &hin,
        factors: &factors,
        embeddings: &table,
        groups: &groups,
        dcfg: &dcfg,
        exclude: &exclude,
    };
    let ccfg = CfeConfig {
        state_dim: 16,
        top_k: 20,
        candidate_size: 12,
        episode_len: 1,
        episodes: 400,
        gamma: 0.9,
        c_max: 10.0,
        learning_rate: 0.05,
        end_to_end: true,
        seed: seed.wrapping_add(2),
    };
    let policy = train_explainer(&ctx, &ccfg).unwrap();
    let users: Vec<u32> = factors.user_index.ids().to_vec();
    // Stricter cumulative target for extraction than the per-step reward
    // bonus used in training: roughly three head swaps instead of one.
    let mut dcfg_extract = dcfg;
    dcfg_extract.epsilon = 900.0;
    let ctx_extract = CfeContext {
        hin: &hin,
        factors: &factors,
        embeddings: &table,
        groups: &groups,
        dcfg: &dcfg_extract,
        exclude: &exclude,
    };
    let budget = 1;
    let cfair: Vec<_> = users
        .iter()
        .map(|&u| extract_explanations(&ctx_extract, &policy, &ccfg, u, budget).unwrap())
        .collect();
    let space = hin.attributes();
    let rdexp = baseline_rdexp(&space, &users, budget, seed.wrapping_add(10));
    let popitem = baseline_pop(
        PopSide::Item,
        &log,
        &data.user_attr_edges,
        &data.item_attr_edges,
        &users,
        budget,
    );
    let setup = EvalSetup {
        factors: &factors,
        embeddings: &table,
        hin: &hin,
        groups: &groups,
        dcfg: &dcfg,
        truth: &truth,
        exclude: &exclude,
        k: 20,
    };
    let e = 5;
    let curve_c = erase_and_evaluate(&setup, &cfair, e, "cfairer").unwrap();
    let curve_r = erase_and_evaluate(&setup, &rdexp, e, "rdexp").unwrap();
    let curve_p = erase_and_evaluate(&setup, &popitem, e, "pop_item").unwrap();
    TrendCurves {
        cfair_ht: curve_c.points.iter().map(|(_, r)| r.ht).collect(),
        cfair_gini: curve_c.points.iter().map(|(_, r)| r.gini).collect(),
        rdexp_ht: curve_r.points.iter().map(|(_, r)| r.ht).collect(),
        popitem_ht: curve_p.points.iter().map(|(_, r)| r.ht).collect(),
    }
}

#[test]
fn criterion_5_erasure_trend() {
    let start = Instant::now();
    let seeds = 20;
    let points = 6;
    let mut avg = TrendCurves {
        cfair_ht: vec![0.0; points],
        cfair_gini: vec![0.0; points],
        rdexp_ht: vec![0.0; points],
        popitem_ht: vec![0.0; points],
    };
    for seed in 0..seeds {
        let run = trend_run(seed);
        for i in 0..points {
            avg.cfair_ht[i] += run.cfair_ht[i] / seeds as f64;
            avg.cfair_gini[i] += run.cfair_gini[i] / seeds as f64;
            avg.rdexp_ht[i] += run.rdexp_ht[i] / seeds as f64;
            avg.popitem_ht[i] += run.popitem_ht[i] / seeds as f64;
        }
    }
    eprintln!("avg ht   cfairer:  {:?}", avg.cfair_ht);
    eprintln!("avg gini cfairer:  {:?}", avg.cfair_gini);
    eprintln!("avg ht   rdexp:    {:?}", avg.rdexp_ht);
    eprintln!("avg ht   pop_item: {:?}", avg.popitem_ht);
    for i in 1..points {
        assert!(
            avg.cfair_ht[i] <= avg.cfair_ht[i - 1] + 1e-12,
            "averaged HT@20 not monotone at point {i}: {:?}",
            avg.cfair_ht
        );
        assert!(
            avg.cfair_gini[i] <= avg.cfair_gini[i - 1] + 1e-12,
            "averaged Gini@20 not monotone at point {i}: {:?}",
            avg.cfair_gini
        );
    }
    let red_c = avg.cfair_ht[0] - avg.cfair_ht[points - 1];
    let red_r = avg.rdexp_ht[0] - avg.rdexp_ht[points - 1];
    let red_p = avg.popitem_ht[0] - avg.popitem_ht[points - 1];
    assert!(
        red_c > red_r && red_c > red_p,
        "cumulative HT reduction {red_c} vs rdexp {red_r}, pop_item {red_p}"
    );
    assert!(start.elapsed().as_secs() < 900, "trend sweep too slow");
    println!("criterion 5/8 erasure trend: PASS");
}

// ---------------------------------------------------------------------------
// 6. Reward contract.
// ---------------------------------------------------------------------------

fn random_factors(rng: &mut ChaCha8Rng, d: usize) -> LatentFactors {
    LatentFactors {
        users: Mat::uniform(3, d, -1.0, 1.0, rng),
        items: Mat::uniform(5, d, -1.0, 1.0, rng),
        user_index: IdIndex::from_ids(vec![0, 1, 2]),
        item_index: IdIndex::from_ids(vec![0, 1, 2, 3, 4]),
    }
}

#[test]
fn criterion_6_reward_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    for _ in 0..300 {
        let d = rng.gen_range(2..6);
        let before = random_factors(&mut rng, d);
        let mut after = before.clone();
        for v in after.users.data_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
        for v in after.items.data_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
        let items: Vec<u32> = vec![0, 2, 4];
        let user = rng.gen_range(0..3u32);
        let d_before = rng.gen_range(0.0..30.0);
        let d_after = rng.gen_range(0.0..30.0);
        let eps = rng.gen_range(0.0..5.0);
        let r = counterfactual_reward(&before, &after, user, &items, d_before, d_after, eps)
            .unwrap();
        assert!((-2.0..=3.0).contains(&r), "reward {r} out of bounds");
        // Bonus decomposition: subtracting the proximity terms leaves the
        // indicator exactly.
        let mut prox = cosine(before.user_row(user).unwrap(), after.user_row(user).unwrap());
        let mut item_term = 0.0;
        for &v in &items {
            item_term += cosine(before.item_row(v).unwrap(), after.item_row(v).unwrap());
        }
        prox += item_term / items.len() as f64;
        let bonus = r - prox;
        let expected = if d_before - d_after >= eps { 1.0 } else { 0.0 };
        assert!(
            (bonus - expected).abs() < 1e-9,
            "bonus {bonus} vs expected {expected}"
        );
    }
    // Identity fusion with a disparity drop: exactly 3.
    let before = random_factors(&mut rng, 4);
    let r = counterfactual_reward(&before, &before, 0, &[0, 1], 10.0, 5.0, 1.0).unwrap();
    assert_eq!(r, 3.0);
    // Zero-vector operands contribute nothing.
    let mut zeroed = before.clone();
    for v in zeroed.users.row_mut(0) {
        *v = 0.0;
    }
    let r = counterfactual_reward(&before, &zeroed, 0, &[], 0.0, 0.0, 5.0).unwrap();
    assert_eq!(r, 0.0);
    println!("criterion 6/8 reward contract: PASS");
}

// ---------------------------------------------------------------------------
// 7. Preprocessing invariants at scale.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_preprocessing_invariants() {
    let syn = SyntheticConfig {
        users: 1000,
        items: 600,
        user_attrs: 10,
        item_attrs: 40,
        interactions: 60_000,
        skew: 1.2,
        planted_attrs: 3,
        hub_attrs: 4,
        seed: 0xC7,
    };
    let data = generate_synthetic(&syn).unwrap();
    // Re-draw graded ratings so binarization has real work to do.
    let mut rng = ChaCha8Rng::seed_from_u64(0x7C);
    let raw = InteractionLog::new(
        data.log
            .records
            .iter()
            .map(|r| Interaction {
                rating: rng.gen_range(1..=5) as f64,
                ..*r
            })
            .collect(),
    );
    assert_eq!(raw.num_users(), 1000);

    let bin = binarize(&raw, 4.0);
    assert_eq!(bin.records.len(), raw.records.len());
    for (b, r) in bin.records.iter().zip(&raw.records) {
        assert_eq!((b.user, b.item, b.timestamp), (r.user, r.item, r.timestamp));
        assert_eq!(b.rating, if r.rating >= 4.0 { 1.0 } else { 0.0 });
    }

    let cored = apply_k_core(&bin, 10).unwrap();
    let mut user_deg: HashMap<u32, usize> = HashMap::new();
    let mut item_deg: HashMap<u32, usize> = HashMap::new();
    for r in cored.positives() {
        *user_deg.entry(r.user).or_insert(0) += 1;
        *item_deg.entry(r.item).or_insert(0) += 1;
    }
    for (u, d) in &user_deg {
        assert!(*d >= 10, "user {u} has degree {d} after 10-core");
    }
    for (i, d) in &item_deg {
        assert!(*d >= 10, "item {i} has degree {d} after 10-core");
    }
    // Fixpoint: running the filter again changes nothing.
    let again = apply_k_core(&cored, 10).unwrap();
    assert_eq!(again, cored);
    // Subset of the binarized input.
    let bin_keys: BTreeSet<(u32, u32, i64)> = bin
        .records
        .iter()
        .map(|r| (r.user, r.item, r.timestamp))
        .collect();
    for r in &cored.records {
        assert!(bin_keys.contains(&(r.user, r.item, r.timestamp)));
    }

    let split = chronological_split(&cored, (0.6, 0.2, 0.2)).unwrap();
    let mut per_user: HashMap<u32, Vec<Interaction>> = HashMap::new();
    for r in &cored.records {
        per_user.entry(r.user).or_default().push(*r);
    }
    let collect = |log: &InteractionLog| -> HashMap<u32, Vec<Interaction>> {
        let mut m: HashMap<u32, Vec<Interaction>> = HashMap::new();
        for r in &log.records {
            m.entry(r.user).or_default().push(*r);
        }
        m
    };
    let tr = collect(&split.train);
    let va = collect(&split.validation);
    let te = collect(&split.test);
    for (u, mut recs) in per_user {
        recs.sort_by_key(|r| (r.timestamp, r.item));
        let n = recs.len();
        let n_train = ((0.6 * n as f64).ceil() as usize).min(n);
        let n_valid = ((0.2 * n as f64).ceil() as usize).min(n - n_train);
        let n_test = n - n_train - n_valid;
        let t = tr.get(&u).map_or(0, |v| v.len());
        let v = va.get(&u).map_or(0, |v| v.len());
        let e = te.get(&u).map_or(0, |v| v.len());
        assert_eq!((t, v, e), (n_train, n_valid, n_test), "split sizes for user {u}");
        // Chronological partition: the three segments are exactly the
        // sorted record sequence in order.
        let mut joined: Vec<Interaction> = Vec::new();
        joined.extend(tr.get(&u).cloned().unwrap_or_default());
        joined.extend(va.get(&u).cloned().unwrap_or_default());
        joined.extend(te.get(&u).cloned().unwrap_or_default());
        assert_eq!(joined, recs, "partition order for user {u}");
    }
    println!("criterion 7/8 preprocessing invariants: PASS");
}

// ---------------------------------------------------------------------------
// 8. End-to-end determinism of the CLI pipeline.
// ---------------------------------------------------------------------------

fn run_pipeline(bin: &str, config: &std::path::Path, out: &std::path::Path) {
    for cmd in ["prepare", "train-rec", "train-graph", "explain", "evaluate", "report"] {
        let status = std::process::Command::new(bin)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .arg(cmd)
            .env("CFAIR_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success(), "cfair {cmd} failed");
    }
}

fn collect_files(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_8_end_to_end_determinism() {
    let bin = env!("CARGO_BIN_EXE_cfair");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        "seed=123\n\
         synthetic.users=80\n\
         synthetic.items=100\n\
         synthetic.interactions=4000\n\
         synthetic.user_attrs=6\n\
         synthetic.item_attrs=20\n\
         data.k_core=5\n\
         rec.dim=8\n\
         rec.epochs=6\n\
         graph.layers=12,8\n\
         graph.out_dim=8\n\
         graph.epochs=6\n\
         cfe.state_dim=12\n\
         cfe.episodes=40\n\
         cfe.episode_len=3\n\
         cfe.candidate_size=8\n\
         eval.top_k=10\n\
         eval.erasure_length=3\n",
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_pipeline(bin, &config, &out_a);
    run_pipeline(bin, &config, &out_b);

    let files_a = collect_files(&out_a);
    assert!(
        files_a.iter().any(|p| p.ends_with("rec.ckpt"))
            && files_a.iter().any(|p| p.ends_with("policy.ckpt"))
            && files_a.iter().any(|p| p.ends_with("report.csv")),
        "pipeline artifacts missing: {files_a:?}"
    );
    for path_a in &files_a {
        let rel = path_a.strip_prefix(&out_a).unwrap();
        // The resolved-config echo embeds the output directory itself.
        if rel == std::path::Path::new("config.resolved.txt") {
            continue;
        }
        let path_b = out_b.join(rel);
        let bytes_a = std::fs::read(path_a).unwrap();
        let bytes_b = std::fs::read(&path_b)
            .unwrap_or_else(|e| panic!("missing {} in second run: {e}", rel.display()));
        assert_eq!(bytes_a, bytes_b, "artifact {} differs between runs", rel.display());
    }
    println!("criterion 8/8 end-to-end determinism: PASS");
}
