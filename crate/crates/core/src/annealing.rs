//! Deterministic annealing over β: clusters are duplicated with a small
//! perturbation, β is lowered, the model is retrained, and duplicates that
//! stayed indistinguishable are merged back.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::estimate_bounds;
use crate::data::Dataset;
use crate::encoders::{EncoderParams, TagMode};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Tagger};
use crate::objective::{train_from, EpochRecord, Selection, TrainControl, VIBConfig};
use crate::parser::DecoderParams;
use crate::tape::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    /// β is divided by `alpha` after every split.
    pub alpha: f64,
    /// Relative split perturbation; a split moves `u·p(c|x)` of the mass with
    /// `u` uniform in `[−epsilon_scale/2, epsilon_scale/2]`.
    pub epsilon_scale: f64,
    pub merge_threshold: f64,
    pub beta_start: f64,
    pub beta_min: f64,
    pub max_clusters: usize,
    /// Epoch cap for each inner optimization.
    pub max_epochs: usize,
    pub tolerance: f64,
    pub window: usize,
    /// Word types listed per node in the exported hierarchy.
    pub top_words: usize,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            alpha: 2.0,
            epsilon_scale: 0.05,
            merge_threshold: 0.01,
            beta_start: 10.0,
            beta_min: 1e-3,
            max_clusters: 16,
            max_epochs: 30,
            tolerance: 1e-5,
            window: 3,
            top_words: 10,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return bad("alpha must exceed 1");
        }
        if !(0.0..1.0).contains(&self.epsilon_scale) {
            return bad("epsilon_scale must lie in [0, 1)");
        }
        if !(self.merge_threshold > 0.0 && self.merge_threshold <= 1.0) {
            return bad("merge_threshold must lie in (0, 1]");
        }
        if !(self.beta_min > 0.0 && self.beta_start > self.beta_min && self.beta_start.is_finite()) {
            return bad("need 0 < beta_min < beta_start");
        }
        if self.max_clusters < 1 || self.max_epochs == 0 || self.window == 0 {
            return bad("max_clusters, max_epochs and window must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// β of the inner optimization that followed this node's split.
    pub split_beta: Option<f64>,
    /// β values at which this node's children were merged back.
    pub remerged_at: Vec<f64>,
    /// Average `p(c|x)` over training tokens.
    pub mass: f64,
    /// Soft token mass per gold POS.
    pub pos_mass: BTreeMap<String, f64>,
    /// Tokens whose most probable leaf lies under this node, per gold POS.
    pub assigned: BTreeMap<String, usize>,
    /// Most probable word types with their soft counts.
    pub top_words: Vec<(String, f64)>,
}

impl ClusterNode {
    fn new(id: usize, parent: Option<usize>) -> Self {
        ClusterNode {
            id,
            parent,
            children: Vec::new(),
            split_beta: None,
            remerged_at: Vec::new(),
            mass: 0.0,
            pos_mass: BTreeMap::new(),
            assigned: BTreeMap::new(),
            top_words: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Majority share of the hard-assigned tokens (1 for an empty node).
    pub fn purity(&self) -> f64 {
        let total: usize = self.assigned.values().sum();
        if total == 0 {
            return 1.0;
        }
        *self.assigned.values().max().unwrap() as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub nodes: Vec<ClusterNode>,
    /// Leaf node ids in tag-column order.
    pub columns: Vec<usize>,
}

impl Default for ClusterTree {
    fn default() -> Self {
        ClusterTree {
            nodes: vec![ClusterNode::new(0, None)],
            columns: vec![0],
        }
    }
}

impl ClusterTree {
    pub fn n_leaves(&self) -> usize {
        self.columns.len()
    }

    pub fn leaves(&self) -> Vec<&ClusterNode> {
        self.columns.iter().map(|&i| &self.nodes[i]).collect()
    }

    /// Word types listed under each leaf.
    pub fn leaf_members(&self) -> BTreeMap<usize, Vec<String>> {
        self.leaves()
            .into_iter()
            .map(|n| (n.id, n.top_words.iter().map(|(w, _)| w.clone()).collect()))
            .collect()
    }

    fn add_node(&mut self, parent: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(ClusterNode::new(id, Some(parent)));
        self.nodes[parent].children.push(id);
        id
    }

    /// Nested view rooted at `id`.
    pub fn nested(&self, id: usize) -> serde_json::Value {
        let n = &self.nodes[id];
        let mut v = serde_json::json!({
            "id": n.id,
            "split_beta": n.split_beta,
            "remerged_at": n.remerged_at,
            "mass": n.mass,
            "pos_mass": n.pos_mass,
            "assigned": n.assigned,
            "top_words": n.top_words,
        });
        if !n.is_leaf() {
            v["children"] = n.children.iter().map(|&c| self.nested(c)).collect();
        }
        v
    }

    /// Rebuilds a tree from its nested JSON form.
    pub fn from_nested(value: &serde_json::Value) -> Result<Self> {
        fn walk(tree: &mut ClusterTree, v: &serde_json::Value, parent: Option<usize>) -> Result<usize> {
            let id = tree.nodes.len();
            let mut node = ClusterNode::new(id, parent);
            let field = |k: &str| v.get(k).cloned().unwrap_or(serde_json::Value::Null);
            node.split_beta = serde_json::from_value(field("split_beta"))?;
            node.remerged_at = serde_json::from_value(field("remerged_at"))?;
            node.mass = serde_json::from_value(field("mass"))?;
            node.pos_mass = serde_json::from_value(field("pos_mass"))?;
            node.assigned = serde_json::from_value(field("assigned"))?;
            node.top_words = serde_json::from_value(field("top_words"))?;
            tree.nodes.push(node);
            match v.get("children").and_then(|c| c.as_array()) {
                Some(children) => {
                    for c in children {
                        let child = walk(tree, c, Some(id))?;
                        tree.nodes[id].children.push(child);
                    }
                }
                None => tree.columns.push(id),
            }
            Ok(id)
        }
        let mut tree = ClusterTree {
            nodes: Vec::new(),
            columns: Vec::new(),
        };
        walk(&mut tree, value, None)?;
        Ok(tree)
    }
}

/// Writes the nested hierarchy as pretty JSON.
pub fn export_tree(tree: &ClusterTree, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&tree.nested(0))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_tree(path: impl AsRef<Path>) -> Result<ClusterTree> {
    let text = std::fs::read_to_string(path)?;
    ClusterTree::from_nested(&serde_json::from_str(&text)?)
}

/// Record of one β step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnealStep {
    pub beta: f64,
    pub leaves_after_split: usize,
    pub leaves: usize,
    pub ixt_upper: f64,
    pub epochs: usize,
    pub converged: bool,
    /// Hard-assignment purity of each leaf after merging, in column order.
    pub leaf_purity: Vec<f64>,
    #[serde(skip)]
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct AnnealOutcome {
    pub tree: ClusterTree,
    pub params: ModelParams,
    pub steps: Vec<AnnealStep>,
}

fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// `p(c|x)` for every training token, one row per token.
pub fn cluster_probs(params: &ModelParams, dataset: &Dataset) -> Result<Mat> {
    let Tagger::Vib { token, .. } = &params.tagger else {
        return Err(Error::Config("annealing needs a stochastic tagger".into()));
    };
    let mut parts = Vec::with_capacity(dataset.len());
    for ex in &dataset.examples {
        parts.push(softmax_rows(&token.raw(&ex.tokens)?));
    }
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Config(e.to_string()))
}

/// Appends a copy of column `i`.
fn dup_col(m: &Mat, i: usize) -> Mat {
    let col = m.column(i).to_owned().insert_axis(Axis(1));
    ndarray::concatenate(Axis(1), &[m.view(), col.view()]).expect("same rows")
}

fn dup_row(m: &Mat, i: usize) -> Mat {
    let row = m.row(i).to_owned().insert_axis(Axis(0));
    ndarray::concatenate(Axis(0), &[m.view(), row.view()]).expect("same cols")
}

fn drop_index(m: &Mat, axis: Axis, j: usize) -> Mat {
    let keep: Vec<usize> = (0..m.len_of(axis)).filter(|&x| x != j).collect();
    m.select(axis, &keep)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Splits output column `i` of an encoder; the copy goes last. Logits get
/// `ln(½ ± u)` so the two probabilities sum to the parent's.
fn split_logits(bias: &mut Mat, i: usize, u: f64) {
    let z = bias[[0, i]];
    let grown = dup_col(bias, i);
    *bias = grown;
    bias[[0, i]] = z + (0.5 + u).ln();
    let last = bias.ncols() - 1;
    bias[[0, last]] = z + (0.5 - u).ln();
}

fn split_encoder(enc: &mut EncoderParams, i: usize, u: f64) {
    enc.output.w = dup_col(&enc.output.w, i);
    split_logits(&mut enc.output.b, i, u);
}

fn merge_encoder(enc: &mut EncoderParams, i: usize, j: usize) {
    let w = &mut enc.output.w;
    let avg = (&w.column(i) + &w.column(j)) / 2.0;
    w.column_mut(i).assign(&avg);
    enc.output.w = drop_index(&enc.output.w, Axis(1), j);
    let b = &mut enc.output.b;
    b[[0, i]] = log_add_exp(b[[0, i]], b[[0, j]]);
    enc.output.b = drop_index(&enc.output.b, Axis(1), j);
}

/// Input-side weights of the decoder, the matrices whose rows index tags.
fn decoder_inputs(dec: &mut DecoderParams) -> Vec<&mut Mat> {
    match &mut dec.recurrent {
        Some((f, b)) => vec![&mut f.w_ih, &mut b.w_ih],
        None => vec![&mut dec.arc_head.w, &mut dec.arc_dep.w, &mut dec.label_head.w, &mut dec.label_dep.w],
    }
}

fn split_decoder(dec: &mut DecoderParams, i: usize) {
    for w in decoder_inputs(dec) {
        *w = dup_row(w, i);
    }
    let half = dec.root[[0, i]] / 2.0;
    dec.root[[0, i]] = half;
    dec.root = dup_col(&dec.root, i);
    dec.config.input_dim += 1;
}

fn merge_decoder(dec: &mut DecoderParams, i: usize, j: usize) {
    for w in decoder_inputs(dec) {
        let avg = (&w.row(i) + &w.row(j)) / 2.0;
        w.row_mut(i).assign(&avg);
        *w = drop_index(w, Axis(0), j);
    }
    dec.root[[0, i]] += dec.root[[0, j]];
    dec.root = drop_index(&dec.root, Axis(1), j);
    dec.config.input_dim -= 1;
}

fn set_k(params: &mut ModelParams, k: usize) {
    let mode = TagMode::Discrete { k };
    params.config.mode = mode;
    if let Tagger::Vib { token, marginal, types } = &mut params.tagger {
        token.mode = mode;
        marginal.mode = mode;
        types.mode = mode;
    }
}

fn n_tags(params: &ModelParams) -> usize {
    params.decoder.config.input_dim
}

/// Duplicates tag `i` into `i` and a new last tag, moving mass `½ ± u`.
pub fn split_cluster(params: &mut ModelParams, i: usize, u: f64) -> Result<()> {
    if !(u.abs() < 0.5) {
        return Err(Error::Config(format!("split offset {u} outside (−½, ½)")));
    }
    let Tagger::Vib { token, marginal, types } = &mut params.tagger else {
        return Err(Error::Config("annealing needs a stochastic tagger".into()));
    };
    split_encoder(token, i, u);
    split_encoder(types, i, u);
    split_logits(&mut marginal.values, i, u);
    split_decoder(&mut params.decoder, i);
    let k = n_tags(params);
    set_k(params, k);
    Ok(())
}

/// Folds tag `j` into tag `i` (approximately: encoder weights are averaged,
/// biases and the marginal combined exactly).
pub fn merge_clusters(params: &mut ModelParams, i: usize, j: usize) -> Result<()> {
    let Tagger::Vib { token, marginal, types } = &mut params.tagger else {
        return Err(Error::Config("annealing needs a stochastic tagger".into()));
    };
    merge_encoder(token, i, j);
    merge_encoder(types, i, j);
    let v = &mut marginal.values;
    v[[0, i]] = log_add_exp(v[[0, i]], v[[0, j]]);
    marginal.values = drop_index(&marginal.values, Axis(1), j);
    merge_decoder(&mut params.decoder, i, j);
    let k = n_tags(params);
    set_k(params, k);
    Ok(())
}

/// Largest per-token gap between two sibling tags after rescaling both to
/// an even share of their joint mass. The bound does not change when mass
/// moves between two tags the decoder treats alike, so an uneven but
/// uninformative split counts as no split. A sibling that is nearly empty
/// on every token gives a gap of 0.
fn sibling_gap(probs: &Mat, a: usize, b: usize) -> f64 {
    let (pa, pb) = (probs.column(a), probs.column(b));
    let peak = |c: &ndarray::ArrayView1<f64>| c.fold(0.0f64, |m, &v| m.max(v));
    let max_gap = |sa: f64, sb: f64| pa.iter().zip(pb).fold(0.0f64, |m, (p, q)| m.max((sa * p - sb * q).abs()));
    let (ma, mb) = (pa.sum(), pb.sum());
    if ma <= 0.0 || mb <= 0.0 {
        return 0.0;
    }
    let even = max_gap((ma + mb) / (2.0 * ma), (ma + mb) / (2.0 * mb));
    let raw = max_gap(1.0, 1.0);
    let dead = peak(&pa).min(peak(&pb));
    even.min(raw).min(dead)
}

/// Merges leaf siblings whose probabilities differ by at most `threshold`
/// on every token, repeating until nothing changes. Returns the number of
/// merges.
fn merge_pass(
    tree: &mut ClusterTree,
    params: &mut ModelParams,
    dataset: &Dataset,
    threshold: f64,
    beta: f64,
) -> Result<usize> {
    let mut merges = 0;
    loop {
        if tree.n_leaves() < 2 {
            return Ok(merges);
        }
        let probs = cluster_probs(params, dataset)?;
        let mut found = None;
        'search: for (ci, &a) in tree.columns.iter().enumerate() {
            let Some(parent) = tree.nodes[a].parent else { continue };
            let sib = &tree.nodes[parent].children;
            if sib.len() != 2 || sib[0] != a {
                continue;
            }
            let Some(cj) = tree.columns.iter().position(|&x| x == sib[1]) else { continue };
            let gap = sibling_gap(&probs, ci, cj);
            log::debug!("siblings {a}/{}: gap {gap:.4}, masses {:.4}/{:.4}", sib[1], probs.column(ci).mean().unwrap_or(0.0), probs.column(cj).mean().unwrap_or(0.0));
            if gap <= threshold {
                found = Some((ci, cj, parent));
                break 'search;
            }
        }
        let Some((ci, cj, parent)) = found else {
            return Ok(merges);
        };
        if tree.n_leaves() == 2 {
            // A single cluster is kept as the pre-split state; the next
            // duplication rebuilds two columns from it.
            let keep = ci.min(cj);
            collapse_to_one(params, keep)?;
        } else {
            merge_clusters(params, ci.min(cj), ci.max(cj))?;
        }
        let node = &mut tree.nodes[parent];
        node.children.clear();
        node.remerged_at.push(beta);
        let lo = ci.min(cj);
        tree.columns[lo] = parent;
        tree.columns.remove(ci.max(cj));
        merges += 1;
    }
}

/// Reduces a two-tag model to one tag. Encoders keep the surviving column;
/// probabilities are identically 1 afterwards.
fn collapse_to_one(params: &mut ModelParams, keep: usize) -> Result<()> {
    let other = 1 - keep;
    merge_clusters(params, keep, other)
}

fn pos_key(dataset: &Dataset, ex: usize, i: usize) -> (String, String) {
    let s = &dataset.examples[ex].sentence;
    (s.pos[i].clone(), s.tokens[i].clone())
}

/// Recomputes per-node statistics from the current leaves.
fn annotate(tree: &mut ClusterTree, params: &ModelParams, dataset: &Dataset, top: usize) -> Result<()> {
    let k = tree.n_leaves();
    let probs = if k == 1 {
        Mat::ones((dataset.n_tokens(), 1))
    } else {
        cluster_probs(params, dataset)?
    };
    let n_tokens = probs.nrows().max(1) as f64;
    let mut pos_mass = vec![BTreeMap::<String, f64>::new(); k];
    let mut assigned = vec![BTreeMap::<String, usize>::new(); k];
    let mut words = vec![BTreeMap::<String, f64>::new(); k];
    let mut row = 0;
    for (e, ex) in dataset.examples.iter().enumerate() {
        for i in 0..ex.len() {
            let (pos, word) = pos_key(dataset, e, i);
            let p = probs.row(row);
            for c in 0..k {
                *pos_mass[c].entry(pos.clone()).or_default() += p[c];
                *words[c].entry(word.clone()).or_default() += p[c];
            }
            let best = crate::dists::argmax(&p.to_vec());
            *assigned[best].entry(pos.clone()).or_default() += 1;
            row += 1;
        }
    }
    for node in &mut tree.nodes {
        node.mass = 0.0;
        node.pos_mass.clear();
        node.assigned.clear();
        node.top_words.clear();
    }
    let mut word_totals: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); tree.nodes.len()];
    for (c, &leaf) in tree.columns.clone().iter().enumerate() {
        let mass: f64 = probs.column(c).sum() / n_tokens;
        let mut at = Some(leaf);
        while let Some(id) = at {
            let node = &mut tree.nodes[id];
            node.mass += mass;
            for (p, m) in &pos_mass[c] {
                *node.pos_mass.entry(p.clone()).or_default() += m;
            }
            for (p, m) in &assigned[c] {
                *node.assigned.entry(p.clone()).or_default() += m;
            }
            for (w, m) in &words[c] {
                *word_totals[id].entry(w.clone()).or_default() += m;
            }
            at = node.parent;
        }
    }
    for (node, totals) in tree.nodes.iter_mut().zip(word_totals) {
        let mut ranked: Vec<(String, f64)> = totals.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(top);
        node.top_words = ranked;
    }
    Ok(())
}

/// Runs the annealing loop on discrete tags, starting from a single cluster
/// at `cfg.beta_start`.
pub fn anneal(dataset: &Dataset, cfg: &AnnealConfig, base: &VIBConfig) -> Result<AnnealOutcome> {
    cfg.validate()?;
    if !matches!(base.mode, TagMode::Discrete { .. }) {
        return Err(Error::Config("annealing needs discrete tags".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("annealing needs a non-empty training set".into()));
    }
    let vib = VIBConfig {
        mode: TagMode::Discrete { k: 2 },
        beta: cfg.beta_start,
        gamma: None,
        kind: crate::model::ModelKind::Vib,
        ..base.clone()
    };
    vib.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(vib.seed);
    let mut params = ModelParams::new(&vib, dataset, &mut rng)?;
    // Fold the random second tag into the first: the starting state is one
    // cluster.
    collapse_to_one(&mut params, 0)?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(crate::objective::stream_seed(vib.seed, 0, 0xa11e));

    let mut tree = ClusterTree::default();
    let mut steps = Vec::new();
    let mut beta = cfg.beta_start;
    let mut epoch_offset = 0;
    loop {
        // Duplicate as many leaves as the cap allows.
        let room = cfg.max_clusters.saturating_sub(tree.n_leaves());
        let to_split: Vec<usize> = (0..tree.n_leaves()).take(room).collect();
        if to_split.is_empty() {
            break;
        }
        let next_beta = beta / cfg.alpha;
        for &c in &to_split {
            let u = cfg.epsilon_scale * (split_rng.gen::<f64>() - 0.5);
            split_cluster(&mut params, c, u)?;
            let node = tree.columns[c];
            let a = tree.add_node(node);
            let b = tree.add_node(node);
            tree.nodes[node].split_beta = Some(next_beta);
            tree.columns[c] = a;
            tree.columns.push(b);
        }
        let leaves_after_split = tree.n_leaves();
        beta = next_beta;
        params.config.beta = beta;
        params.config.gamma = None;
        let outcome = train_from(
            params,
            dataset,
            None,
            TrainControl {
                epochs: cfg.max_epochs,
                epoch_offset,
                convergence: Some((cfg.tolerance, cfg.window)),
                select_by: Selection::Last,
            },
        )?;
        if !outcome.converged {
            log::warn!("β = {beta}: inner optimization hit its {}-epoch budget", cfg.max_epochs);
        }
        epoch_offset += outcome.history.len();
        params = outcome.params;
        merge_pass(&mut tree, &mut params, dataset, cfg.merge_threshold, beta)?;
        let ixt_upper = if tree.n_leaves() == 1 {
            0.0
        } else {
            estimate_bounds(dataset, &params, 1, vib.seed)?.ixt_upper.unwrap_or(0.0)
        };
        annotate(&mut tree, &params, dataset, cfg.top_words)?;
        let leaf_purity: Vec<f64> = tree.leaves().iter().map(|n| n.purity()).collect();
        log::info!(
            "β = {beta:.4e}: {leaves_after_split} → {} leaves, I(X;T) ≤ {ixt_upper:.4}, purity {leaf_purity:.3?}",
            tree.n_leaves()
        );
        steps.push(AnnealStep {
            beta,
            leaves_after_split,
            leaves: tree.n_leaves(),
            ixt_upper,
            epochs: outcome.history.len(),
            converged: outcome.converged,
            leaf_purity,
            history: outcome.history,
        });
        if beta < cfg.beta_min || tree.n_leaves() >= cfg.max_clusters {
            break;
        }
    }
    if steps.is_empty() {
        annotate(&mut tree, &params, dataset, cfg.top_words)?;
    }
    Ok(AnnealOutcome { tree, params, steps })
}
