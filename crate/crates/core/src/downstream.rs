//! Consumers of node IDs: embedders, MLP heads, clustering, retrieval and
//! the ego-graph edit distance used to audit retrieval.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::autodiff::{AdamState, Pool, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{self, EdgeSplit, Graph, SplitMasks};
use crate::kmeans::{kmeans, KMeansFit};
use crate::metrics;
use crate::nn::{self, relu_inplace, Mlp, Parameters};
use crate::rng::{self, Stream};
use crate::vq::Metric;

/// Per-node tuples of `L·M` codewords, layer-major and level-minor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeIdTable {
    pub num_nodes: usize,
    pub layers: usize,
    pub levels: usize,
    pub k: usize,
    /// `num_nodes × (layers·levels)`, row-major.
    pub codes: Vec<u8>,
}

impl NodeIdTable {
    pub fn new(layers: usize, levels: usize, k: usize, codes: Vec<u8>) -> Result<Self> {
        let width = layers * levels;
        if width == 0 {
            return Err(Error::Config("ID width L·M must be at least 1".into()));
        }
        if !(2..=255).contains(&k) {
            return Err(Error::Config(format!("K = {k} outside [2, 255]")));
        }
        if codes.len() % width != 0 {
            return Err(Error::ShapeMismatch {
                op: "node id table",
                left: (codes.len() / width, width),
                right: (codes.len(), 1),
            });
        }
        if let Some(bad) = codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Format(format!("codeword {bad} outside [0, {k})")));
        }
        Ok(Self {
            num_nodes: codes.len() / width,
            layers,
            levels,
            k,
            codes,
        })
    }

    pub fn width(&self) -> usize {
        self.layers * self.levels
    }

    pub fn id(&self, node: usize) -> &[u8] {
        let w = self.width();
        &self.codes[node * w..(node + 1) * w]
    }

    /// Rows restricted to `nodes`, in that order.
    pub fn subset(&self, nodes: &[usize]) -> Result<Self> {
        let mut codes = Vec::with_capacity(nodes.len() * self.width());
        for &v in nodes {
            self.check(v)?;
            codes.extend_from_slice(self.id(v));
        }
        Self::new(self.layers, self.levels, self.k, codes)
    }

    pub fn distinct_ids(&self) -> usize {
        let set: HashSet<&[u8]> = (0..self.num_nodes).map(|v| self.id(v)).collect();
        set.len()
    }

    fn check(&self, v: usize) -> Result<()> {
        if v >= self.num_nodes {
            return Err(Error::IndexOutOfRange {
                index: v,
                num_nodes: self.num_nodes,
                line: 0,
            });
        }
        Ok(())
    }
}

/// Number of positions at which two IDs differ.
pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    OneHot,
    Learned,
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-hot" => Ok(Self::OneHot),
            "learned" => Ok(Self::Learned),
            other => Err(Error::Config(format!(
                "unknown embedder '{other}' (one-hot|learned)"
            ))),
        }
    }
}

/// Maps an ID tuple to a dense row.
#[derive(Clone, Debug, PartialEq)]
pub enum IdEmbedder {
    /// Parameter-free: one block of `K` indicator columns per position.
    OneHot { width: usize, k: usize },
    /// One trainable `K × d_e` table per position.
    Learned { tables: Vec<Tensor> },
}

impl IdEmbedder {
    pub fn one_hot(tbl: &NodeIdTable) -> Self {
        Self::OneHot {
            width: tbl.width(),
            k: tbl.k,
        }
    }

    pub fn learned<R: Rng + ?Sized>(tbl: &NodeIdTable, dim: usize, rng: &mut R) -> Self {
        let tables = (0..tbl.width())
            .map(|_| nn::glorot(tbl.k, dim, rng))
            .collect();
        Self::Learned { tables }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Self::OneHot { width, k } => width * k,
            Self::Learned { tables } => tables.iter().map(Tensor::cols).sum(),
        }
    }

    fn check(&self, tbl: &NodeIdTable) -> Result<()> {
        let ok = match self {
            Self::OneHot { width, k } => *width == tbl.width() && *k == tbl.k,
            Self::Learned { tables } => {
                tables.len() == tbl.width() && tables.iter().all(|t| t.rows() == tbl.k)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "id embedder",
                left: (tbl.width(), tbl.k),
                right: (self.output_width(), 0),
            })
        }
    }

    /// One row per entry of `nodes`.
    pub fn embed_ids(&self, tbl: &NodeIdTable, nodes: &[usize]) -> Result<Tensor> {
        self.check(tbl)?;
        let mut out = Tensor::zeros(nodes.len(), self.output_width());
        for (r, &v) in nodes.iter().enumerate() {
            tbl.check(v)?;
            let row = out.row_mut(r);
            match self {
                Self::OneHot { k, .. } => {
                    for (p, &c) in tbl.id(v).iter().enumerate() {
                        row[p * k + c as usize] = 1.0;
                    }
                }
                Self::Learned { tables } => {
                    let mut off = 0;
                    for (t, &c) in tables.iter().zip(tbl.id(v)) {
                        row[off..off + t.cols()].copy_from_slice(t.row(c as usize));
                        off += t.cols();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Embedding recorded on a tape. `vars` are this embedder's bound tables
    /// (none for one-hot).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        tbl: &NodeIdTable,
        nodes: &[usize],
    ) -> Result<Var> {
        match self {
            Self::OneHot { .. } => Ok(tape.constant(self.embed_ids(tbl, nodes)?)),
            Self::Learned { .. } => {
                self.check(tbl)?;
                let mut parts = Vec::with_capacity(vars.len());
                for (p, &table) in vars.iter().enumerate() {
                    let mut idx = Vec::with_capacity(nodes.len());
                    for &v in nodes {
                        tbl.check(v)?;
                        idx.push(tbl.id(v)[p] as usize);
                    }
                    parts.push(tape.gather_rows(table, &idx)?);
                }
                tape.concat_cols(&parts)
            }
        }
    }
}

impl Parameters for IdEmbedder {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Self::OneHot { .. } => Vec::new(),
            Self::Learned { tables } => tables.iter().collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::OneHot { .. } => Vec::new(),
            Self::Learned { tables } => tables.iter_mut().collect(),
        }
    }
}

/// Hyperparameters of the downstream heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub dropout: f32,
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub embed: EmbedMode,
    pub embed_dim: usize,
    pub hits_k: usize,
    pub pool: Pool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            dropout: 0.5,
            lr: 1e-2,
            weight_decay: 0.0,
            epochs: 1000,
            patience: 100,
            seed: 0,
            embed: EmbedMode::OneHot,
            embed_dim: 16,
            hits_k: 10,
            pool: Pool::Mean,
        }
    }
}

/// ID embedder followed by an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub embedder: IdEmbedder,
    pub mlp: Mlp,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(
        tbl: &NodeIdTable,
        cfg: &HeadConfig,
        in_mult: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let embedder = match cfg.embed {
            EmbedMode::OneHot => IdEmbedder::one_hot(tbl),
            EmbedMode::Learned => IdEmbedder::learned(tbl, cfg.embed_dim, rng),
        };
        let mut dims = vec![embedder.output_width() * in_mult];
        dims.extend(&cfg.hidden);
        dims.push(d_out);
        let mlp = Mlp::new(&dims, cfg.dropout, rng);
        Self { embedder, mlp }
    }

    fn split_vars<'a>(&self, vars: &'a [Var]) -> (&'a [Var], &'a [Var]) {
        vars.split_at(self.embedder.params().len())
    }

    /// Inference logits for `nodes`. With a one-hot embedder the first layer
    /// is a sum of `L·M` weight rows instead of a dense product.
    pub fn predict(&self, tbl: &NodeIdTable, nodes: &[usize]) -> Result<Tensor> {
        match &self.embedder {
            IdEmbedder::OneHot { k, .. } if self.mlp.d_in() == self.embedder.output_width() => {
                self.embedder.check(tbl)?;
                let first = &self.mlp.layers[0];
                let d = first.d_out();
                let mut h = Tensor::zeros(nodes.len(), d);
                for (r, &v) in nodes.iter().enumerate() {
                    tbl.check(v)?;
                    let row = h.row_mut(r);
                    row.copy_from_slice(first.bias.data());
                    for (p, &c) in tbl.id(v).iter().enumerate() {
                        let w = first.weight.row(p * k + c as usize);
                        row.iter_mut().zip(w).for_each(|(o, x)| *o += x);
                    }
                }
                for layer in &self.mlp.layers[1..] {
                    relu_inplace(&mut h);
                    h = layer.apply(&h)?;
                }
                Ok(h)
            }
            _ => self.mlp.apply(&self.embedder.embed_ids(tbl, nodes)?),
        }
    }
}

impl Parameters for MlpHead {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.embedder.params();
        p.extend(self.mlp.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.embedder.params_mut();
        p.extend(self.mlp.params_mut());
        p
    }
}

fn adam_for(cfg: &HeadConfig) -> AdamState {
    AdamState::new(cfg.lr).with_weight_decay(cfg.weight_decay)
}

fn apply_step(head: &mut MlpHead, opt: &mut AdamState, tape: &Tape, vars: &[Var]) -> Result<()> {
    let g: Vec<Option<Tensor>> = nn::grads(tape, vars).into_iter().map(|g| g.cloned()).collect();
    let refs: Vec<Option<&Tensor>> = g.iter().map(Option::as_ref).collect();
    opt.step(&mut head.params_mut(), &refs)
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Tracks the best validation score and decides when to stop.
struct EarlyStop<T> {
    best: Option<(f64, T)>,
    since: usize,
    patience: usize,
}

impl<T> EarlyStop<T> {
    fn new(patience: usize) -> Self {
        Self {
            best: None,
            since: 0,
            patience,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, score: f64, snapshot: impl FnOnce() -> T) -> bool {
        let better = self.best.as_ref().is_none_or(|(b, _)| score > *b);
        if better {
            self.best = Some((score, snapshot()));
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct NodeHeadResult {
    pub head: MlpHead,
    /// `"accuracy"` or `"roc-auc"`.
    pub metric: &'static str,
    pub valid: f64,
    pub test: f64,
    pub epochs: usize,
}

/// Trains an MLP on embedded IDs for node classification. Binary tasks are
/// scored by ROC-AUC, all others by accuracy.
pub fn train_node_head(
    tbl: &NodeIdTable,
    labels: &[i32],
    splits: &SplitMasks,
    cfg: &HeadConfig,
) -> Result<NodeHeadResult> {
    let n = tbl.num_nodes;
    if labels.len() != n || splits.train.len() != n {
        return Err(Error::ShapeMismatch {
            op: "node head",
            left: (n, 1),
            right: (labels.len(), splits.train.len()),
        });
    }
    let mask = |m: &[bool]| -> Vec<bool> { (0..n).map(|i| m[i] && labels[i] >= 0).collect() };
    let (train, valid, test) = (mask(&splits.train), mask(&splits.valid), mask(&splits.test));
    let targets: Vec<usize> = labels.iter().map(|&y| y.max(0) as usize).collect();
    let train_classes: HashSet<usize> = (0..n).filter(|&i| train[i]).map(|i| targets[i]).collect();
    if train_classes.len() < 2 {
        return Err(Error::Config(format!(
            "training set has {} distinct class(es); need at least 2",
            train_classes.len()
        )));
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let binary = num_classes == 2;
    let score = |logits: &Tensor, m: &[bool]| -> Result<f64> {
        if binary {
            let (mut s, mut y) = (Vec::new(), Vec::new());
            for i in (0..n).filter(|&i| m[i]) {
                s.push((logits.get(i, 1) - logits.get(i, 0)) as f64);
                y.push(targets[i] == 1);
            }
            metrics::roc_auc(&s, &y)
        } else {
            Ok(metrics::accuracy(&argmax_rows(logits), &targets, m))
        }
    };

    let mut init_rng = rng::stream(cfg.seed, Stream::Head);
    let mut drop_rng = rng::stream(cfg.seed, Stream::Dropout);
    let mut head = MlpHead::new(tbl, cfg, 1, num_classes, &mut init_rng);
    let mut opt = adam_for(cfg);
    let all: Vec<usize> = (0..n).collect();
    let onehot = match head.embedder {
        IdEmbedder::OneHot { .. } => Some(head.embedder.embed_ids(tbl, &all)?),
        IdEmbedder::Learned { .. } => None,
    };
    let mut stop = EarlyStop::new(cfg.patience);
    let mut epochs = 0;
    for epoch in 0..cfg.epochs {
        epochs = epoch + 1;
        let mut tape = Tape::new();
        let vars = nn::bind(&mut tape, &head);
        let (ev, mv) = head.split_vars(&vars);
        let x = match &onehot {
            Some(t) => tape.constant(t.clone()),
            None => head.embedder.forward(&mut tape, ev, tbl, &all)?,
        };
        let logits = head.mlp.forward(&mut tape, mv, x, true, &mut drop_rng)?;
        let loss = tape.softmax_cross_entropy(logits, &targets, &train)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::Diverged { epoch });
        }
        tape.backward(loss)?;
        apply_step(&mut head, &mut opt, &tape, &vars)?;
        let logits = head.predict(tbl, &all)?;
        let v = score(&logits, &valid)?;
        if stop.observe(v, || head.clone()) {
            break;
        }
    }
    let (valid_score, best) = stop.best.expect("at least one epoch");
    let test_score = score(&best.predict(tbl, &all)?, &test)?;
    Ok(NodeHeadResult {
        head: best,
        metric: if binary { "roc-auc" } else { "accuracy" },
        valid: valid_score,
        test: test_score,
        epochs,
    })
}

#[derive(Clone, Debug)]
pub struct LinkHeadResult {
    pub head: MlpHead,
    pub k: usize,
    pub valid_hits: f64,
    pub test_hits: f64,
    /// Hits@k of uninformative scores on the test negatives.
    pub null_hits: f64,
    pub epochs: usize,
}

fn pair_features(
    tape: &mut Tape,
    x: Var,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = tape.gather_rows(x, &us)?;
    let b = tape.gather_rows(x, &vs)?;
    tape.hadamard(a, b)
}

/// Scores of `pairs` under a trained link head.
pub fn link_scores(head: &MlpHead, tbl: &NodeIdTable, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..tbl.num_nodes).collect();
    let e = head.embedder.embed_ids(tbl, &all)?;
    let mut x = Tensor::zeros(pairs.len(), e.cols());
    for (r, &(u, v)) in pairs.iter().enumerate() {
        let (eu, ev) = (e.row(u), e.row(v));
        for (o, (a, b)) in x.row_mut(r).iter_mut().zip(eu.iter().zip(ev)) {
            *o = a * b;
        }
    }
    Ok(head.mlp.apply(&x)?.data().iter().map(|&s| s as f64).collect())
}

/// Trains an MLP on `embed(u) ⊙ embed(v)` with one fresh negative per
/// positive each epoch, drawn from non-edges of `g`.
pub fn train_link_head(
    tbl: &NodeIdTable,
    g: &Graph,
    edges: &EdgeSplit,
    cfg: &HeadConfig,
) -> Result<LinkHeadResult> {
    if tbl.num_nodes != g.num_nodes() {
        return Err(Error::ShapeMismatch {
            op: "link head",
            left: (tbl.num_nodes, 0),
            right: (g.num_nodes(), 0),
        });
    }
    if edges.train_pos.is_empty() {
        return Err(Error::Empty("training edges"));
    }
    let mut init_rng = rng::stream(cfg.seed, Stream::Head);
    let mut drop_rng = rng::stream(cfg.seed, Stream::Dropout);
    let mut neg_rng = rng::stream(cfg.seed, Stream::Negatives);
    let mut head = MlpHead::new(tbl, cfg, 1, 1, &mut init_rng);
    let mut opt = adam_for(cfg);
    let all: Vec<usize> = (0..tbl.num_nodes).collect();
    let npos = edges.train_pos.len();
    let mut targets = vec![1.0f32; npos];
    targets.resize(2 * npos, 0.0);
    let empty = HashSet::new();
    let mut stop = EarlyStop::new(cfg.patience);
    let mut epochs = 0;
    for epoch in 0..cfg.epochs {
        epochs = epoch + 1;
        let mut pairs = edges.train_pos.clone();
        for _ in 0..npos {
            let e = graph::sample_non_edge(g, &empty, &mut neg_rng, 1000 + 100 * g.num_nodes())
                .ok_or_else(|| Error::Sampling("no non-edge available".into()))?;
            pairs.push(e);
        }
        let mut tape = Tape::new();
        let vars = nn::bind(&mut tape, &head);
        let (ev, mv) = head.split_vars(&vars);
        let x = head.embedder.forward(&mut tape, ev, tbl, &all)?;
        let feats = pair_features(&mut tape, x, &pairs)?;
        let logits = head.mlp.forward(&mut tape, mv, feats, true, &mut drop_rng)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::Diverged { epoch });
        }
        tape.backward(loss)?;
        apply_step(&mut head, &mut opt, &tape, &vars)?;
        let v = hits_for(&head, tbl, &edges.valid_pos, &edges.valid_neg, cfg.hits_k)?;
        if stop.observe(v, || head.clone()) {
            break;
        }
    }
    let (valid_hits, best) = stop.best.expect("at least one epoch");
    let test_hits = hits_for(&best, tbl, &edges.test_pos, &edges.test_neg, cfg.hits_k)?;
    Ok(LinkHeadResult {
        head: best,
        k: cfg.hits_k,
        valid_hits,
        test_hits,
        null_hits: metrics::hits_null(edges.test_neg.len(), cfg.hits_k),
        epochs,
    })
}

fn hits_for(
    head: &MlpHead,
    tbl: &NodeIdTable,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    k: usize,
) -> Result<f64> {
    let p = link_scores(head, tbl, pos)?;
    let n = link_scores(head, tbl, neg)?;
    Ok(metrics::hits_at_k(&p, &n, k))
}

/// Pools the embedded IDs of one graph into a single row.
pub fn graph_readout(tbl: &NodeIdTable, emb: &IdEmbedder, pool: Pool) -> Result<Vec<f32>> {
    if tbl.num_nodes == 0 {
        return Err(Error::Empty("graph with no nodes"));
    }
    let all: Vec<usize> = (0..tbl.num_nodes).collect();
    let e = emb.embed_ids(tbl, &all)?;
    let mut out = match pool {
        Pool::Max => vec![f32::NEG_INFINITY; e.cols()],
        _ => vec![0.0; e.cols()],
    };
    for i in 0..e.rows() {
        for (o, &x) in out.iter_mut().zip(e.row(i)) {
            match pool {
                Pool::Max => *o = o.max(x),
                _ => *o += x,
            }
        }
    }
    if pool == Pool::Mean {
        let n = e.rows() as f32;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GraphHeadResult {
    pub head: MlpHead,
    pub valid: f64,
    pub test: f64,
    pub epochs: usize,
}

fn check_tables(tables: &[NodeIdTable]) -> Result<()> {
    let first = tables.first().ok_or(Error::Empty("graph list"))?;
    for t in tables {
        if t.num_nodes == 0 {
            return Err(Error::Empty("graph with no nodes"));
        }
        if (t.layers, t.levels, t.k) != (first.layers, first.levels, first.k) {
            return Err(Error::Config("graph ID tables disagree on L, M or K".into()));
        }
    }
    Ok(())
}

/// Trains an MLP on pooled ID embeddings, one row per graph.
pub fn train_graph_head(
    tables: &[NodeIdTable],
    labels: &[usize],
    train: &[bool],
    valid: &[bool],
    test: &[bool],
    cfg: &HeadConfig,
) -> Result<GraphHeadResult> {
    check_tables(tables)?;
    let ng = tables.len();
    if labels.len() != ng || train.len() != ng || valid.len() != ng || test.len() != ng {
        return Err(Error::ShapeMismatch {
            op: "graph head",
            left: (ng, 1),
            right: (labels.len(), train.len()),
        });
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    // All graphs share one batch: node rows of graph i sit in segment i.
    let mut codes = Vec::new();
    let mut segments = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        codes.extend_from_slice(&t.codes);
        segments.extend(std::iter::repeat_n(i, t.num_nodes));
    }
    let batch = NodeIdTable::new(tables[0].layers, tables[0].levels, tables[0].k, codes)?;
    let all: Vec<usize> = (0..batch.num_nodes).collect();

    let mut init_rng = rng::stream(cfg.seed, Stream::Head);
    let mut drop_rng = rng::stream(cfg.seed, Stream::Dropout);
    let mut head = MlpHead::new(&batch, cfg, 1, num_classes, &mut init_rng);
    let mut opt = adam_for(cfg);
    let predict = |head: &MlpHead| -> Result<Vec<usize>> {
        let mut x = Tensor::zeros(ng, head.embedder.output_width());
        for (i, t) in tables.iter().enumerate() {
            x.row_mut(i).copy_from_slice(&graph_readout(t, &head.embedder, cfg.pool)?);
        }
        Ok(argmax_rows(&head.mlp.apply(&x)?))
    };
    let mut stop = EarlyStop::new(cfg.patience);
    let mut epochs = 0;
    for epoch in 0..cfg.epochs {
        epochs = epoch + 1;
        let mut tape = Tape::new();
        let vars = nn::bind(&mut tape, &head);
        let (ev, mv) = head.split_vars(&vars);
        let x = head.embedder.forward(&mut tape, ev, &batch, &all)?;
        let pooled = tape.segment_pool(x, &segments, ng, cfg.pool)?;
        let logits = head.mlp.forward(&mut tape, mv, pooled, true, &mut drop_rng)?;
        let loss = tape.softmax_cross_entropy(logits, labels, train)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::Diverged { epoch });
        }
        tape.backward(loss)?;
        apply_step(&mut head, &mut opt, &tape, &vars)?;
        let v = metrics::accuracy(&predict(&head)?, labels, valid);
        if stop.observe(v, || head.clone()) {
            break;
        }
    }
    let (valid_acc, best) = stop.best.expect("at least one epoch");
    let test_acc = metrics::accuracy(&predict(&best)?, labels, test);
    Ok(GraphHeadResult {
        head: best,
        valid: valid_acc,
        test: test_acc,
        epochs,
    })
}

#[derive(Clone, Debug)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub objective: f64,
    pub nmi: Option<f64>,
    pub pairwise_f1: Option<f64>,
    pub matched_f1: Option<f64>,
}

pub const CLUSTER_ITERS: usize = 100;
pub const CLUSTER_RESTARTS: usize = 10;

/// k-means over one-hot embedded IDs, best of several restarts. Scored
/// against `labels` where given (unlabeled nodes are skipped).
pub fn cluster_ids(
    tbl: &NodeIdTable,
    k: usize,
    seed: u64,
    labels: Option<&[i32]>,
) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    let distinct = tbl.distinct_ids();
    if k > distinct {
        log::warn!("requested {k} clusters but only {distinct} distinct IDs; proceeding with duplicates");
    }
    let emb = IdEmbedder::one_hot(tbl);
    let all: Vec<usize> = (0..tbl.num_nodes).collect();
    let x = emb.embed_ids(tbl, &all)?;
    let rows: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut rng = rng::stream(seed, Stream::Cluster);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..CLUSTER_RESTARTS {
        let fit = kmeans(&rows, x.cols(), k, CLUSTER_ITERS, Metric::L2, &mut rng)?;
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            best = Some(fit);
        }
    }
    let best = best.expect("at least one restart");
    let (mut nmi, mut pf1, mut mf1) = (None, None, None);
    if let Some(labels) = labels {
        let keep: Vec<usize> = (0..tbl.num_nodes).filter(|&i| labels[i] >= 0).collect();
        let pred: Vec<usize> = keep.iter().map(|&i| best.assignments[i]).collect();
        let truth: Vec<usize> = keep.iter().map(|&i| labels[i] as usize).collect();
        nmi = Some(metrics::nmi(&pred, &truth));
        pf1 = Some(metrics::pairwise_f1(&pred, &truth));
        mf1 = Some(metrics::matched_f1(&pred, &truth));
    }
    Ok(ClusterResult {
        assignments: best.assignments,
        objective: best.objective,
        nmi,
        pairwise_f1: pf1,
        matched_f1: mf1,
    })
}

/// The `top_n` nodes closest to `query` in Hamming distance, ties broken by
/// node index. The query itself is excluded.
pub fn hamming_retrieve(tbl: &NodeIdTable, query: usize, top_n: usize) -> Result<Vec<(usize, usize)>> {
    tbl.check(query)?;
    let q = tbl.id(query);
    let mut ranked: Vec<(usize, usize)> = (0..tbl.num_nodes)
        .filter(|&v| v != query)
        .map(|v| (hamming(q, tbl.id(v)), v))
        .collect();
    ranked.sort_unstable();
    ranked.truncate(top_n);
    Ok(ranked.into_iter().map(|(d, v)| (v, d)).collect())
}

/// Largest ego graph handled exactly.
pub const GED_EXACT_MAX_NODES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ged {
    pub distance: usize,
    /// False when at least one ego exceeded the exact-search cap and a
    /// lower bound was returned instead.
    pub exact: bool,
}

/// Induced subgraph on `u` and its neighbors, as a dense adjacency matrix.
pub fn ego_graph(g: &Graph, u: usize) -> Vec<Vec<bool>> {
    let mut nodes = vec![u];
    nodes.extend_from_slice(g.neighbors(u));
    let n = nodes.len();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if g.has_edge(nodes[i], nodes[j]) {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
    }
    adj
}

fn edge_count(a: &[Vec<bool>]) -> usize {
    a.iter().flatten().filter(|&&x| x).count() / 2
}

fn degrees(a: &[Vec<bool>]) -> Vec<usize> {
    a.iter().map(|r| r.iter().filter(|&&x| x).count()).collect()
}

/// `|n1 - n2| + ceil(Σ|d1_i - d2_i| / 2)` over degree sequences sorted
/// descending and zero-padded: each edge edit changes two degrees by one.
pub fn ged_lower_bound(a: &[Vec<bool>], b: &[Vec<bool>]) -> usize {
    let (mut da, mut db) = (degrees(a), degrees(b));
    let n = da.len().max(db.len());
    da.resize(n, 0);
    db.resize(n, 0);
    da.sort_unstable_by(|x, y| y.cmp(x));
    db.sort_unstable_by(|x, y| y.cmp(x));
    let l1: usize = da.iter().zip(&db).map(|(x, y)| x.abs_diff(*y)).sum();
    a.len().abs_diff(b.len()) + l1.div_ceil(2)
}

/// Search-tree expansions allowed before [`ged_exact`] gives up on proving
/// optimality and returns its best mapping.
pub const GED_SEARCH_BUDGET: usize = 2_000_000;

fn mapping_cost(a: &[Vec<bool>], b: &[Vec<bool>], map: &[usize]) -> usize {
    let n = a.len();
    let mut cost = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            cost += (a[i][j] != b[map[i]][map[j]]) as usize;
        }
    }
    cost
}

/// Edit distance between two small unlabeled graphs under unit costs, and
/// whether optimality was proven within [`GED_SEARCH_BUDGET`].
///
/// With uniform costs a node substitution never costs more than a
/// delete/insert pair, so the optimum is `|n1 - n2|` plus the minimum
/// edge disagreement over bijections after padding the smaller graph with
/// isolated nodes. Branch and bound over those bijections.
pub fn ged_exact(a: &[Vec<bool>], b: &[Vec<bool>]) -> (usize, bool) {
    let n = a.len().max(b.len());
    let pad = |m: &[Vec<bool>]| -> Vec<Vec<bool>> {
        let mut out = vec![vec![false; n]; n];
        for (i, row) in m.iter().enumerate() {
            out[i][..row.len()].copy_from_slice(row);
        }
        out
    };
    let (pa, pb) = (pad(a), pad(b));
    let by_degree = |m: &[Vec<bool>]| -> Vec<usize> {
        let d = degrees(m);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| d[y].cmp(&d[x]).then(x.cmp(&y)));
        order
    };
    // Visit high-degree nodes of `a` first for earlier pruning, and seed the
    // bound with the degree-rank matching.
    let order = by_degree(&pa);
    let order_b = by_degree(&pb);
    let mut greedy = vec![0; n];
    for (&u, &v) in order.iter().zip(&order_b) {
        greedy[u] = v;
    }

    struct Search<'s> {
        a: &'s [Vec<bool>],
        b: &'s [Vec<bool>],
        order: Vec<usize>,
        map: Vec<usize>,
        used: Vec<bool>,
        best: usize,
        ea: usize,
        eb: usize,
        budget: usize,
    }
    impl Search<'_> {
        fn go(&mut self, depth: usize, cost: usize, done_a: usize, done_b: usize) {
            if self.budget == 0 {
                return;
            }
            self.budget -= 1;
            // Edges not yet decided on either side; their mismatch is at
            // least the difference in counts.
            let bound = cost + (self.ea - done_a).abs_diff(self.eb - done_b);
            if bound >= self.best {
                return;
            }
            if depth == self.order.len() {
                self.best = cost;
                return;
            }
            let u = self.order[depth];
            for v in 0..self.a.len() {
                if self.used[v] {
                    continue;
                }
                let (mut extra, mut da, mut db) = (0, 0, 0);
                for d in 0..depth {
                    let (pu, pv) = (self.order[d], self.map[self.order[d]]);
                    let ea = self.a[u][pu];
                    let eb = self.b[v][pv];
                    da += ea as usize;
                    db += eb as usize;
                    extra += (ea != eb) as usize;
                }
                self.used[v] = true;
                self.map[u] = v;
                self.go(depth + 1, cost + extra, done_a + da, done_b + db);
                self.used[v] = false;
            }
        }
    }
    let mut s = Search {
        a: &pa,
        b: &pb,
        best: mapping_cost(&pa, &pb, &greedy),
        order,
        map: vec![0; n],
        used: vec![false; n],
        ea: edge_count(&pa),
        eb: edge_count(&pb),
        budget: GED_SEARCH_BUDGET,
    };
    s.go(0, 0, 0, 0);
    (a.len().abs_diff(b.len()) + s.best, s.budget > 0)
}

/// Edit distance between the 1-hop ego graphs of `u` and `v`.
pub fn ged_1hop(g: &Graph, u: usize, v: usize) -> Result<Ged> {
    for x in [u, v] {
        if x >= g.num_nodes() {
            return Err(Error::IndexOutOfRange {
                index: x,
                num_nodes: g.num_nodes(),
                line: 0,
            });
        }
    }
    if u == v {
        return Ok(Ged {
            distance: 0,
            exact: true,
        });
    }
    let (a, b) = (ego_graph(g, u), ego_graph(g, v));
    if a.len().max(b.len()) <= GED_EXACT_MAX_NODES {
        let (distance, exact) = ged_exact(&a, &b);
        Ok(Ged { distance, exact })
    } else {
        Ok(Ged {
            distance: ged_lower_bound(&a, &b),
            exact: false,
        })
    }
}

/// Mean 1-hop GED between each query and its `top_n` Hamming neighbors,
/// alongside the same statistic for uniformly random partners.
pub fn retrieval_ged(
    g: &Graph,
    tbl: &NodeIdTable,
    queries: &[usize],
    top_n: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let mut rng = rng::stream(seed, Stream::Negatives);
    let (mut near, mut rand_sum, mut count, mut approx) = (0.0, 0.0, 0usize, 0usize);
    let others: Vec<usize> = (0..g.num_nodes()).collect();
    for &q in queries {
        for (v, _) in hamming_retrieve(tbl, q, top_n)? {
            let d = ged_1hop(g, q, v)?;
            near += d.distance as f64;
            approx += (!d.exact) as usize;
            let r = *others.choose(&mut rng).expect("non-empty graph");
            let d = ged_1hop(g, q, r)?;
            rand_sum += d.distance as f64;
            approx += (!d.exact) as usize;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("retrieval queries"));
    }
    Ok((near / count as f64, rand_sum / count as f64, approx))
}
