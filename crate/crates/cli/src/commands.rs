//! One function per subcommand. Each returns the metric records to print.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nid_core::datasets::{self, SbmConfig, SurrogateConfig};
use nid_core::downstream::{
    cluster_ids, hamming_retrieve, retrieval_ged, train_graph_head, train_link_head, train_node_head,
    MlpHead, NodeIdTable,
};
use nid_core::graph::{load_graph, save_ngf, split_edges, split_nodes, EdgeSplit, Graph, GraphFormat};
use nid_core::io;
use nid_core::mpnn::{Features, Propagation};
use nid_core::rng::{self, Stream};
use nid_core::train::{
    self, evaluate_node, generate_ids, link_hits, NidModel, Objective, TrainLog, Trained, K_GRID,
};
use rand::seq::SliceRandom;

use crate::bench::bench_inference;
use crate::config::RunConfig;
use crate::record::Record;

const LABELS_FILE: &str = "labels.txt";

fn graph_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("graph_{i:05}.ngf"))
}

fn ids_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("graph_{i:05}.nid1"))
}

/// Writes a labeled graph collection as one file per graph plus labels.
pub fn save_graph_set(dir: &Path, graphs: &[Graph], labels: &[usize]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, g) in graphs.iter().enumerate() {
        save_ngf(g, graph_file(dir, i))?;
    }
    let text: String = labels.iter().map(|y| format!("{y}\n")).collect();
    fs::write(dir.join(LABELS_FILE), text)?;
    Ok(())
}

pub fn load_graph_set(dir: &Path) -> Result<(Vec<Graph>, Vec<usize>)> {
    let text = fs::read_to_string(dir.join(LABELS_FILE))
        .with_context(|| format!("reading {}", dir.join(LABELS_FILE).display()))?;
    let labels: Vec<usize> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .with_context(|| format!("{LABELS_FILE} line {}", i + 1))
        })
        .collect::<Result<_>>()?;
    let graphs = (0..labels.len())
        .map(|i| {
            let p = graph_file(dir, i);
            load_graph(&p, GraphFormat::NgfText).with_context(|| format!("reading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((graphs, labels))
}

pub fn read_graph(cfg: &RunConfig, path: &Path) -> Result<Graph> {
    let format: GraphFormat = cfg.graph_format.parse()?;
    load_graph(path, format).with_context(|| format!("reading graph {}", path.display()))
}

/// Stratified split of a graph collection: per label, shuffled, then cut
/// by the ratios.
pub fn split_graphs(labels: &[usize], ratios: (f64, f64, f64), seed: u64) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let n = labels.len();
    let mut masks = (vec![false; n], vec![false; n], vec![false; n]);
    let mut rng = rng::stream(seed, Stream::NodeSplit);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let m = members.len();
        let a = ((ratios.0 * m as f64).round() as usize).min(m);
        let b = ((ratios.1 * m as f64).round() as usize).min(m - a);
        for (j, &i) in members.iter().enumerate() {
            if j < a {
                masks.0[i] = true;
            } else if j < a + b {
                masks.1[i] = true;
            } else {
                masks.2[i] = true;
            }
        }
    }
    masks
}

fn node_labels(g: &Graph) -> Result<Vec<i32>> {
    Ok(g.labels().context("graph has no node labels")?.to_vec())
}

pub fn synth_sbm(cfg: &SbmConfig, out: &Path) -> Result<Vec<Record>> {
    let g = datasets::sbm(cfg)?;
    save_ngf(&g, out)?;
    Ok(vec![graph_record("synth", &g, "sbm")])
}

pub fn synth_stars_paths(count: usize, nodes: usize, seed: u64, out: &Path) -> Result<Vec<Record>> {
    let (graphs, labels) = datasets::stars_and_paths(count, nodes, seed)?;
    save_graph_set(out, &graphs, &labels)?;
    Ok(vec![Record::new("synth")
        .text("dataset", "stars-paths")
        .text("graphs", graphs.len())
        .text("nodes", nodes)])
}

pub fn synth_citation(seed: u64, out: &Path) -> Result<Vec<Record>> {
    let g = datasets::citation_surrogate(&SurrogateConfig {
        seed,
        ..SurrogateConfig::default()
    })?;
    save_ngf(&g, out)?;
    Ok(vec![graph_record("synth", &g, "cora-surrogate")])
}

pub fn import_linqs(dir: &Path, name: &str, out: &Path) -> Result<Vec<Record>> {
    let g = datasets::load_linqs(dir, name)?;
    save_ngf(&g, out)?;
    Ok(vec![graph_record("import", &g, name)])
}

fn graph_record(kind: &str, g: &Graph, name: &str) -> Record {
    let mut r = Record::new(kind)
        .text("dataset", name)
        .text("nodes", g.num_nodes())
        .text("edges", g.num_edges())
        .text("features", g.feat_dim());
    if let Some(h) = datasets::edge_homophily(g) {
        r = r.real("homophily", h);
    }
    r
}

/// Input of `train`/`export-ids`: one graph or a labeled collection.
pub enum GraphInput {
    Single(Graph),
    Set(Vec<Graph>, Vec<usize>),
}

impl GraphInput {
    pub fn load(cfg: &RunConfig, graph: Option<&Path>, graphs: Option<&Path>) -> Result<Self> {
        match (graph, graphs) {
            (Some(p), None) => Ok(Self::Single(read_graph(cfg, p)?)),
            (None, Some(d)) => {
                let (g, y) = load_graph_set(d)?;
                Ok(Self::Set(g, y))
            }
            _ => bail!("pass exactly one of --graph or --graphs"),
        }
    }

    fn single(&self) -> Result<&Graph> {
        match self {
            Self::Single(g) => Ok(g),
            Self::Set(..) => bail!("this objective needs --graph, not --graphs"),
        }
    }
}

const SPLIT_KEYS: [&str; 4] = ["split", "edge_split", "graph_split", "link_negatives"];

fn manifest(cfg: &RunConfig) -> String {
    let grid: Vec<String> = K_GRID.iter().map(usize::to_string).collect();
    let mut m = BTreeMap::new();
    m.insert("seed".to_string(), cfg.seed().to_string());
    m.insert("k_grid".to_string(), grid.join(","));
    m.insert("cosine_levels".to_string(), "normalized-at-every-level".to_string());
    for (k, v) in cfg.entries() {
        if SPLIT_KEYS.contains(&k.as_str()) {
            m.insert(k, v);
        }
    }
    m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn manifest_run_config(model: &NidModel, manifest: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in model.config.entries() {
        cfg.set(k, &v)?;
    }
    for line in manifest.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if SPLIT_KEYS.contains(&k) {
                cfg.set(k, v)?;
            }
        }
    }
    Ok(cfg)
}

pub fn format_log(log: &TrainLog) -> String {
    let mut out = String::new();
    for e in &log.entries {
        out.push_str(
            &Record::new("epoch")
                .text("epoch", e.epoch)
                .real("loss_g", e.loss_g)
                .real("loss_vq", e.loss_vq)
                .real("loss_nid", e.loss_nid)
                .real("usage", e.usage)
                .real(log.val_metric, e.val)
                .to_string(),
        );
        out.push('\n');
    }
    out
}

/// Outcome of `train` for reuse by tests and the bench.
pub struct TrainOutput {
    pub trained: Trained,
    pub records: Vec<Record>,
    pub manifest: String,
}

pub fn train(cfg: &RunConfig, input: &GraphInput) -> Result<TrainOutput> {
    let tc = &cfg.train;
    let seed = cfg.seed();
    let mut rec = Record::new("train").text("objective", tc.objective).text("seed", seed);
    let trained = match tc.objective {
        Objective::SupervisedNode => {
            let g = input.single()?;
            let splits = split_nodes(g, cfg.split, seed)?;
            let t = train::train_supervised_node(g, &splits, tc)?;
            let (v, s) = evaluate_node(&t.model, g, &splits)?;
            rec = rec.real("encoder_valid", v).real("encoder_test", s);
            t
        }
        Objective::Mae => train::train_mae(input.single()?, tc)?,
        Objective::SupervisedLink => {
            let g = input.single()?;
            let edges = split_edges(g, cfg.edge_split, cfg.link_negatives, seed)?;
            let t = train::train_supervised_link(g, &edges, tc)?;
            let tg = edges.train_graph(g)?;
            let (prop, x) = (Propagation::new(&tg), Features::from_tensor(tg.features()));
            let hits = link_hits(&t.model, &prop, &x, &edges.test_pos, &edges.test_neg, tc.hits_k)?;
            rec = rec.real("encoder_test_hits", hits);
            t
        }
        Objective::SupervisedGraph => {
            let GraphInput::Set(graphs, labels) = input else {
                bail!("supervised-graph needs --graphs");
            };
            let (tr, va, _) = split_graphs(labels, cfg.graph_split, seed);
            train::train_supervised_graph(graphs, labels, &tr, &va, tc)?
        }
    };
    let last = trained.log.entries.last().context("empty training log")?;
    let best = &trained.log.entries[trained.log.best_epoch];
    rec = rec
        .text("epochs", trained.log.entries.len())
        .text("best_epoch", trained.log.best_epoch)
        .real("loss_g", last.loss_g)
        .real("loss_vq", last.loss_vq)
        .real("loss_nid", last.loss_nid)
        .real("usage", best.usage)
        .text("val_metric", trained.log.val_metric)
        .real("val", best.val);
    Ok(TrainOutput {
        trained,
        records: vec![rec],
        manifest: manifest(cfg),
    })
}

/// ID tables for the graph(s) a model was trained on. Link models see only
/// their training edges, reconstructed from the recorded split.
pub fn export_ids(model: &NidModel, manifest: &str, input: &GraphInput) -> Result<Vec<NodeIdTable>> {
    match (model.config.objective, input) {
        (Objective::SupervisedGraph, GraphInput::Set(graphs, _)) => {
            graphs.iter().map(|g| Ok(generate_ids(model, g)?)).collect()
        }
        (Objective::SupervisedGraph, GraphInput::Single(g)) => Ok(vec![generate_ids(model, g)?]),
        (Objective::SupervisedLink, GraphInput::Single(g)) => {
            let cfg = manifest_run_config(model, manifest)?;
            let edges = split_edges(g, cfg.edge_split, cfg.link_negatives, cfg.seed())?;
            Ok(vec![generate_ids(model, &edges.train_graph(g)?)?])
        }
        (_, GraphInput::Single(g)) => Ok(vec![generate_ids(model, g)?]),
        (_, GraphInput::Set(..)) => bail!("--graphs is only valid for graph-level models"),
    }
}

pub fn write_ids(tables: &[NodeIdTable], out: &Path, set: bool) -> Result<Vec<Record>> {
    if set {
        fs::create_dir_all(out)?;
        for (i, t) in tables.iter().enumerate() {
            io::save_ids(t, ids_file(out, i))?;
        }
    } else {
        io::save_ids(&tables[0], out)?;
    }
    let t = &tables[0];
    let bytes: u64 = tables
        .iter()
        .map(|t| io::id_file_len(t.num_nodes, t.width(), t.k))
        .sum();
    Ok(vec![Record::new("export-ids")
        .text("tables", tables.len())
        .text("L", t.layers)
        .text("M", t.levels)
        .text("K", t.k)
        .text("bytes", bytes)
        .text("distinct_ids", t.distinct_ids())])
}

pub fn load_id_set(dir: &Path, count: usize) -> Result<Vec<NodeIdTable>> {
    (0..count)
        .map(|i| {
            let p = ids_file(dir, i);
            io::load_ids(&p).with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

pub fn eval_node(cfg: &RunConfig, tbl: &NodeIdTable, g: &Graph) -> Result<(MlpHead, Record)> {
    let splits = split_nodes(g, cfg.split, cfg.seed())?;
    let r = train_node_head(tbl, &node_labels(g)?, &splits, &cfg.head)?;
    let rec = Record::new("eval-node")
        .text("metric", r.metric)
        .real("valid", r.valid)
        .real("test", r.test)
        .text("epochs", r.epochs)
        .text("distinct_ids", tbl.distinct_ids());
    Ok((r.head, rec))
}

pub fn eval_link(cfg: &RunConfig, tbl: &NodeIdTable, g: &Graph) -> Result<(MlpHead, Record)> {
    let edges: EdgeSplit = split_edges(g, cfg.edge_split, cfg.link_negatives, cfg.seed())?;
    let tg = edges.train_graph(g)?;
    let mut head_cfg = cfg.head.clone();
    head_cfg.hits_k = cfg.train.hits_k;
    let r = train_link_head(tbl, &tg, &edges, &head_cfg)?;
    let rec = Record::new("eval-link")
        .text("k", r.k)
        .real("valid_hits", r.valid_hits)
        .real("test_hits", r.test_hits)
        .real("null_hits", r.null_hits)
        .real("over_null", r.test_hits / r.null_hits)
        .text("epochs", r.epochs);
    Ok((r.head, rec))
}

pub fn eval_graph(cfg: &RunConfig, tables: &[NodeIdTable], labels: &[usize]) -> Result<(MlpHead, Record)> {
    let (tr, va, te) = split_graphs(labels, cfg.graph_split, cfg.seed());
    let mut head_cfg = cfg.head.clone();
    head_cfg.pool = cfg.train.pool;
    let r = train_graph_head(tables, labels, &tr, &va, &te, &head_cfg)?;
    let rec = Record::new("eval-graph")
        .text("pool", cfg.train.pool.as_str())
        .real("valid", r.valid)
        .real("test", r.test)
        .text("epochs", r.epochs);
    Ok((r.head, rec))
}

pub fn cluster(cfg: &RunConfig, tbl: &NodeIdTable, g: Option<&Graph>) -> Result<Record> {
    let labels = match g {
        Some(g) => Some(node_labels(g)?),
        None => None,
    };
    let k = match (cfg.clusters, g.and_then(Graph::num_classes)) {
        (Some(k), _) => k,
        (None, Some(c)) => c,
        (None, None) => bail!("set clusters=<k> when the graph carries no labels"),
    };
    let r = cluster_ids(tbl, k, cfg.seed(), labels.as_deref())?;
    let mut rec = Record::new("cluster")
        .text("clusters", k)
        .real("objective", r.objective)
        .text("distinct_ids", tbl.distinct_ids());
    if let (Some(nmi), Some(f1), Some(mf1)) = (r.nmi, r.pairwise_f1, r.matched_f1) {
        rec = rec.real("nmi", nmi).real("pairwise_f1", f1).real("matched_f1", mf1);
    }
    Ok(rec)
}

pub fn retrieve(cfg: &RunConfig, tbl: &NodeIdTable, query: usize) -> Result<Vec<Record>> {
    Ok(hamming_retrieve(tbl, query, cfg.top_n)?
        .into_iter()
        .enumerate()
        .map(|(rank, (node, dist))| {
            Record::new("neighbor")
                .text("query", query)
                .text("rank", rank + 1)
                .text("node", node)
                .text("hamming", dist)
        })
        .collect())
}

/// Mean 1-hop GED of Hamming neighbors versus random partners over
/// `queries` seeded random query nodes.
pub fn ged_analysis(cfg: &RunConfig, tbl: &NodeIdTable, g: &Graph, queries: usize) -> Result<Record> {
    let mut nodes: Vec<usize> = (0..g.num_nodes()).collect();
    nodes.shuffle(&mut rng::stream(cfg.seed(), Stream::Cluster));
    nodes.truncate(queries);
    let (near, random, approx) = retrieval_ged(g, tbl, &nodes, cfg.top_n, cfg.seed())?;
    Ok(Record::new("ged")
        .text("queries", nodes.len())
        .text("top_n", cfg.top_n)
        .real("neighbor_ged", near)
        .real("random_ged", random)
        .text("inexact", approx))
}

pub fn bench(cfg: &RunConfig, model: &NidModel, tbl: &NodeIdTable, head: &MlpHead, g: &Graph) -> Result<Record> {
    let r = bench_inference(model, tbl, head, g, cfg.repeats)?;
    Ok(Record::new("bench")
        .text("repeats", r.repeats)
        .real("gnn_ms", r.gnn_latency.as_secs_f64() * 1e3)
        .real("id_ms", r.id_latency.as_secs_f64() * 1e3)
        .real("id_single_ms", r.id_single_latency.as_secs_f64() * 1e3)
        .real("speedup", r.speedup)
        .text("id_bytes", r.id_bytes)
        .text("id_payload_bytes", r.id_payload_bytes)
        .text("embedding_bytes", r.embedding_bytes)
        .real("bytes_ratio", r.bytes_ratio()))
}
