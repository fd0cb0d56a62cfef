//! Attributed undirected graphs, their on-disk formats, adjacency
//! normalization and deterministic train/valid/test splitting.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::sparse::CsrMatrix;

/// Label value marking an unlabeled node.
pub const UNLABELED: i32 = -1;

/// Undirected attributed graph in CSR form. Self-loops are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    features: Tensor,
    labels: Option<Vec<i32>>,
    num_classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    NgfText,
    CsvTriple,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ngf-text" | "ngf" => Ok(Self::NgfText),
            "csv-triple" | "csv" => Ok(Self::CsvTriple),
            other => Err(Error::Config(format!("unknown graph format '{other}'"))),
        }
    }
}

impl Graph {
    /// Builds a graph from an edge list. Edges are symmetrized and
    /// deduplicated; self-loops are dropped.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Option<Vec<i32>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        if features.rows() != num_nodes {
            return Err(Error::ShapeMismatch {
                op: "graph features",
                left: (num_nodes, features.cols()),
                right: features.shape(),
            });
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for (line, &(u, v)) in edges.iter().enumerate() {
            for x in [u, v] {
                if x >= num_nodes {
                    return Err(Error::IndexOutOfRange {
                        index: x,
                        num_nodes,
                        line: line + 1,
                    });
                }
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for mut nbrs in adj {
            nbrs.sort_unstable();
            nbrs.dedup();
            col_indices.extend(nbrs);
            row_offsets.push(col_indices.len());
        }
        if let Some(l) = &labels {
            if l.len() != num_nodes {
                return Err(Error::ShapeMismatch {
                    op: "graph labels",
                    left: (num_nodes, 1),
                    right: (l.len(), 1),
                });
            }
            let nc = num_classes.unwrap_or(0);
            if let Some(&bad) = l.iter().find(|&&y| y < UNLABELED || (y >= 0 && y as usize >= nc)) {
                return Err(Error::Config(format!(
                    "label {bad} outside [-1, {nc})"
                )));
            }
        }
        Ok(Self {
            num_nodes,
            row_offsets,
            col_indices,
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges (self-loops are never counted).
    pub fn num_edges(&self) -> usize {
        self.col_indices.len() / 2
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[u]..self.row_offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_offsets[u + 1] - self.row_offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in CSR order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Same nodes and attributes with a different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::from_edges(
            self.num_nodes,
            edges,
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        let mut inv = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inv[p] != usize::MAX {
                return Err(Error::Config("permutation is not a bijection".into()));
            }
            inv[p] = i;
        }
        let edges: Vec<_> = self.edges().iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let features = self.features.select_rows(&inv);
        let labels = self
            .labels
            .as_ref()
            .map(|l| inv.iter().map(|&i| l[i]).collect());
        Self::from_edges(n, &edges, features, labels, self.num_classes)
    }

    /// Node indices carrying a label.
    pub fn labeled_nodes(&self) -> Vec<usize> {
        match &self.labels {
            Some(l) => (0..self.num_nodes).filter(|&i| l[i] >= 0).collect(),
            None => Vec::new(),
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} '{tok}'")))
}

/// Reads a graph in the named format. For `csv-triple`, `path` is the manifest.
pub fn load_graph(path: impl AsRef<Path>, format: GraphFormat) -> Result<Graph> {
    match format {
        GraphFormat::NgfText => parse_ngf(&fs::read_to_string(path)?),
        GraphFormat::CsvTriple => load_csv_triple(path.as_ref()),
    }
}

/// Parses the `NGF1` text format.
pub fn parse_ngf(text: &str) -> Result<Graph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing NGF1 header"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 || h[0] != "NGF1" {
        return Err(parse_err(
            hline,
            "header must be 'NGF1 <num_nodes> <feat_dim> <num_edges> <num_classes>'",
        ));
    }
    let num_nodes: usize = parse_num(h[1], hline, "num_nodes")?;
    let feat_dim: usize = parse_num(h[2], hline, "feat_dim")?;
    let num_edges: usize = parse_num(h[3], hline, "num_edges")?;
    let num_classes: usize = parse_num(h[4], hline, "num_classes")?;

    let mut expect = |tag: &str| -> Result<(usize, &str)> {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(0, format!("unexpected end of file, expected '{tag}' line")))?;
        l.strip_prefix(tag)
            .map(|rest| (ln, rest.trim()))
            .ok_or_else(|| parse_err(ln, format!("expected '{tag}' line")))
    };

    let mut feats = Vec::with_capacity(num_nodes * feat_dim);
    for _ in 0..num_nodes {
        let (ln, rest) = expect("feat:")?;
        let before = feats.len();
        for tok in rest.split_whitespace() {
            let v: f32 = parse_num(tok, ln, "feature value")?;
            if !v.is_finite() {
                return Err(parse_err(ln, "non-finite feature value"));
            }
            feats.push(v);
        }
        let found = feats.len() - before;
        if found != feat_dim {
            return Err(Error::FeatureDim {
                line: ln,
                expected: feat_dim,
                found,
            });
        }
    }
    let mut labels = Vec::with_capacity(num_nodes);
    for _ in 0..num_nodes {
        let (ln, rest) = expect("label:")?;
        let y: i32 = parse_num(rest, ln, "label")?;
        if y < UNLABELED || (y >= 0 && y as usize >= num_classes) {
            return Err(parse_err(ln, format!("label {y} outside [-1, {num_classes})")));
        }
        labels.push(y);
    }
    let mut edges = Vec::with_capacity(num_edges);
    for _ in 0..num_edges {
        let (ln, rest) = expect("edge:")?;
        let mut it = rest.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(ln, "edge line must hold exactly two node indices"));
        };
        let u: usize = parse_num(a, ln, "node index")?;
        let v: usize = parse_num(b, ln, "node index")?;
        for x in [u, v] {
            if x >= num_nodes {
                return Err(Error::IndexOutOfRange {
                    index: x,
                    num_nodes,
                    line: ln,
                });
            }
        }
        edges.push((u, v));
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(ln, "trailing content after declared edges"));
    }
    let features = Tensor::from_vec(num_nodes, feat_dim, feats)?;
    let has_labels = num_classes > 0 || labels.iter().any(|&y| y >= 0);
    Graph::from_edges(
        num_nodes,
        &edges,
        features,
        has_labels.then_some(labels),
        (num_classes > 0).then_some(num_classes),
    )
}

/// Serializes in `NGF1` text form; each undirected edge is written once.
pub fn write_ngf(g: &Graph, mut w: impl Write) -> Result<()> {
    let edges = g.edges();
    let mut buf = String::new();
    writeln!(
        buf,
        "NGF1 {} {} {} {}",
        g.num_nodes,
        g.feat_dim(),
        edges.len(),
        g.num_classes.unwrap_or(0)
    )
    .unwrap();
    for i in 0..g.num_nodes {
        buf.push_str("feat:");
        for v in g.features.row(i) {
            write!(buf, " {v}").unwrap();
        }
        buf.push('\n');
    }
    for i in 0..g.num_nodes {
        let y = g.labels.as_ref().map_or(UNLABELED, |l| l[i]);
        writeln!(buf, "label: {y}").unwrap();
    }
    for (u, v) in edges {
        writeln!(buf, "edge: {u} {v}").unwrap();
    }
    w.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn save_ngf(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let f = fs::File::create(path)?;
    write_ngf(g, std::io::BufWriter::new(f))
}

/// Manifest-driven CSV loader. The manifest holds `key=value` lines naming
/// `features`, `labels` and `edges` files (relative to the manifest) and
/// optionally `num_classes`.
fn load_csv_triple(manifest: &Path) -> Result<Graph> {
    let text = fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut files: [Option<PathBuf>; 3] = [None, None, None];
    let mut num_classes = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(i + 1, "manifest lines must be key=value"))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "format" if v == "csv-triple" => {}
            "features" => files[0] = Some(base.join(v)),
            "labels" => files[1] = Some(base.join(v)),
            "edges" => files[2] = Some(base.join(v)),
            "num_classes" => num_classes = Some(parse_num::<usize>(v, i + 1, "num_classes")?),
            _ => return Err(parse_err(i + 1, format!("unknown manifest key '{k}'"))),
        }
    }
    let [Some(fpath), lpath, Some(epath)] = files else {
        return Err(Error::Format("manifest must name features and edges files".into()));
    };

    let ftext = fs::read_to_string(fpath)?;
    let mut feats = Vec::new();
    let mut feat_dim = None;
    let mut num_nodes = 0;
    for (i, line) in ftext.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = feats.len();
        for tok in line.split(',') {
            feats.push(parse_num::<f32>(tok.trim(), i + 1, "feature value")?);
        }
        let found = feats.len() - before;
        match feat_dim {
            None => feat_dim = Some(found),
            Some(d) if d != found => {
                return Err(Error::FeatureDim {
                    line: i + 1,
                    expected: d,
                    found,
                })
            }
            _ => {}
        }
        num_nodes += 1;
    }
    let features = Tensor::from_vec(num_nodes, feat_dim.unwrap_or(0), feats)?;

    let labels = match lpath {
        Some(p) => {
            let ltext = fs::read_to_string(p)?;
            let mut labels = Vec::with_capacity(num_nodes);
            for (i, line) in ltext.lines().enumerate() {
                if !line.trim().is_empty() {
                    labels.push(parse_num::<i32>(line.trim(), i + 1, "label")?);
                }
            }
            if labels.len() != num_nodes {
                return Err(Error::Format(format!(
                    "{} labels for {num_nodes} feature rows",
                    labels.len()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    let num_classes = num_classes.or_else(|| {
        labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|&m| (m + 1).max(0) as usize))
    });

    let etext = fs::read_to_string(epath)?;
    let mut edges = Vec::new();
    for (i, line) in etext.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| parse_err(i + 1, "edge rows must be 'u,v'"))?;
        let u: usize = parse_num(a.trim(), i + 1, "node index")?;
        let v: usize = parse_num(b.trim(), i + 1, "node index")?;
        for x in [u, v] {
            if x >= num_nodes {
                return Err(Error::IndexOutOfRange {
                    index: x,
                    num_nodes,
                    line: i + 1,
                });
            }
        }
        edges.push((u, v));
    }
    Graph::from_edges(num_nodes, &edges, features, labels, num_classes)
}

/// Symmetrically normalized adjacency with self-loops,
/// `w(u, v) = 1 / sqrt((deg(u) + 1)(deg(v) + 1))`.
#[derive(Clone, Debug)]
pub struct NormAdj(Arc<CsrMatrix>);

impl NormAdj {
    pub fn csr(&self) -> &Arc<CsrMatrix> {
        &self.0
    }

    pub fn weight(&self, u: usize, v: usize) -> Option<f32> {
        self.0.row(u).find(|&(c, _)| c == v).map(|(_, w)| w)
    }
}

pub fn normalize_adjacency(g: &Graph) -> NormAdj {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|u| 1.0 / ((g.degree(u) + 1) as f64).sqrt())
        .collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(g.col_indices.len() + n);
    let mut vals = Vec::with_capacity(g.col_indices.len() + n);
    offsets.push(0);
    for u in 0..n {
        let mut self_done = false;
        for &v in g.neighbors(u) {
            if !self_done && v > u {
                cols.push(u);
                vals.push((inv_sqrt[u] * inv_sqrt[u]) as f32);
                self_done = true;
            }
            cols.push(v);
            vals.push((inv_sqrt[u] * inv_sqrt[v]) as f32);
        }
        if !self_done {
            cols.push(u);
            vals.push((inv_sqrt[u] * inv_sqrt[u]) as f32);
        }
        offsets.push(cols.len());
    }
    NormAdj(Arc::new(
        CsrMatrix::new(n, n, offsets, cols, vals).expect("normalized adjacency is well-formed"),
    ))
}

/// Row-normalized adjacency without self-loops (neighbor mean). Isolated
/// nodes get an empty row.
pub fn mean_adjacency(g: &Graph) -> Arc<CsrMatrix> {
    let n = g.num_nodes();
    let vals = (0..n)
        .flat_map(|u| {
            let d = g.degree(u);
            std::iter::repeat_n(1.0 / d.max(1) as f32, d)
        })
        .collect();
    Arc::new(
        CsrMatrix::new(n, n, g.row_offsets.clone(), g.col_indices.clone(), vals)
            .expect("mean adjacency is well-formed"),
    )
}

/// Disjoint node masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub valid: Vec<bool>,
    pub test: Vec<bool>,
    pub seed: u64,
}

impl SplitMasks {
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (c(&self.train), c(&self.valid), c(&self.test))
    }

    /// One character per node: `t`, `v`, `s`, or `-`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.train.len() * 2);
        for i in 0..self.train.len() {
            out.push(if self.train[i] {
                't'
            } else if self.valid[i] {
                'v'
            } else if self.test[i] {
                's'
            } else {
                '-'
            });
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, seed: u64) -> Result<Self> {
        let mut m = Self {
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
            seed,
        };
        for (i, line) in text.lines().enumerate() {
            let tag = line.trim();
            if tag.is_empty() {
                continue;
            }
            let (t, v, s) = match tag {
                "t" => (true, false, false),
                "v" => (false, true, false),
                "s" => (false, false, true),
                "-" => (false, false, false),
                other => return Err(parse_err(i + 1, format!("unknown split tag '{other}'"))),
            };
            m.train.push(t);
            m.valid.push(v);
            m.test.push(s);
        }
        Ok(m)
    }
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    Ok(())
}

/// Distributes `total` across buckets proportionally to `ideal`, using floors
/// plus largest remainders (ties go to the lower bucket index).
fn apportion(ideal: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..ideal.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Stratified random split of the labeled nodes.
pub fn split_nodes(g: &Graph, ratios: (f64, f64, f64), seed: u64) -> Result<SplitMasks> {
    check_ratios(ratios)?;
    let labels = g
        .labels()
        .ok_or_else(|| Error::Config("split_nodes requires a labeled graph".into()))?;
    let nc = g
        .num_classes()
        .unwrap_or_else(|| labels.iter().copied().max().map_or(0, |m| (m + 1) as usize));
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for (i, &y) in labels.iter().enumerate() {
        if y >= 0 {
            by_class[y as usize].push(i);
        }
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < 3 {
            return Err(Error::Stratification {
                class,
                count: members.len(),
            });
        }
    }
    let total: usize = by_class.iter().map(Vec::len).sum();
    let want_train = (ratios.0 * total as f64).round() as usize;
    let want_valid = (ratios.1 * total as f64).round() as usize;

    let train_counts = apportion(
        &by_class.iter().map(|m| ratios.0 * m.len() as f64).collect::<Vec<_>>(),
        want_train,
    );
    let valid_counts = apportion(
        &by_class.iter().map(|m| ratios.1 * m.len() as f64).collect::<Vec<_>>(),
        want_valid,
    );

    let n = g.num_nodes();
    let mut masks = SplitMasks {
        train: vec![false; n],
        valid: vec![false; n],
        test: vec![false; n],
        seed,
    };
    let mut rng = rng::stream(seed, Stream::NodeSplit);
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let nt = train_counts[c].min(members.len());
        let nv = valid_counts[c].min(members.len() - nt);
        for (k, &node) in members.iter().enumerate() {
            if k < nt {
                masks.train[node] = true;
            } else if k < nt + nv {
                masks.valid[node] = true;
            } else {
                masks.test[node] = true;
            }
        }
    }
    Ok(masks)
}

/// Positive/negative edge sets for link prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSplit {
    pub train_pos: Vec<(usize, usize)>,
    pub valid_pos: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub valid_neg: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
    pub seed: u64,
}

impl EdgeSplit {
    /// The message-passing graph seen during link training: train positives only.
    pub fn train_graph(&self, g: &Graph) -> Result<Graph> {
        g.with_edges(&self.train_pos)
    }
}

/// Samples a uniformly random non-edge `(u, v)`, `u < v`, not in `exclude`.
pub(crate) fn sample_non_edge<R: Rng + ?Sized>(
    g: &Graph,
    exclude: &HashSet<(usize, usize)>,
    rng: &mut R,
    max_tries: usize,
) -> Option<(usize, usize)> {
    let n = g.num_nodes();
    for _ in 0..max_tries {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        let (u, v) = (a.min(b), a.max(b));
        if !g.has_edge(u, v) && !exclude.contains(&(u, v)) {
            return Some((u, v));
        }
    }
    None
}

pub fn split_edges(
    g: &Graph,
    ratios: (f64, f64, f64),
    negatives_per_positive: usize,
    seed: u64,
) -> Result<EdgeSplit> {
    check_ratios(ratios)?;
    let mut edges = g.edges();
    if edges.len() < 10 {
        return Err(Error::Config(format!(
            "edge split needs at least 10 edges, graph has {}",
            edges.len()
        )));
    }
    let mut rng = rng::stream(seed, Stream::EdgeSplit);
    edges.shuffle(&mut rng);
    let m = edges.len();
    let n_valid = (ratios.1 * m as f64).round() as usize;
    let n_test = (ratios.2 * m as f64).round() as usize;
    let n_train = m - n_valid - n_test;
    let mut split = EdgeSplit {
        train_pos: edges[..n_train].to_vec(),
        valid_pos: edges[n_train..n_train + n_valid].to_vec(),
        test_pos: edges[n_train + n_valid..].to_vec(),
        valid_neg: Vec::new(),
        test_neg: Vec::new(),
        seed,
    };
    for list in [&mut split.train_pos, &mut split.valid_pos, &mut split.test_pos] {
        list.sort_unstable();
    }

    let n = g.num_nodes();
    let want = negatives_per_positive * (n_valid + n_test);
    let available = n * n.saturating_sub(1) / 2 - m;
    if want > available {
        return Err(Error::Sampling(format!(
            "requested {want} negatives but only {available} non-edges exist"
        )));
    }
    let mut taken = HashSet::with_capacity(want);
    let max_tries = 1000 + 100 * n;
    for (count, dst) in [
        (negatives_per_positive * n_valid, &mut split.valid_neg),
        (negatives_per_positive * n_test, &mut split.test_neg),
    ] {
        for _ in 0..count {
            let e = sample_non_edge(g, &taken, &mut rng, max_tries).ok_or_else(|| {
                Error::Sampling(format!("no free non-edge found after {max_tries} tries"))
            })?;
            taken.insert(e);
            dst.push(e);
        }
    }
    Ok(split)
}
