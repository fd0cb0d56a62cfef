//! Synthetic graphs and the LINQS citation-graph reader.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Pareto};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, Stream};

/// Planted-partition graph with Gaussian class-conditional features.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmConfig {
    pub sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    /// Standard deviation of the per-class feature means; 0 makes features
    /// pure noise.
    pub signal: f32,
    pub noise: f32,
    pub seed: u64,
}

impl SbmConfig {
    pub fn new(sizes: Vec<usize>, p_in: f64, p_out: f64, seed: u64) -> Self {
        Self {
            sizes,
            p_in,
            p_out,
            feat_dim: 16,
            signal: 1.0,
            noise: 1.0,
            seed,
        }
    }
}

pub fn sbm(cfg: &SbmConfig) -> Result<Graph> {
    for p in [cfg.p_in, cfg.p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("edge probability {p} outside [0, 1]")));
        }
    }
    if cfg.sizes.is_empty() || cfg.feat_dim == 0 {
        return Err(Error::Empty("sbm blocks"));
    }
    let mut rng = rng::stream(cfg.seed, Stream::Synth);
    let labels: Vec<i32> = cfg
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &s)| std::iter::repeat_n(c as i32, s))
        .collect();
    let n = labels.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let d = cfg.feat_dim;
    let gauss = Normal::new(0.0f32, 1.0).expect("unit normal");
    let means: Vec<f32> = (0..cfg.sizes.len() * d)
        .map(|_| cfg.signal * gauss.sample(&mut rng))
        .collect();
    let mut feats = Vec::with_capacity(n * d);
    for &y in &labels {
        let mu = &means[y as usize * d..(y as usize + 1) * d];
        feats.extend(mu.iter().map(|&m| m + cfg.noise * gauss.sample(&mut rng)));
    }
    Graph::from_edges(
        n,
        &edges,
        Tensor::from_vec(n, d, feats)?,
        Some(labels),
        Some(cfg.sizes.len()),
    )
}

/// `count` stars (label 0) followed by `count` paths (label 1), each with
/// `nodes` nodes, node order shuffled, one constant feature.
pub fn stars_and_paths(count: usize, nodes: usize, seed: u64) -> Result<(Vec<Graph>, Vec<usize>)> {
    if nodes < 3 {
        return Err(Error::Config("stars and paths need at least 3 nodes".into()));
    }
    let mut rng = rng::stream(seed, Stream::Synth);
    let mut graphs = Vec::with_capacity(2 * count);
    let mut labels = Vec::with_capacity(2 * count);
    for label in 0..2 {
        for _ in 0..count {
            let mut perm: Vec<usize> = (0..nodes).collect();
            perm.shuffle(&mut rng);
            let edges: Vec<(usize, usize)> = (1..nodes)
                .map(|i| if label == 0 { (perm[0], perm[i]) } else { (perm[i - 1], perm[i]) })
                .collect();
            graphs.push(Graph::from_edges(
                nodes,
                &edges,
                Tensor::from_vec(nodes, 1, vec![1.0; nodes])?,
                None,
                None,
            )?);
            labels.push(label);
        }
    }
    Ok((graphs, labels))
}

/// Class sizes of the standard citation benchmark with 2708 papers.
pub const CORA_CLASS_SIZES: [usize; 7] = [351, 217, 418, 818, 426, 298, 180];
pub const CORA_EDGES: usize = 5278;
pub const CORA_FEATURES: usize = 1433;

/// Knobs of [`citation_surrogate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub class_sizes: Vec<usize>,
    pub edges: usize,
    pub vocab: usize,
    /// Fraction of edges whose endpoints share a class.
    pub homophily: f64,
    /// Pareto shape of the degree propensities; smaller is heavier-tailed.
    pub degree_shape: f64,
    pub words_min: usize,
    pub words_max: usize,
    /// Topic words per class.
    pub topic_size: usize,
    /// Probability that a word is drawn from the node's class topic.
    pub topic_rate: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            class_sizes: CORA_CLASS_SIZES.to_vec(),
            edges: CORA_EDGES,
            vocab: CORA_FEATURES,
            homophily: 0.81,
            degree_shape: 2.0,
            words_min: 9,
            words_max: 27,
            topic_size: 120,
            topic_rate: 0.3,
            seed: 0,
        }
    }
}

/// Citation-graph stand-in with the shape of the 2708-paper benchmark:
/// same class sizes, edge count and vocabulary, sparse binary bag-of-words
/// features, heavy-tailed degrees and edge homophily near 0.81.
pub fn citation_surrogate(cfg: &SurrogateConfig) -> Result<Graph> {
    let classes = cfg.class_sizes.len();
    if classes < 2 || cfg.vocab < cfg.topic_size || cfg.words_min > cfg.words_max {
        return Err(Error::Config("invalid surrogate configuration".into()));
    }
    let mut rng = rng::stream(cfg.seed, Stream::Synth);
    let labels: Vec<i32> = cfg
        .class_sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &s)| std::iter::repeat_n(c as i32, s))
        .collect();
    let n = labels.len();
    let pareto = Pareto::new(1.0, cfg.degree_shape).map_err(|e| Error::Config(e.to_string()))?;
    let weight: Vec<f64> = (0..n).map(|_| pareto.sample(&mut rng).min(200.0)).collect();
    let members: Vec<Vec<usize>> = (0..classes)
        .map(|c| (0..n).filter(|&i| labels[i] as usize == c).collect())
        .collect();
    let weighted = |idx: &[usize]| {
        WeightedIndex::new(idx.iter().map(|&i| weight[i])).map_err(|e| Error::Sampling(e.to_string()))
    };
    let pick_any = weighted(&(0..n).collect::<Vec<_>>())?;
    let pick_in: Vec<_> = members.iter().map(|m| weighted(m)).collect::<Result<_>>()?;
    let max_edges = n * (n - 1) / 2;
    if cfg.edges > max_edges / 2 {
        return Err(Error::Config(format!("{} edges is too dense for {n} nodes", cfg.edges)));
    }
    let mut seen = HashSet::with_capacity(cfg.edges);
    let mut edges = Vec::with_capacity(cfg.edges);
    while edges.len() < cfg.edges {
        let u = pick_any.sample(&mut rng);
        let cu = labels[u] as usize;
        let v = if rng.random::<f64>() < cfg.homophily {
            members[cu][pick_in[cu].sample(&mut rng)]
        } else {
            let v = pick_any.sample(&mut rng);
            if labels[v] as usize == cu {
                continue;
            }
            v
        };
        let e = (u.min(v), u.max(v));
        if u != v && seen.insert(e) {
            edges.push(e);
        }
    }

    // Background word frequencies follow a Zipf-like law; topics are
    // disjoint random word sets.
    let mut words: Vec<usize> = (0..cfg.vocab).collect();
    words.shuffle(&mut rng);
    let background = WeightedIndex::new((0..cfg.vocab).map(|r| 1.0 / (r as f64 + 10.0)))
        .map_err(|e| Error::Sampling(e.to_string()))?;
    let topics: Vec<&[usize]> = (0..classes)
        .map(|c| {
            let start = (c * cfg.topic_size) % (cfg.vocab - cfg.topic_size + 1);
            &words[start..start + cfg.topic_size]
        })
        .collect();
    let mut feats = vec![0.0f32; n * cfg.vocab];
    for (i, &y) in labels.iter().enumerate() {
        let count = rng.random_range(cfg.words_min..=cfg.words_max);
        let row = &mut feats[i * cfg.vocab..(i + 1) * cfg.vocab];
        for _ in 0..count {
            let w = if rng.random::<f64>() < cfg.topic_rate {
                let t = topics[y as usize];
                t[rng.random_range(0..t.len())]
            } else {
                words[background.sample(&mut rng)]
            };
            row[w] = 1.0;
        }
    }
    Graph::from_edges(
        n,
        &edges,
        Tensor::from_vec(n, cfg.vocab, feats)?,
        Some(labels),
        Some(classes),
    )
}

/// Fraction of edges whose endpoints share a label.
pub fn edge_homophily(g: &Graph) -> Option<f64> {
    let labels = g.labels()?;
    let edges = g.edges();
    if edges.is_empty() {
        return None;
    }
    let same = edges.iter().filter(|&&(u, v)| labels[u] == labels[v]).count();
    Some(same as f64 / edges.len() as f64)
}

/// Reads a LINQS-format citation dataset: `<name>.content` holds
/// `paper_id feature... label` rows, `<name>.cites` holds `cited citing`
/// pairs. Labels are numbered in sorted name order; citations naming
/// unknown papers are skipped with a warning.
pub fn load_linqs(dir: impl AsRef<Path>, name: &str) -> Result<Graph> {
    let dir = dir.as_ref();
    let content = std::fs::read_to_string(dir.join(format!("{name}.content")))?;
    let cites = std::fs::read_to_string(dir.join(format!("{name}.cites")))?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut dim = None;
    for (ln, line) in content.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(Error::Parse {
                line: ln + 1,
                msg: "expected id, features and label".into(),
            });
        }
        let feats = &toks[1..toks.len() - 1];
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::FeatureDim {
                    line: ln + 1,
                    expected: d,
                    found: feats.len(),
                })
            }
            _ => {}
        }
        let row = feats
            .iter()
            .map(|t| {
                t.parse::<f32>().map_err(|_| Error::Parse {
                    line: ln + 1,
                    msg: format!("bad feature '{t}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("duplicate paper id '{}'", toks[0]),
            });
        }
        rows.push(row);
        raw_labels.push(toks[toks.len() - 1].to_string());
    }
    let n = rows.len();
    let dim = dim.ok_or(Error::Empty("content file"))?;
    let names: BTreeMap<&str, usize> = {
        let mut set: Vec<&str> = raw_labels.iter().map(String::as_str).collect();
        set.sort_unstable();
        set.dedup();
        set.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    let labels: Vec<i32> = raw_labels.iter().map(|s| names[s.as_str()] as i32).collect();
    let mut edges = Vec::new();
    let mut skipped = 0;
    for (ln, line) in cites.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            [a, b] => match (ids.get(*a), ids.get(*b)) {
                (Some(&u), Some(&v)) => edges.push((u, v)),
                _ => skipped += 1,
            },
            _ => {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: "expected two paper ids".into(),
                })
            }
        }
    }
    if skipped > 0 {
        log::warn!("{name}: skipped {skipped} citations to unknown papers");
    }
    let feats: Vec<f32> = rows.into_iter().flatten().collect();
    Graph::from_edges(
        n,
        &edges,
        Tensor::from_vec(n, dim, feats)?,
        Some(labels),
        Some(names.len()),
    )
}

/// Loads the real citation benchmark when `NID_CORA` names a directory that
/// holds `cora.content` and `cora.cites`; otherwise builds the surrogate.
/// The returned name says which one was used.
pub fn cora_or_surrogate(seed: u64) -> Result<(Graph, &'static str)> {
    if let Ok(dir) = std::env::var("NID_CORA") {
        return Ok((load_linqs(dir, "cora")?, "cora"));
    }
    let cfg = SurrogateConfig {
        seed,
        ..SurrogateConfig::default()
    };
    Ok((citation_surrogate(&cfg)?, "cora-surrogate"))
}
