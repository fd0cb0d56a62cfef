//! Inference-time comparison of the full encoder against the ID head.

use std::hint::black_box;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use nid_core::downstream::{MlpHead, NodeIdTable};
use nid_core::graph::Graph;
use nid_core::io::{id_file_len, id_payload_len};
use nid_core::mpnn::{Features, Propagation};
use nid_core::train::NidModel;
use nid_core::Error;

pub const MIN_REPEATS: usize = 20;
/// Width of the real-valued embeddings the ID file is compared against.
pub const REFERENCE_DIM: usize = 256;
const WARMUP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub repeats: usize,
    /// Median wall time of encoder forward plus its linear head, all nodes.
    pub gnn_latency: Duration,
    /// Median wall time of ID embedding plus MLP, all nodes.
    pub id_latency: Duration,
    /// Median wall time of the ID head for a single node.
    pub id_single_latency: Duration,
    pub speedup: f64,
    /// Exact ID file size including its header.
    pub id_bytes: u64,
    pub id_payload_bytes: u64,
    pub embedding_bytes: u64,
}

impl BenchReport {
    pub fn bytes_ratio(&self) -> f64 {
        self.id_bytes as f64 / self.embedding_bytes as f64
    }

    pub fn payload_ratio(&self) -> f64 {
        self.id_payload_bytes as f64 / self.embedding_bytes as f64
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

fn time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<Duration> {
    for _ in 0..WARMUP {
        black_box(f()?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        black_box(f()?);
        samples.push(t.elapsed());
    }
    Ok(median(samples))
}

/// Times both inference paths on the calling thread. Graph preprocessing
/// (adjacency normalization, feature layout) and ID-file loading are done
/// once up front and excluded from both measurements.
pub fn bench_inference(
    model: &NidModel,
    tbl: &NodeIdTable,
    head: &MlpHead,
    g: &Graph,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("repeats = {repeats} is below the minimum of {MIN_REPEATS}")).into());
    }
    if tbl.num_nodes != g.num_nodes() {
        return Err(Error::Config(format!(
            "ID table has {} nodes but the graph has {}",
            tbl.num_nodes,
            g.num_nodes()
        ))
        .into());
    }
    let gnn_head = model
        .head
        .as_ref()
        .context("model has no node head to benchmark against")?;
    let prop = Propagation::new(g);
    let x = Features::from_tensor(g.features());
    let nodes: Vec<usize> = (0..g.num_nodes()).collect();

    let gnn_latency = time(repeats, || {
        let h = model.encoder.embed(&prop, &x, false)?;
        Ok(gnn_head.apply(h.last().expect("L >= 1"))?)
    })?;
    let id_latency = time(repeats, || Ok(head.predict(tbl, &nodes)?))?;
    let probe = [g.num_nodes() / 2];
    let id_single_latency = time(repeats, || Ok(head.predict(tbl, &probe)?))?;

    let width = tbl.width();
    Ok(BenchReport {
        repeats,
        gnn_latency,
        id_latency,
        id_single_latency,
        speedup: gnn_latency.as_secs_f64() / id_latency.as_secs_f64().max(1e-12),
        id_bytes: id_file_len(tbl.num_nodes, width, tbl.k),
        id_payload_bytes: id_payload_len(tbl.num_nodes, width, tbl.k),
        embedding_bytes: (g.num_nodes() * REFERENCE_DIM * 4) as u64,
    })
}
