//! Runs the supervised node pipeline once on the citation benchmark (or its
//! surrogate) and prints baseline, ID-head accuracy, codebook usage, timing.
//!
//! Usage: `cargo run --release --example cora_probe -- [seed] [epochs] [key=value...]`

use std::time::Instant;

use nid_core::datasets::{cora_or_surrogate, edge_homophily};
use nid_core::downstream::{train_node_head, HeadConfig};
use nid_core::graph::split_nodes;
use nid_core::train::{evaluate_node, generate_ids, train_supervised_node, TrainConfig};

fn main() -> nid_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let (g, name) = cora_or_surrogate(0)?;
    println!("{name}: n={} m={} homophily={:.3}", g.num_nodes(), g.num_edges(), edge_homophily(&g).unwrap());
    let splits = split_nodes(&g, (0.6, 0.2, 0.2), seed)?;
    let mut cfg = TrainConfig {
        layers: 4,
        hidden: 128,
        levels: 3,
        k: 6,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        assert!(cfg.set(k, v)?, "unknown key {k}");
    }

    if std::env::var_os("SKIP_BASELINE").is_none() {
        let t = Instant::now();
        let base = train_supervised_node(&g, &splits, &TrainConfig { levels: 0, ..cfg.clone() })?;
        let (bv, bt) = evaluate_node(&base.model, &g, &splits)?;
        println!("baseline: valid={bv:.4} test={bt:.4} best_epoch={} {:?}", base.log.best_epoch, t.elapsed());
    }

    let t = Instant::now();
    let run = train_supervised_node(&g, &splits, &cfg)?;
    let (gv, gt) = evaluate_node(&run.model, &g, &splits)?;
    println!("nid encoder: valid={gv:.4} test={gt:.4} best_epoch={} {:?}", run.log.best_epoch, t.elapsed());
    let last = run.log.entries.last().unwrap();
    for e in run.log.entries.iter().step_by(25) {
        println!("  epoch {:>4} L_G={:.4} L_VQ={:.4} usage={:.3} val={:.4}", e.epoch, e.loss_g, e.loss_vq, e.usage, e.val);
    }
    println!("last epoch: L_G={:.4} L_VQ={:.4} usage={:.3}", last.loss_g, last.loss_vq, last.usage);

    let tbl = generate_ids(&run.model, &g)?;
    let set = run.model.codebooks.as_ref().unwrap();
    let mut scratch = set.clone();
    scratch.reset_usage();
    let prop = nid_core::mpnn::Propagation::new(&g);
    let x = nid_core::mpnn::Features::from_tensor(g.features());
    let emb = run.model.embed(&prop, &x)?;
    for (l, h) in emb.iter().enumerate() {
        let codes = scratch.quantize_rows(l, h)?;
        for (i, c) in codes.iter().enumerate() {
            scratch.get_mut(l, i % scratch.levels).usage[*c] += 1;
        }
    }
    let (per, agg) = scratch.usage_rate();
    println!("usage aggregate={agg:.3} min={:.3}", per.iter().cloned().fold(1.0, f64::min));
    println!("distinct ids={}", tbl.distinct_ids());

    let t = Instant::now();
    let labels = g.labels().unwrap().to_vec();
    let head = train_node_head(&tbl, &labels, &splits, &HeadConfig { seed, ..HeadConfig::default() })?;
    println!("id head: valid={:.4} test={:.4} epochs={} {:?}", head.valid, head.test, head.epochs, t.elapsed());
    Ok(())
}
