//! End-to-end training behavior on small synthetic graphs.

use nid_core::autodiff::{Tape, Tensor};
use nid_core::datasets::{sbm, stars_and_paths, SbmConfig};
use nid_core::downstream::{train_node_head, HeadConfig, MlpHead};
use nid_core::graph::{split_edges, split_nodes, Graph, SplitMasks};
use nid_core::io;
use nid_core::metrics::roc_auc;
use nid_core::mpnn::{EncoderKind, EncoderStack, Features, Propagation};
use nid_core::nn::{self, Parameters};
use nid_core::train::{
    batch_graphs, evaluate_node, generate_ids, graph_predict, reconstruction_loss, train_mae,
    train_supervised_graph, train_supervised_link, train_supervised_node, NidModel, Objective,
    TrainConfig,
};
use nid_core::vq::{CodebookSet, LossNorm, Metric, VqMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn two_block(seed: u64) -> Graph {
    sbm(&SbmConfig::new(vec![50, 50], 0.3, 0.02, seed)).unwrap()
}

fn node_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        layers: 2,
        hidden: 32,
        levels: 2,
        k: 4,
        epochs: 60,
        seed,
        ..TrainConfig::default()
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b })
        })
        .collect()
}

#[test]
fn supervised_node_fits_a_two_block_sbm() {
    let g = two_block(1);
    let splits = split_nodes(&g, (0.6, 0.2, 0.2), 1).unwrap();
    let t = train_supervised_node(&g, &splits, &TrainConfig { epochs: 200, ..node_cfg(1) }).unwrap();
    let pred = argmax_rows(&t.model.node_logits(&g).unwrap());
    let labels: Vec<usize> = g.labels().unwrap().iter().map(|&y| y as usize).collect();
    let train_acc = nid_core::metrics::accuracy(&pred, &labels, &splits.train);
    assert!(train_acc >= 0.95, "train accuracy {train_acc}");
    assert_eq!(t.log.entries.len(), 200);
}

#[test]
fn loss_decomposes_every_epoch() {
    let g = two_block(2);
    let splits = split_nodes(&g, (0.6, 0.2, 0.2), 2).unwrap();
    let cfg = node_cfg(2);
    let t = train_supervised_node(&g, &splits, &cfg).unwrap();
    for e in &t.log.entries {
        assert_eq!(e.loss_nid, e.loss_g + e.loss_vq, "epoch {}", e.epoch);
        if e.epoch >= cfg.warmup_epochs {
            assert!(e.loss_vq > 0.0);
        } else {
            assert_eq!(e.loss_vq, 0.0);
        }
    }
}

#[test]
fn zero_beta_without_ema_matches_the_plain_encoder() {
    let g = two_block(3);
    let splits = split_nodes(&g, (0.6, 0.2, 0.2), 3).unwrap();
    let base_cfg = TrainConfig { levels: 0, ..node_cfg(3) };
    let vq_cfg = TrainConfig {
        beta: 0.0,
        vq_mode: VqMode::CodebookLoss,
        ..node_cfg(3)
    };
    let base = train_supervised_node(&g, &splits, &base_cfg).unwrap();
    let vq = train_supervised_node(&g, &splits, &vq_cfg).unwrap();
    for (a, b) in base.log.entries.iter().zip(&vq.log.entries) {
        assert_eq!(a.loss_g, b.loss_g, "epoch {}", a.epoch);
        assert_eq!(a.val, b.val);
    }
    // Warm-up epochs are never checkpointed for a VQ model, so compare the
    // selected weights with warm-up disabled.
    let last = |cfg: &TrainConfig| {
        let t = train_supervised_node(&g, &splits, &TrainConfig { warmup_epochs: 0, ..cfg.clone() }).unwrap();
        let best = t.log.best_epoch;
        (t.model.encoder, best)
    };
    let (ea, ba) = last(&base_cfg);
    let (eb, bb) = last(&vq_cfg);
    assert_eq!(ba, bb);
    assert_eq!(ea.params(), eb.params());
}

#[test]
fn training_is_deterministic() {
    let g = two_block(4);
    let splits = split_nodes(&g, (0.6, 0.2, 0.2), 4).unwrap();
    let run = || {
        let t = train_supervised_node(&g, &splits, &node_cfg(4)).unwrap();
        let ids = generate_ids(&t.model, &g).unwrap();
        let mut bytes = Vec::new();
        io::write_ids(&ids, &mut bytes).unwrap();
        (t.log, ids, bytes)
    };
    let (la, ia, ba) = run();
    let (lb, ib, bb) = run();
    assert_eq!(la, lb);
    assert_eq!(ia, ib);
    assert_eq!(ba, bb);

    let mae = TrainConfig {
        objective: Objective::Mae,
        epochs: 15,
        ..node_cfg(4)
    };
    let a = train_mae(&g, &mae).unwrap();
    let b = train_mae(&g, &mae).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(generate_ids(&a.model, &g).unwrap(), generate_ids(&b.model, &g).unwrap());
}

#[test]
fn ids_are_layer_major_tuples() {
    let g = two_block(5);
    let splits = split_nodes(&g, (0.6, 0.2, 0.2), 5).unwrap();
    let cfg = TrainConfig { levels: 1, epochs: 15, ..node_cfg(5) };
    let t = train_supervised_node(&g, &splits, &cfg).unwrap();
    let ids = generate_ids(&t.model, &g).unwrap();
    assert_eq!((ids.layers, ids.levels, ids.width()), (2, 1, 2));
    let set = t.model.codebooks.as_ref().unwrap();
    let emb = t.model.embed(&Propagation::new(&g), &Features::from_tensor(g.features())).unwrap();
    for v in 0..g.num_nodes() {
        for l in 0..2 {
            let q = set.rvq_quantize(l, emb[l].row(v)).unwrap();
            assert_eq!(ids.id(v)[l] as usize, q.codewords[0]);
        }
    }
}

#[test]
fn automorphic_nodes_share_ids() {
    // Leaves of a star with identical features are interchangeable.
    let n = 7;
    let edges: Vec<(usize, usize)> = (1..n).map(|v| (0, v)).collect();
    let feats: Vec<f32> = (0..n).flat_map(|v| if v == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let labels = Some((0..n).map(|v| (v == 0) as i32).collect());
    let g = Graph::from_edges(n, &edges, Tensor::from_vec(n, 2, feats).unwrap(), labels, Some(2)).unwrap();
    let splits = SplitMasks {
        train: vec![true; n],
        valid: vec![true; n],
        test: vec![true; n],
        seed: 0,
    };
    let t = train_supervised_node(&g, &splits, &TrainConfig { epochs: 15, ..node_cfg(6) }).unwrap();
    let ids = generate_ids(&t.model, &g).unwrap();
    for v in 2..n {
        assert_eq!(ids.id(1), ids.id(v));
    }
}

#[test]
fn mae_copies_features_from_block_mates() {
    // Every node of a clique carries its clique's indicator vector, so a
    // masked node's features are recoverable from its neighbors.
    let (blocks, size) = (6, 8);
    let n = blocks * size;
    let mut edges = Vec::new();
    for b in 0..blocks {
        for i in 0..size {
            for j in i + 1..size {
                edges.push((b * size + i, b * size + j));
            }
        }
    }
    let feats: Vec<f32> = (0..n).flat_map(|v| (0..blocks).map(move |c| (v / size == c) as u8 as f32)).collect();
    let g = Graph::from_edges(n, &edges, Tensor::from_vec(n, blocks, feats).unwrap(), None, None).unwrap();
    let cfg = TrainConfig {
        objective: Objective::Mae,
        layers: 1,
        hidden: 64,
        levels: 1,
        k: 8,
        epochs: 150,
        dropout: 0.0,
        weight_decay: 0.0,
        seed: 7,
        ..TrainConfig::default()
    };
    let t = train_mae(&g, &cfg).unwrap();
    let rows: Vec<usize> = (0..n).step_by(3).collect();
    let loss = reconstruction_loss(&t.model, &Propagation::new(&g), &Features::from_tensor(g.features()), g.features(), &rows).unwrap();
    assert!(loss < 0.05, "copy-task reconstruction loss {loss}");
}

#[test]
fn tiny_mask_rate_still_trains() {
    let g = two_block(8);
    let cfg = TrainConfig {
        objective: Objective::Mae,
        mask_rate: 1e-4,
        epochs: 12,
        ..node_cfg(8)
    };
    let t = train_mae(&g, &cfg).unwrap();
    assert_eq!(t.log.entries.len(), 12);
    assert!(t.log.entries.iter().all(|e| e.loss_g.is_finite()));
}

#[test]
fn mask_rate_must_be_a_fraction() {
    for bad in [0.0, 1.0, 1.5] {
        let cfg = TrainConfig { objective: Objective::Mae, mask_rate: bad, ..node_cfg(0) };
        assert!(cfg.validate().is_err(), "mask_rate {bad}");
    }
}

#[test]
fn link_model_ranks_within_block_pairs_higher() {
    let g = two_block(9);
    let edges = split_edges(&g, (0.85, 0.05, 0.1), 1, 9).unwrap();
    let cfg = TrainConfig {
        objective: Objective::SupervisedLink,
        epochs: 100,
        ..node_cfg(9)
    };
    let t = train_supervised_link(&g, &edges, &cfg).unwrap();
    let tg = edges.train_graph(&g).unwrap();
    let emb = t.model.embed(&Propagation::new(&tg), &Features::from_tensor(tg.features())).unwrap();
    let h = emb.last().unwrap();
    let labels = g.labels().unwrap();
    let (mut pairs, mut same) = (Vec::new(), Vec::new());
    for u in 0..g.num_nodes() {
        for v in u + 1..g.num_nodes() {
            if !g.has_edge(u, v) {
                pairs.push((u, v));
                same.push(labels[u] == labels[v]);
            }
        }
    }
    let prod: Vec<f32> = pairs
        .iter()
        .flat_map(|&(u, v)| h.row(u).iter().zip(h.row(v)).map(|(a, b)| a * b).collect::<Vec<_>>())
        .collect();
    let logits = t.model.head.as_ref().unwrap().apply(&Tensor::from_vec(pairs.len(), h.cols(), prod).unwrap()).unwrap();
    let scores: Vec<f64> = logits.data().iter().map(|&x| x as f64).collect();
    let auc = roc_auc(&scores, &same).unwrap();
    assert!(auc >= 0.8, "within-block AUC {auc}");
}

#[test]
fn graph_model_separates_stars_from_paths() {
    let (graphs, labels) = stars_and_paths(40, 10, 10).unwrap();
    let n = graphs.len();
    let train: Vec<bool> = (0..n).map(|i| i % 4 < 2).collect();
    let valid: Vec<bool> = (0..n).map(|i| i % 4 == 2).collect();
    let cfg = TrainConfig {
        objective: Objective::SupervisedGraph,
        epochs: 100,
        ..node_cfg(10)
    };
    let t = train_supervised_graph(&graphs, &labels, &train, &valid, &cfg).unwrap();
    let (batch, segments) = batch_graphs(&graphs).unwrap();
    let pred = graph_predict(&t.model, &Propagation::new(&batch), &Features::from_tensor(batch.features()), &segments, n).unwrap();
    let test: Vec<usize> = (0..n).filter(|i| i % 4 == 3).collect();
    assert!(test.iter().all(|&i| pred[i] == labels[i]), "{pred:?} vs {labels:?}");
}

#[test]
fn commitment_step_pulls_embeddings_toward_their_codes() {
    let g = two_block(11);
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let enc = EncoderStack::new(EncoderKind::Gcn, &[g.feat_dim(), 16, 16], 0.0, &mut r).unwrap();
    let prop = Propagation::new(&g);
    let x = Features::from_tensor(g.features());
    let h0 = enc.embed(&prop, &x, false).unwrap();
    for norm in [LossNorm::Squared, LossNorm::MeanSquared, LossNorm::Plain] {
        let mut set = CodebookSet::new(&[16, 16], 2, 4, Metric::L2, 1.0, &mut r).unwrap();
        set.loss_norm = norm;
        for (l, h) in h0.iter().enumerate() {
            let flat: Vec<f64> = h.data().iter().map(|&v| v as f64).collect();
            set.get_mut(l, 0).kmeans_init(&flat, 20, &mut r).unwrap();
        }
        let codes: Vec<Vec<Vec<usize>>> = h0
            .iter()
            .enumerate()
            .map(|(l, h)| (0..h.rows()).map(|i| set.rvq_quantize(l, h.row(i)).unwrap().codewords).collect())
            .collect();
        // Σ over layers, nodes, levels of ‖residual‖ with the codes fixed.
        let distance = |emb: &[Tensor]| -> f64 {
            let mut total = 0.0;
            for (l, h) in emb.iter().enumerate() {
                for i in 0..h.rows() {
                    let mut res: Vec<f64> = h.row(i).iter().map(|&v| v as f64).collect();
                    for (m, &c) in codes[l][i].iter().enumerate() {
                        res.iter_mut().zip(set.get(l, m).code(c)).for_each(|(a, &b)| *a -= b as f64);
                        total += res.iter().map(|a| a * a).sum::<f64>().sqrt();
                    }
                }
            }
            total
        };

        let mut step = enc.clone();
        let mut tape = Tape::new();
        let vars = nn::bind(&mut tape, &step);
        let outs = step.encode_layers(&mut tape, &vars, &prop, &x, None, false, &mut r).unwrap();
        let mut total = None;
        for (l, o) in outs.iter().enumerate() {
            let h = tape.value(o.post).clone();
            let mut grad = Tensor::zeros(h.rows(), h.cols());
            let mut loss = 0.0;
            for i in 0..h.rows() {
                let vl = set.vq_loss(&set.rvq_quantize(l, h.row(i)).unwrap(), VqMode::Ema);
                loss += vl.loss;
                grad.row_mut(i).iter_mut().zip(&vl.grad).for_each(|(o, &gv)| *o = gv as f32);
            }
            let node = tape.external_loss(o.post, loss as f32, grad).unwrap();
            total = Some(match total {
                Some(t) => tape.add(t, node).unwrap(),
                None => node,
            });
        }
        tape.backward(total.unwrap()).unwrap();
        let grads: Vec<Tensor> = nn::grads(&tape, &vars).into_iter().map(|g| g.unwrap().clone()).collect();
        for (p, gr) in step.params_mut().into_iter().zip(&grads) {
            p.data_mut().iter_mut().zip(gr.data()).for_each(|(w, &gv)| *w -= 1e-4 * gv);
        }
        let before = distance(&h0);
        let after = distance(&step.embed(&prop, &x, false).unwrap());
        assert!(after < before, "{norm:?}: {before} -> {after}");
    }
}

#[test]
fn model_head_and_ids_round_trip() {
    let g = two_block(12);
    let splits = split_nodes(&g, (0.6, 0.2, 0.2), 12).unwrap();
    let t = train_supervised_node(&g, &splits, &node_cfg(12)).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mp = dir.path().join("m.nidm");
    io::save_model(&t.model, "seed=12\n", &mp).unwrap();
    let (back, manifest): (NidModel, String) = io::load_model(&mp).unwrap();
    assert_eq!(manifest, "seed=12\n");
    assert_eq!(back.config, t.model.config);
    assert_eq!(evaluate_node(&back, &g, &splits).unwrap(), evaluate_node(&t.model, &g, &splits).unwrap());
    let ids = generate_ids(&t.model, &g).unwrap();
    assert_eq!(generate_ids(&back, &g).unwrap(), ids);

    let ip = dir.path().join("ids.nid1");
    io::save_ids(&ids, &ip).unwrap();
    assert_eq!(io::load_ids(&ip).unwrap(), ids);
    let on_disk = std::fs::metadata(&ip).unwrap().len();
    assert_eq!(on_disk, io::id_file_len(ids.num_nodes, ids.width(), ids.k));

    let labels = g.labels().unwrap().to_vec();
    let head = train_node_head(&ids, &labels, &splits, &HeadConfig { epochs: 30, seed: 12, ..HeadConfig::default() }).unwrap();
    let hp = dir.path().join("h.nidh");
    io::save_head(&head.head, "task=node", &hp).unwrap();
    let (hb, meta): (MlpHead, String) = io::load_head(&hp).unwrap();
    assert_eq!(meta, "task=node");
    let nodes: Vec<usize> = (0..g.num_nodes()).collect();
    assert_eq!(hb.predict(&ids, &nodes).unwrap(), head.head.predict(&ids, &nodes).unwrap());
}

#[test]
fn label_consistent_ids_are_fit_exactly() {
    // No two nodes of different classes share an ID, so a head on one-hot
    // IDs can reproduce every label.
    let n = 60;
    let codes: Vec<u8> = (0..n).flat_map(|v| [(v % 5) as u8, (v / 5 % 4) as u8, (v % 3) as u8]).collect();
    let tbl = nid_core::downstream::NodeIdTable::new(1, 3, 5, codes).unwrap();
    let labels: Vec<i32> = (0..n).map(|v| ((v * 7 + 3) % 4) as i32).collect();
    for a in 0..n {
        for b in 0..n {
            assert!(tbl.id(a) != tbl.id(b) || labels[a] == labels[b] || a == b);
        }
    }
    let splits = SplitMasks {
        train: vec![true; n],
        valid: vec![true; n],
        test: vec![true; n],
        seed: 0,
    };
    let cfg = HeadConfig {
        hidden: vec![256],
        dropout: 0.0,
        epochs: 2000,
        patience: 2000,
        seed: 13,
        ..HeadConfig::default()
    };
    let res = train_node_head(&tbl, &labels, &splits, &cfg).unwrap();
    assert_eq!(res.test, 1.0);
}
