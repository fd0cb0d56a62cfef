//! Joint training of the encoder and its codebooks, and ID generation.
//!
//! Every objective shares one epoch skeleton: a full-batch forward through
//! all encoder layers, the task loss on top of the last layer, then residual
//! quantization of every selected node at every layer. The quantization loss
//! enters the tape as an external scalar whose gradient was computed in f64
//! by [`CodebookSet::vq_loss`], so the encoder sees the commitment gradient
//! and nothing else from the codebooks.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;

use crate::autodiff::{AdamState, CosineForm, Pool, Tape, Tensor, Var};
use crate::downstream::NodeIdTable;
use crate::error::{Error, Result};
use crate::graph::{self, EdgeSplit, Graph, SplitMasks};
use crate::metrics;
use crate::mpnn::{Decoder, DecoderKind, EncoderKind, EncoderStack, Features, InputMask, Propagation};
use crate::nn::{self, Mlp, Parameters};
use crate::rng::{self, NidRng, Stream};
use crate::vq::{CodebookSet, LossNorm, Metric, VqMode, DEAD_CODE_THRESHOLD};

/// Codebook sizes searched by default.
pub const K_GRID: [usize; 5] = [4, 6, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    SupervisedNode,
    SupervisedLink,
    SupervisedGraph,
    Mae,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SupervisedNode => "supervised-node",
            Self::SupervisedLink => "supervised-link",
            Self::SupervisedGraph => "supervised-graph",
            Self::Mae => "mae",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised-node" => Ok(Self::SupervisedNode),
            "supervised-link" => Ok(Self::SupervisedLink),
            "supervised-graph" => Ok(Self::SupervisedGraph),
            "mae" => Ok(Self::Mae),
            other => Err(Error::Config(format!(
                "unknown objective '{other}' (supervised-node|supervised-link|supervised-graph|mae)"
            ))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub encoder: EncoderKind,
    /// Encoder depth `L`.
    pub layers: usize,
    pub hidden: usize,
    /// RVQ depth `M`; 0 turns quantization off entirely.
    pub levels: usize,
    /// Codebook size `K`.
    pub k: usize,
    /// Commitment weight.
    pub beta: f32,
    pub metric: Metric,
    pub vq_mode: VqMode,
    pub loss_norm: LossNorm,
    pub ema_decay: f32,
    pub quantize_preactivation: bool,
    /// Restrict the quantization loss to training nodes (node objective).
    pub vq_train_nodes_only: bool,
    /// Quantization-free epochs before the codebooks are seeded by k-means.
    pub warmup_epochs: usize,
    pub kmeans_iters: usize,
    pub dead_code_reset: bool,
    pub reset_every: usize,
    pub mask_rate: f32,
    pub gamma: f32,
    pub cosine_form: CosineForm,
    pub decoder: DecoderKind,
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub dropout: f32,
    pub seed: u64,
    /// Hidden width of the link/graph task MLP.
    pub head_hidden: usize,
    pub pool: Pool,
    pub hits_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::SupervisedNode,
            encoder: EncoderKind::Gcn,
            layers: 2,
            hidden: 128,
            levels: 3,
            k: 6,
            beta: 1.0,
            metric: Metric::Cosine,
            vq_mode: VqMode::Ema,
            loss_norm: LossNorm::MeanSquared,
            ema_decay: crate::vq::EMA_DECAY,
            quantize_preactivation: false,
            vq_train_nodes_only: false,
            warmup_epochs: 10,
            kmeans_iters: 50,
            dead_code_reset: false,
            reset_every: 50,
            mask_rate: 0.5,
            gamma: 2.0,
            cosine_form: CosineForm::Power,
            decoder: DecoderKind::Gcn,
            lr: 1e-2,
            weight_decay: 5e-4,
            epochs: 200,
            dropout: 0.5,
            seed: 0,
            head_hidden: 64,
            pool: Pool::Mean,
            hits_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("L must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        if !(2..=255).contains(&self.k) {
            return bad(format!("K = {} outside [2, 255]", self.k));
        }
        if !K_GRID.contains(&self.k) {
            log::info!("K = {} is outside the default grid {K_GRID:?}", self.k);
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta {} must be >= 0", self.beta));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema decay {} outside (0, 1)", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.objective == Objective::Mae && !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask rate {} outside (0, 1)", self.mask_rate));
        }
        if !(self.gamma >= 1.0) {
            return bad(format!("gamma {} must be >= 1", self.gamma));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.dead_code_reset && self.reset_every == 0 {
            return bad("reset interval must be positive".into());
        }
        Ok(())
    }

    fn vq_enabled(&self) -> bool {
        self.levels > 0
    }

    /// Every field as a `key=value` pair, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("objective", self.objective.as_str().into()),
            ("encoder", self.encoder.as_str().into()),
            ("L", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("M", self.levels.to_string()),
            ("K", self.k.to_string()),
            ("beta", self.beta.to_string()),
            ("metric", self.metric.as_str().into()),
            ("vq_mode", self.vq_mode.as_str().into()),
            ("loss_norm", self.loss_norm.as_str().into()),
            ("ema_decay", self.ema_decay.to_string()),
            ("quantize_preactivation", self.quantize_preactivation.to_string()),
            ("vq_train_nodes_only", self.vq_train_nodes_only.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("dead_code_reset", self.dead_code_reset.to_string()),
            ("reset_every", self.reset_every.to_string()),
            ("mask_rate", self.mask_rate.to_string()),
            ("gamma", self.gamma.to_string()),
            ("cosine_form", self.cosine_form.as_str().into()),
            ("decoder", self.decoder.as_str().into()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("pool", self.pool.as_str().into()),
            ("hits_k", self.hits_k.to_string()),
        ]
    }

    /// Sets one field from its text form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "objective" => self.objective = value.parse()?,
            "encoder" => self.encoder = value.parse()?,
            "L" => self.layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "M" => self.levels = num(key, value)?,
            "K" => self.k = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "metric" => self.metric = value.parse()?,
            "vq_mode" => self.vq_mode = value.parse()?,
            "loss_norm" => self.loss_norm = value.parse()?,
            "ema_decay" => self.ema_decay = num(key, value)?,
            "quantize_preactivation" => self.quantize_preactivation = num(key, value)?,
            "vq_train_nodes_only" => self.vq_train_nodes_only = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "kmeans_iters" => self.kmeans_iters = num(key, value)?,
            "dead_code_reset" => self.dead_code_reset = num(key, value)?,
            "reset_every" => self.reset_every = num(key, value)?,
            "mask_rate" => self.mask_rate = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "cosine_form" => self.cosine_form = value.parse()?,
            "decoder" => self.decoder = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "pool" => self.pool = value.parse()?,
            "hits_k" => self.hits_k = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Newline-separated `key=value` echo of every field.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Inverse of [`TrainConfig::to_text`]; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("unknown key '{}'", k.trim())));
            }
        }
        Ok(cfg)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_vq: f64,
    /// Always `loss_g + loss_vq`.
    pub loss_nid: f64,
    /// Mean codebook usage this epoch (0 while quantization is off).
    pub usage: f64,
    /// Validation score: accuracy, Hits@k, or reconstruction loss (mae).
    pub val: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<EpochLog>,
    pub best_epoch: usize,
    pub val_metric: &'static str,
}

/// Everything produced by a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct NidModel {
    pub config: TrainConfig,
    pub encoder: EncoderStack,
    pub codebooks: Option<CodebookSet>,
    /// Task head on the last layer (absent for mae).
    pub head: Option<Mlp>,
    pub decoder: Option<Decoder>,
    pub mask_token: Option<Tensor>,
}

impl NidModel {
    pub(crate) fn new(cfg: &TrainConfig, d_in: usize, head_dims: Option<Vec<usize>>) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng::stream(cfg.seed, Stream::Init);
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers));
        let encoder = EncoderStack::new(cfg.encoder, &dims, cfg.dropout, &mut init)?;
        let head = head_dims.map(|d| Mlp::new(&d, cfg.dropout, &mut init));
        let (decoder, mask_token) = if cfg.objective == Objective::Mae {
            (
                Some(Decoder::new(cfg.decoder, cfg.hidden, d_in, &mut init)),
                Some(Tensor::zeros(1, d_in)),
            )
        } else {
            (None, None)
        };
        let codebooks = if cfg.vq_enabled() {
            let mut cb_rng = rng::stream(cfg.seed, Stream::Codebook);
            let mut set = CodebookSet::new(
                &vec![cfg.hidden; cfg.layers],
                cfg.levels,
                cfg.k,
                cfg.metric,
                cfg.beta,
                &mut cb_rng,
            )?;
            set.loss_norm = cfg.loss_norm;
            Some(set)
        } else {
            None
        };
        Ok(Self {
            config: cfg.clone(),
            encoder,
            codebooks,
            head,
            decoder,
            mask_token,
        })
    }

    pub(crate) fn trainable(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        if let Some(h) = &self.head {
            p.extend(h.params());
        }
        if let Some(d) = &self.decoder {
            p.extend(d.params());
        }
        if let Some(t) = &self.mask_token {
            p.push(t);
        }
        p
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        if let Some(h) = &mut self.head {
            p.extend(h.params_mut());
        }
        if let Some(d) = &mut self.decoder {
            p.extend(d.params_mut());
        }
        if let Some(t) = &mut self.mask_token {
            p.push(t);
        }
        p
    }

    /// Per-layer embeddings that get quantized, in inference mode.
    pub fn embed(&self, prop: &Propagation, x: &Features) -> Result<Vec<Tensor>> {
        self.encoder.embed(prop, x, self.config.quantize_preactivation)
    }

    /// Logits of the node head in inference mode.
    pub fn node_logits(&self, g: &Graph) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no node head".into()))?;
        let prop = Propagation::new(g);
        let x = Features::from_tensor(g.features());
        let h = self.encoder.embed(&prop, &x, false)?;
        head.apply(h.last().expect("L >= 1"))
    }
}

/// Bound variables for one step, split by owner.
struct Bound {
    all: Vec<Var>,
    enc: usize,
    head: usize,
    dec: usize,
}

impl Bound {
    fn new(tape: &mut Tape, model: &NidModel) -> Self {
        let all: Vec<Var> = model.trainable().into_iter().map(|p| tape.leaf(p.clone())).collect();
        Self {
            all,
            enc: model.encoder.params().len(),
            head: model.head.as_ref().map_or(0, |h| h.params().len()),
            dec: model.decoder.as_ref().map_or(0, |d| d.params().len()),
        }
    }

    fn encoder(&self) -> &[Var] {
        &self.all[..self.enc]
    }

    fn head(&self) -> &[Var] {
        &self.all[self.enc..self.enc + self.head]
    }

    fn decoder(&self) -> &[Var] {
        &self.all[self.enc + self.head..self.enc + self.head + self.dec]
    }

    fn token(&self) -> Option<Var> {
        let i = self.enc + self.head + self.dec;
        self.all.get(i).copied()
    }
}

/// Mutable state of one training run.
struct Session {
    model: NidModel,
    opt: AdamState,
    code_opt: AdamState,
    drop_rng: NidRng,
    code_rng: NidRng,
    reset_rng: NidRng,
    vq_live: bool,
}

impl Session {
    fn new(model: NidModel) -> Self {
        let cfg = &model.config;
        let seed = cfg.seed;
        Self {
            opt: AdamState::new(cfg.lr).with_weight_decay(cfg.weight_decay),
            code_opt: AdamState::new(cfg.lr),
            drop_rng: rng::stream(seed, Stream::Dropout),
            code_rng: rng::stream(seed, Stream::Codebook),
            reset_rng: rng::stream(seed, Stream::Reset),
            vq_live: false,
            model,
        }
    }

    fn cfg(&self) -> &TrainConfig {
        &self.model.config
    }

    /// Seeds the codebooks level by level with k-means on the residuals of
    /// the current inference embeddings.
    fn seed_codebooks(&mut self, embeddings: &[Tensor], rows: &[usize]) -> Result<()> {
        let iters = self.cfg().kmeans_iters;
        let Some(set) = self.model.codebooks.as_mut() else {
            return Ok(());
        };
        for (l, h) in embeddings.iter().enumerate() {
            let d = h.cols();
            let mut resid: Vec<f64> = Vec::with_capacity(rows.len() * d);
            for &i in rows {
                resid.extend(h.row(i).iter().map(|&x| x as f64));
            }
            for m in 0..set.levels {
                let cb = set.get_mut(l, m);
                let padded = cb.kmeans_init(&resid, iters, &mut self.code_rng)?;
                if padded > 0 {
                    log::warn!("codebook ({l},{m}): padded {padded} codes during k-means seeding");
                }
                for r in resid.chunks_exact_mut(d) {
                    let c = cb.nearest_code(r)?;
                    for (x, &e) in r.iter_mut().zip(cb.code(c)) {
                        *x -= e as f64;
                    }
                }
            }
        }
        self.vq_live = true;
        Ok(())
    }

    /// Adds the quantization terms for `rows` of every layer to the tape and
    /// updates the codebooks. Returns the summed loss node and its value.
    fn vq_terms(
        &mut self,
        tape: &mut Tape,
        layer_vars: &[Var],
        rows: &[usize],
        reset_now: bool,
    ) -> Result<Option<(Var, f64)>> {
        if !self.vq_live || rows.is_empty() {
            return Ok(None);
        }
        let cfg = self.model.config.clone();
        let set = self.model.codebooks.as_mut().expect("live quantization has codebooks");
        let norm = rows.len() as f64;
        let mut total: Option<Var> = None;
        let mut value = 0.0;
        let mut code_grads: Vec<Tensor> = Vec::new();
        for (l, &hv) in layer_vars.iter().enumerate() {
            let h = tape.value(hv).clone();
            let mut grad = Tensor::zeros(h.rows(), h.cols());
            let mut layer_loss = 0.0;
            let mut assigned: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::with_capacity(rows.len()); set.levels];
            let mut cgrads: Vec<Vec<f64>> = (0..set.levels).map(|_| vec![0.0; set.k() * h.cols()]).collect();
            for &i in rows {
                let q = set.rvq_quantize(l, h.row(i))?;
                let vl = set.vq_loss(&q, cfg.vq_mode);
                layer_loss += vl.loss;
                for (o, g) in grad.row_mut(i).iter_mut().zip(&vl.grad) {
                    *o = (g / norm) as f32;
                }
                for (m, c, g) in vl.code_grads {
                    let dst = &mut cgrads[m][c * h.cols()..(c + 1) * h.cols()];
                    dst.iter_mut().zip(&g).for_each(|(o, x)| *o += x / norm);
                }
                for (m, (&c, r)) in q.codewords.iter().zip(q.residuals).enumerate() {
                    set.get_mut(l, m).usage[c] += 1;
                    assigned[m].push((c, r));
                }
            }
            let layer_loss = layer_loss / norm;
            value += layer_loss;
            let node = tape.external_loss(hv, layer_loss as f32, grad)?;
            total = Some(match total {
                Some(t) => tape.add(t, node)?,
                None => node,
            });
            for (m, list) in assigned.iter().enumerate() {
                let cb = set.get_mut(l, m);
                match cfg.vq_mode {
                    VqMode::Ema => {
                        let pairs: Vec<(usize, &[f64])> =
                            list.iter().map(|(c, r)| (*c, r.as_slice())).collect();
                        cb.ema_update(&pairs, cfg.ema_decay)?;
                    }
                    VqMode::CodebookLoss => {
                        code_grads.push(Tensor::from_vec(
                            cb.k(),
                            cb.dim(),
                            cgrads[m].iter().map(|&x| x as f32).collect(),
                        )?);
                    }
                }
                if reset_now {
                    let donors: Vec<f64> = list.iter().flat_map(|(_, r)| r.iter().copied()).collect();
                    cb.reset_dead_codes(&donors, DEAD_CODE_THRESHOLD, &mut self.reset_rng)?;
                }
            }
        }
        if cfg.vq_mode == VqMode::CodebookLoss {
            let refs: Vec<Option<&Tensor>> = code_grads.iter().map(Some).collect();
            let mut params: Vec<&mut Tensor> = set.codebooks.iter_mut().map(|c| &mut c.vectors).collect();
            self.code_opt.step(&mut params, &refs)?;
            if cfg.metric == Metric::Cosine {
                for cb in &mut set.codebooks {
                    for k in 0..cb.k() {
                        let row = cb.vectors.row_mut(k);
                        let n = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                        if n > 0.0 {
                            row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
                        }
                    }
                }
            }
        }
        Ok(total.map(|t| (t, value)))
    }

    fn step(&mut self, tape: &mut Tape, loss: Var, bound: &Bound, epoch: usize) -> Result<()> {
        if !tape.value(loss).is_finite() {
            return Err(Error::Diverged { epoch });
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = nn::grads(tape, &bound.all).into_iter().map(|g| g.cloned()).collect();
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
        self.opt.step(&mut self.model.trainable_mut(), &refs)
    }

    /// Shared epoch prologue: seeds codebooks once the warm-up ends and
    /// clears usage counters.
    fn begin_epoch(&mut self, epoch: usize, prop: &Propagation, x: &Features, rows: &[usize]) -> Result<()> {
        if self.model.codebooks.is_none() {
            return Ok(());
        }
        if !self.vq_live && epoch >= self.cfg().warmup_epochs {
            let emb = self.model.embed(prop, x)?;
            self.seed_codebooks(&emb, rows)?;
        }
        if let Some(set) = self.model.codebooks.as_mut() {
            set.reset_usage();
        }
        Ok(())
    }

    fn reset_due(&self, epoch: usize) -> bool {
        let c = self.cfg();
        self.vq_live && c.dead_code_reset && epoch > 0 && epoch % c.reset_every == 0
    }

    fn usage(&self) -> f64 {
        match (&self.model.codebooks, self.vq_live) {
            (Some(set), true) => set.usage_rate().1,
            _ => 0.0,
        }
    }

    fn quantized<'a>(&self, outs: &'a [crate::mpnn::LayerOutput]) -> Vec<Var> {
        outs.iter()
            .map(|o| if self.cfg().quantize_preactivation { o.pre } else { o.post })
            .collect()
    }
}

/// Tracks the best validation epoch and keeps a copy of the model there.
struct Checkpoint {
    /// (score, epoch, eligible, model)
    best: Option<(f64, usize, bool, NidModel)>,
    higher_is_better: bool,
}

impl Checkpoint {
    fn new(higher_is_better: bool) -> Self {
        Self {
            best: None,
            higher_is_better,
        }
    }

    /// Warm-up epochs (codebooks not yet seeded) only count while no later
    /// epoch does, so the kept codebooks are always trained ones.
    fn observe(&mut self, val: f64, epoch: usize, eligible: bool, model: &NidModel) {
        let replace = match &self.best {
            None => true,
            Some((_, _, false, _)) if eligible => true,
            Some((_, _, true, _)) if !eligible => false,
            Some((b, ..)) => {
                if self.higher_is_better {
                    val > *b
                } else {
                    val < *b
                }
            }
        };
        if replace {
            self.best = Some((val, epoch, eligible, model.clone()));
        }
    }

    fn finish(self, log: &mut TrainLog) -> NidModel {
        let (_, epoch, _, model) = self.best.expect("at least one epoch");
        log.best_epoch = epoch;
        model
    }
}

fn finish_epoch(
    log: &mut TrainLog,
    epoch: usize,
    loss_g: f64,
    loss_vq: f64,
    usage: f64,
    val: f64,
) {
    log.entries.push(EpochLog {
        epoch,
        loss_g,
        loss_vq,
        loss_nid: loss_g + loss_vq,
        usage,
        val,
    });
}

fn total_loss(tape: &mut Tape, task: Var, vq: Option<(Var, f64)>) -> Result<(Var, f64)> {
    match vq {
        Some((v, value)) => Ok((tape.add(task, v)?, value)),
        None => Ok((task, 0.0)),
    }
}

/// Output of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: NidModel,
    pub log: TrainLog,
}

fn node_targets(g: &Graph) -> Result<(Vec<usize>, usize)> {
    let labels = g.labels().ok_or(Error::Empty("node labels"))?;
    let classes = g
        .num_classes()
        .unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0).max(0) as usize + 1);
    Ok((labels.iter().map(|&y| y.max(0) as usize).collect(), classes))
}

fn labeled_mask(g: &Graph, m: &[bool]) -> Vec<bool> {
    let labels = g.labels().expect("checked by caller");
    m.iter().zip(labels).map(|(&b, &y)| b && y >= 0).collect()
}

/// Supervised node classification with a linear head on the last layer.
pub fn train_supervised_node(g: &Graph, splits: &SplitMasks, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.objective != Objective::SupervisedNode {
        return Err(Error::Config(format!(
            "objective {} does not match the node trainer",
            cfg.objective
        )));
    }
    let (targets, classes) = node_targets(g)?;
    let n = g.num_nodes();
    if splits.train.len() != n {
        return Err(Error::ShapeMismatch {
            op: "split masks",
            left: (n, 1),
            right: (splits.train.len(), 1),
        });
    }
    let train = labeled_mask(g, &splits.train);
    let valid = labeled_mask(g, &splits.valid);
    let model = NidModel::new(cfg, g.feat_dim(), Some(vec![cfg.hidden, classes]))?;
    let mut s = Session::new(model);
    let prop = Propagation::new(g);
    let x = Features::from_tensor(g.features());
    let vq_rows: Vec<usize> = if cfg.vq_train_nodes_only {
        (0..n).filter(|&i| train[i]).collect()
    } else {
        (0..n).collect()
    };
    let mut log = TrainLog {
        val_metric: "accuracy",
        ..TrainLog::default()
    };
    let mut ckpt = Checkpoint::new(true);
    for epoch in 0..cfg.epochs {
        s.begin_epoch(epoch, &prop, &x, &vq_rows)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &s.model);
        let outs = s.model.encoder.encode_layers(
            &mut tape,
            bound.encoder(),
            &prop,
            &x,
            None,
            true,
            &mut s.drop_rng,
        )?;
        let last = outs.last().expect("L >= 1").post;
        let hin = tape.dropout(last, cfg.dropout, true, &mut s.drop_rng)?;
        let head = s.model.head.as_ref().expect("node head");
        let logits = head.forward(&mut tape, bound.head(), hin, true, &mut s.drop_rng)?;
        let task = tape.softmax_cross_entropy(logits, &targets, &train)?;
        let loss_g = tape.value(task).item() as f64;
        let qv = s.quantized(&outs);
        let reset = s.reset_due(epoch);
        let vq = s.vq_terms(&mut tape, &qv, &vq_rows, reset)?;
        let (loss, loss_vq) = total_loss(&mut tape, task, vq)?;
        s.step(&mut tape, loss, &bound, epoch)?;

        let logits = s.model.node_logits(g)?;
        let pred = argmax(&logits);
        let val = metrics::accuracy(&pred, &targets, &valid);
        finish_epoch(&mut log, epoch, loss_g, loss_vq, s.usage(), val);
        ckpt.observe(val, epoch, s.vq_live || s.model.codebooks.is_none(), &s.model);
    }
    let model = ckpt.finish(&mut log);
    Ok(Trained { model, log })
}

fn argmax(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut b = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[b] {
                    b = j;
                }
            }
            b
        })
        .collect()
}

/// Validation and test accuracy of the node head in inference mode.
pub fn evaluate_node(model: &NidModel, g: &Graph, splits: &SplitMasks) -> Result<(f64, f64)> {
    let (targets, _) = node_targets(g)?;
    let pred = argmax(&model.node_logits(g)?);
    Ok((
        metrics::accuracy(&pred, &targets, &labeled_mask(g, &splits.valid)),
        metrics::accuracy(&pred, &targets, &labeled_mask(g, &splits.test)),
    ))
}

/// Masked feature reconstruction. Each epoch masks a fresh node subset,
/// replaces those input rows by a learned token, and reconstructs them.
pub fn train_mae(g: &Graph, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.objective != Objective::Mae {
        return Err(Error::Config(format!(
            "objective {} does not match the mae trainer",
            cfg.objective
        )));
    }
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::Empty("graph with no nodes"));
    }
    let model = NidModel::new(cfg, g.feat_dim(), None)?;
    let mut s = Session::new(model);
    let prop = Propagation::new(g);
    let x = Features::from_tensor(g.features());
    let target = g.features().clone();
    let count = ((cfg.mask_rate as f64 * n as f64).round() as usize).clamp(1, n);
    let mut mask_rng = rng::stream(cfg.seed, Stream::Mask);
    // A fixed held-out mask scores every epoch on equal terms.
    let val_rows = sample_mask(&mut rng::stream(cfg.seed ^ 0x5eed, Stream::Mask), n, count);
    let all: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        val_metric: "reconstruction",
        ..TrainLog::default()
    };
    let mut ckpt = Checkpoint::new(false);
    for epoch in 0..cfg.epochs {
        s.begin_epoch(epoch, &prop, &x, &all)?;
        let rows = sample_mask(&mut mask_rng, n, count);
        let mut flags = vec![false; n];
        rows.iter().for_each(|&i| flags[i] = true);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &s.model);
        let token = bound.token().expect("mae has a mask token");
        let outs = s.model.encoder.encode_layers(
            &mut tape,
            bound.encoder(),
            &prop,
            &x,
            Some(InputMask { rows: &rows, token }),
            true,
            &mut s.drop_rng,
        )?;
        let last = outs.last().expect("L >= 1").post;
        let dec = s.model.decoder.as_ref().expect("mae decoder");
        let z = dec.forward(&mut tape, bound.decoder(), &prop, last)?;
        let xt = tape.constant(target.clone());
        let task = tape.scaled_cosine_error(z, xt, cfg.gamma, cfg.cosine_form, &flags)?;
        let loss_g = tape.value(task).item() as f64;
        let qv = s.quantized(&outs);
        let reset = s.reset_due(epoch);
        let vq = s.vq_terms(&mut tape, &qv, &rows, reset)?;
        let (loss, loss_vq) = total_loss(&mut tape, task, vq)?;
        s.step(&mut tape, loss, &bound, epoch)?;

        let val = reconstruction_loss(&s.model, &prop, &x, &target, &val_rows)?;
        finish_epoch(&mut log, epoch, loss_g, loss_vq, s.usage(), val);
        ckpt.observe(val, epoch, s.vq_live || s.model.codebooks.is_none(), &s.model);
    }
    let model = ckpt.finish(&mut log);
    Ok(Trained { model, log })
}

fn sample_mask(rng: &mut NidRng, n: usize, count: usize) -> Vec<usize> {
    let mut rows = index::sample(rng, n, count).into_vec();
    rows.sort_unstable();
    rows
}

/// Scaled cosine error of reconstructing `rows` in inference mode.
pub fn reconstruction_loss(
    model: &NidModel,
    prop: &Propagation,
    x: &Features,
    target: &Tensor,
    rows: &[usize],
) -> Result<f64> {
    let (Some(dec), Some(tok)) = (&model.decoder, &model.mask_token) else {
        return Err(Error::Config("model has no decoder".into()));
    };
    let cfg = &model.config;
    let mut tape = Tape::new();
    let enc = nn::bind_frozen(&mut tape, &model.encoder);
    let dv = nn::bind_frozen(&mut tape, dec);
    let token = tape.constant(tok.clone());
    let mut rng = rng::stream(0, Stream::Dropout);
    let outs = model.encoder.encode_layers(
        &mut tape,
        &enc,
        prop,
        x,
        Some(InputMask { rows, token }),
        false,
        &mut rng,
    )?;
    let z = dec.forward(&mut tape, &dv, prop, outs.last().expect("L >= 1").post)?;
    let xt = tape.constant(target.clone());
    let mut flags = vec![false; target.rows()];
    rows.iter().for_each(|&i| flags[i] = true);
    let l = tape.scaled_cosine_error(z, xt, cfg.gamma, cfg.cosine_form, &flags)?;
    Ok(tape.value(l).item() as f64)
}

/// Link prediction with an MLP on `h_u ⊙ h_v`. Message passing uses only the
/// training edges; one negative per positive is drawn fresh each epoch.
pub fn train_supervised_link(g: &Graph, edges: &EdgeSplit, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.objective != Objective::SupervisedLink {
        return Err(Error::Config(format!(
            "objective {} does not match the link trainer",
            cfg.objective
        )));
    }
    if edges.train_pos.is_empty() {
        return Err(Error::Empty("training edges"));
    }
    let tg = edges.train_graph(g)?;
    let n = tg.num_nodes();
    let model = NidModel::new(cfg, g.feat_dim(), Some(vec![cfg.hidden, cfg.head_hidden, 1]))?;
    let mut s = Session::new(model);
    let prop = Propagation::new(&tg);
    let x = Features::from_tensor(tg.features());
    let mut neg_rng = rng::stream(cfg.seed, Stream::Negatives);
    let npos = edges.train_pos.len();
    let mut labels = vec![1.0f32; npos];
    labels.resize(2 * npos, 0.0);
    let all: Vec<usize> = (0..n).collect();
    let empty = Default::default();
    let mut log = TrainLog {
        val_metric: "hits",
        ..TrainLog::default()
    };
    let mut ckpt = Checkpoint::new(true);
    for epoch in 0..cfg.epochs {
        s.begin_epoch(epoch, &prop, &x, &all)?;
        let mut pairs = edges.train_pos.clone();
        for _ in 0..npos {
            let e = graph::sample_non_edge(&tg, &empty, &mut neg_rng, 1000 + 100 * n)
                .ok_or_else(|| Error::Sampling("no non-edge available".into()))?;
            pairs.push(e);
        }
        let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &s.model);
        let outs = s.model.encoder.encode_layers(
            &mut tape,
            bound.encoder(),
            &prop,
            &x,
            None,
            true,
            &mut s.drop_rng,
        )?;
        let last = outs.last().expect("L >= 1").post;
        let hu = tape.gather_rows(last, &us)?;
        let hv = tape.gather_rows(last, &vs)?;
        let feat = tape.hadamard(hu, hv)?;
        let head = s.model.head.as_ref().expect("link head");
        let logits = head.forward(&mut tape, bound.head(), feat, true, &mut s.drop_rng)?;
        let task = tape.bce_with_logits(logits, &labels)?;
        let loss_g = tape.value(task).item() as f64;
        let qv = s.quantized(&outs);
        let reset = s.reset_due(epoch);
        let vq = s.vq_terms(&mut tape, &qv, &all, reset)?;
        let (loss, loss_vq) = total_loss(&mut tape, task, vq)?;
        s.step(&mut tape, loss, &bound, epoch)?;

        let val = link_hits(&s.model, &prop, &x, &edges.valid_pos, &edges.valid_neg, cfg.hits_k)?;
        finish_epoch(&mut log, epoch, loss_g, loss_vq, s.usage(), val);
        ckpt.observe(val, epoch, s.vq_live || s.model.codebooks.is_none(), &s.model);
    }
    let model = ckpt.finish(&mut log);
    Ok(Trained { model, log })
}

/// Hits@k of the link head on `pos` against `neg`, inference mode.
pub fn link_hits(
    model: &NidModel,
    prop: &Propagation,
    x: &Features,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    k: usize,
) -> Result<f64> {
    let head = model.head.as_ref().ok_or_else(|| Error::Config("model has no link head".into()))?;
    let h = model.encoder.embed(prop, x, false)?;
    let h = h.last().expect("L >= 1");
    let score = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
        let mut f = Tensor::zeros(pairs.len(), h.cols());
        for (r, &(u, v)) in pairs.iter().enumerate() {
            for (o, (a, b)) in f.row_mut(r).iter_mut().zip(h.row(u).iter().zip(h.row(v))) {
                *o = a * b;
            }
        }
        Ok(head.apply(&f)?.data().iter().map(|&s| s as f64).collect())
    };
    Ok(metrics::hits_at_k(&score(pos)?, &score(neg)?, k))
}

/// Disjoint union of `graphs` with node offsets, plus the segment of every node.
pub fn batch_graphs(graphs: &[Graph]) -> Result<(Graph, Vec<usize>)> {
    let first = graphs.first().ok_or(Error::Empty("graph list"))?;
    let d = first.feat_dim();
    let total: usize = graphs.iter().map(Graph::num_nodes).sum();
    let mut feats = Vec::with_capacity(total * d);
    let mut edges = Vec::new();
    let mut segments = Vec::with_capacity(total);
    let mut off = 0;
    for (i, gr) in graphs.iter().enumerate() {
        if gr.num_nodes() == 0 {
            return Err(Error::Empty("graph with no nodes"));
        }
        if gr.feat_dim() != d {
            return Err(Error::FeatureDim {
                line: i,
                expected: d,
                found: gr.feat_dim(),
            });
        }
        feats.extend_from_slice(gr.features().data());
        edges.extend(gr.edges().into_iter().map(|(u, v)| (u + off, v + off)));
        segments.extend(std::iter::repeat_n(i, gr.num_nodes()));
        off += gr.num_nodes();
    }
    let g = Graph::from_edges(total, &edges, Tensor::from_vec(total, d, feats)?, None, None)?;
    Ok((g, segments))
}

/// Graph classification: pooled last-layer embeddings feed an MLP. All
/// graphs form one block-diagonal batch.
pub fn train_supervised_graph(
    graphs: &[Graph],
    labels: &[usize],
    train: &[bool],
    valid: &[bool],
    cfg: &TrainConfig,
) -> Result<Trained> {
    if cfg.objective != Objective::SupervisedGraph {
        return Err(Error::Config(format!(
            "objective {} does not match the graph trainer",
            cfg.objective
        )));
    }
    let ng = graphs.len();
    if labels.len() != ng || train.len() != ng || valid.len() != ng {
        return Err(Error::ShapeMismatch {
            op: "graph labels",
            left: (ng, 1),
            right: (labels.len(), train.len()),
        });
    }
    let (batch, segments) = batch_graphs(graphs)?;
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let model = NidModel::new(cfg, batch.feat_dim(), Some(vec![cfg.hidden, cfg.head_hidden, classes]))?;
    let mut s = Session::new(model);
    let prop = Propagation::new(&batch);
    let x = Features::from_tensor(batch.features());
    let all: Vec<usize> = (0..batch.num_nodes()).collect();
    let mut log = TrainLog {
        val_metric: "accuracy",
        ..TrainLog::default()
    };
    let mut ckpt = Checkpoint::new(true);
    for epoch in 0..cfg.epochs {
        s.begin_epoch(epoch, &prop, &x, &all)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &s.model);
        let outs = s.model.encoder.encode_layers(
            &mut tape,
            bound.encoder(),
            &prop,
            &x,
            None,
            true,
            &mut s.drop_rng,
        )?;
        let last = outs.last().expect("L >= 1").post;
        let pooled = tape.segment_pool(last, &segments, ng, cfg.pool)?;
        let head = s.model.head.as_ref().expect("graph head");
        let logits = head.forward(&mut tape, bound.head(), pooled, true, &mut s.drop_rng)?;
        let task = tape.softmax_cross_entropy(logits, labels, train)?;
        let loss_g = tape.value(task).item() as f64;
        let qv = s.quantized(&outs);
        let reset = s.reset_due(epoch);
        let vq = s.vq_terms(&mut tape, &qv, &all, reset)?;
        let (loss, loss_vq) = total_loss(&mut tape, task, vq)?;
        s.step(&mut tape, loss, &bound, epoch)?;

        let pred = graph_predict(&s.model, &prop, &x, &segments, ng)?;
        let val = metrics::accuracy(&pred, labels, valid);
        finish_epoch(&mut log, epoch, loss_g, loss_vq, s.usage(), val);
        ckpt.observe(val, epoch, s.vq_live || s.model.codebooks.is_none(), &s.model);
    }
    let model = ckpt.finish(&mut log);
    Ok(Trained { model, log })
}

/// Class predictions of the graph head for a batch, inference mode.
pub fn graph_predict(
    model: &NidModel,
    prop: &Propagation,
    x: &Features,
    segments: &[usize],
    num_graphs: usize,
) -> Result<Vec<usize>> {
    let head = model.head.as_ref().ok_or_else(|| Error::Config("model has no graph head".into()))?;
    let mut tape = Tape::new();
    let h = model.encoder.embed(prop, x, false)?;
    let hv = tape.constant(h.last().expect("L >= 1").clone());
    let pooled = tape.segment_pool(hv, segments, num_graphs, model.config.pool)?;
    Ok(argmax(&head.apply(tape.value(pooled))?))
}

/// Node IDs of every node of `g`: per layer, residual-quantize the
/// inference embedding; concatenate layer-major, level-minor.
pub fn generate_ids(model: &NidModel, g: &Graph) -> Result<NodeIdTable> {
    let set = model
        .codebooks
        .as_ref()
        .ok_or_else(|| Error::Config("model was trained without quantization".into()))?;
    if g.feat_dim() != model.encoder.d_in() {
        return Err(Error::ShapeMismatch {
            op: "generate_ids",
            left: (g.num_nodes(), model.encoder.d_in()),
            right: (g.num_nodes(), g.feat_dim()),
        });
    }
    let prop = Propagation::new(g);
    let x = Features::from_tensor(g.features());
    let emb = model.embed(&prop, &x)?;
    ids_from_embeddings(set, &emb)
}

/// Quantizes precomputed per-layer embeddings into an ID table.
pub fn ids_from_embeddings(set: &CodebookSet, emb: &[Tensor]) -> Result<NodeIdTable> {
    if emb.len() != set.layers {
        return Err(Error::ShapeMismatch {
            op: "ids_from_embeddings",
            left: (set.layers, set.levels),
            right: (emb.len(), 0),
        });
    }
    let n = emb[0].rows();
    let w = set.layers * set.levels;
    let mut codes = vec![0u8; n * w];
    for (l, h) in emb.iter().enumerate() {
        let c = set.quantize_rows(l, h)?;
        for i in 0..n {
            for m in 0..set.levels {
                codes[i * w + l * set.levels + m] = c[i * set.levels + m] as u8;
            }
        }
    }
    NodeIdTable::new(set.layers, set.levels, set.k(), codes)
}
