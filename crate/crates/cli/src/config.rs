//! Flat `key=value` run configuration.
//!
//! Resolution order: built-in defaults, then a config file, then `--set`
//! overrides and dedicated flags. The seed falls back to `NID_SEED` when no
//! layer sets it.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use nid_core::downstream::HeadConfig;
use nid_core::train::TrainConfig;

pub const SEED_ENV: &str = "NID_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub head: HeadConfig,
    /// Node split ratios (train, valid, test).
    pub split: (f64, f64, f64),
    /// Edge split ratios for link tasks.
    pub edge_split: (f64, f64, f64),
    /// Held-out negatives per held-out positive edge.
    pub link_negatives: usize,
    /// Graph-level split ratios.
    pub graph_split: (f64, f64, f64),
    pub repeats: usize,
    pub clusters: Option<usize>,
    pub top_n: usize,
    pub graph_format: String,
    seed_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            split: (0.6, 0.2, 0.2),
            edge_split: (0.85, 0.05, 0.1),
            link_negatives: 1,
            graph_split: (0.5, 0.25, 0.25),
            repeats: 50,
            clusters: None,
            top_n: 5,
            graph_format: "ngf-text".into(),
            seed_set: false,
        }
    }
}

fn ratios(v: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad ratio list '{v}'"))?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => bail!("expected three comma-separated ratios, got '{v}'"),
    }
}

fn fmt_ratios(r: (f64, f64, f64)) -> String {
    format!("{},{},{}", r.0, r.1, r.2)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("bad value '{v}' for {key}"))
}

impl RunConfig {
    /// Applies one override. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if key == "seed" {
            self.seed_set = true;
        }
        if self.train.set(key, value)? {
            if key == "seed" {
                self.head.seed = self.train.seed;
            }
            return Ok(());
        }
        match key {
            "split" => self.split = ratios(value)?,
            "edge_split" => self.edge_split = ratios(value)?,
            "graph_split" => self.graph_split = ratios(value)?,
            "link_negatives" => self.link_negatives = num(key, value)?,
            "repeats" => self.repeats = num(key, value)?,
            "clusters" => self.clusters = Some(num(key, value)?),
            "top_n" => self.top_n = num(key, value)?,
            "graph_format" => {
                value.parse::<nid_core::graph::GraphFormat>()?;
                self.graph_format = value.into();
            }
            "id_head_hidden" => {
                self.head.hidden = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "id_head_dropout" => self.head.dropout = num(key, value)?,
            "id_head_lr" => self.head.lr = num(key, value)?,
            "id_head_weight_decay" => self.head.weight_decay = num(key, value)?,
            "id_head_epochs" => self.head.epochs = num(key, value)?,
            "id_head_patience" => self.head.patience = num(key, value)?,
            "id_head_embed" => self.head.embed = value.parse()?,
            "id_head_embed_dim" => self.head.embed_dim = num(key, value)?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got '{line}'", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| anyhow!("override '{p}' is not key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Uses `NID_SEED` when nothing else set the seed.
    pub fn seed_fallback(&mut self, env: Option<String>) -> Result<()> {
        if !self.seed_set {
            if let Some(v) = env {
                self.set("seed", &v).context(SEED_ENV)?;
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .train
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let h = &self.head;
        let hidden: Vec<String> = h.hidden.iter().map(usize::to_string).collect();
        let embed = match h.embed {
            nid_core::downstream::EmbedMode::OneHot => "one-hot",
            nid_core::downstream::EmbedMode::Learned => "learned",
        };
        for (k, v) in [
            ("split", fmt_ratios(self.split)),
            ("edge_split", fmt_ratios(self.edge_split)),
            ("graph_split", fmt_ratios(self.graph_split)),
            ("link_negatives", self.link_negatives.to_string()),
            ("repeats", self.repeats.to_string()),
            (
                "clusters",
                self.clusters.map_or("auto".into(), |c| c.to_string()),
            ),
            ("top_n", self.top_n.to_string()),
            ("graph_format", self.graph_format.clone()),
            ("id_head_hidden", hidden.join(",")),
            ("id_head_dropout", h.dropout.to_string()),
            ("id_head_lr", h.lr.to_string()),
            ("id_head_weight_decay", h.weight_decay.to_string()),
            ("id_head_epochs", h.epochs.to_string()),
            ("id_head_patience", h.patience.to_string()),
            ("id_head_embed", embed.into()),
            ("id_head_embed_dim", h.embed_dim.to_string()),
        ] {
            out.push((k.into(), v));
        }
        out
    }

    /// Single-line echo of the resolved configuration.
    pub fn echo(&self) -> String {
        let body: Vec<String> = self
            .entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!("kind=config {}", body.join(" "))
    }

    /// Loads a config file if given, then overrides.
    pub fn resolve(file: Option<&PathBuf>, overrides: &[String], env_seed: Option<String>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.seed_fallback(env_seed)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("learning_rate", "0.1").is_err());
        assert!(c.apply_text("K=8\nbogus=1\n").is_err());
    }

    #[test]
    fn env_seed_only_as_fallback() {
        let c = RunConfig::resolve(None, &[], Some("7".into())).unwrap();
        assert_eq!(c.seed(), 7);
        let c = RunConfig::resolve(None, &["seed=3".into()], Some("7".into())).unwrap();
        assert_eq!(c.seed(), 3);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("K=16\nid_head_hidden=64\nsplit=0.5,0.25,0.25\nclusters=3\n").unwrap();
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            if v != "auto" {
                d.set(&k, &v).unwrap();
            }
        }
        assert_eq!(c.entries(), d.entries());
    }
}
