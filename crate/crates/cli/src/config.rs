//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use seqrec_core::model::ModelConfig;
use seqrec_core::trainer::{GraphTerm, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Mqsa,
    Sasrec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    Distill,
    Grareg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub term: TermKind,
    /// Successors per item for the neighbor-distance term.
    pub neighbors: usize,
    /// Time span of the transition graph.
    pub span: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            preset: Preset::Mqsa,
            model: ModelConfig::default(),
            train: TrainConfig { record_time: false, ..TrainConfig::default() },
            term: TermKind::Distill,
            neighbors: 3,
            span: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("invalid value {value:?} for config key `{key}`"))
}

impl RunConfig {
    /// Defaults, then the file at `path`, then each `key=value` override.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("config error in {}", path.display()))?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("config error: override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v.trim()).context("config error")?;
        }
        cfg.finish();
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", idx + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", idx + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "model" => {
                self.preset = match value {
                    "mqsa" => Preset::Mqsa,
                    "sasrec" => Preset::Sasrec,
                    _ => bail!("invalid value {value:?} for config key `model` (expected mqsa or sasrec)"),
                }
            }
            "dim" => m.dim = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "num_blocks" => m.num_blocks = parse(key, value)?,
            "long_query_len" => m.long_query_len = parse(key, value)?,
            "alpha" => m.alpha = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "tau" => m.tau = parse(key, value)?,
            "short_only" => m.short_only = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "l2_weight" => t.l2_weight = parse(key, value)?,
            "kd_weight" => t.kd_weight = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "record_time" => t.record_time = parse(key, value)?,
            "graph_term" => {
                self.term = match value {
                    "distill" => TermKind::Distill,
                    "grareg" => TermKind::Grareg,
                    _ => bail!("invalid value {value:?} for config key `graph_term` (expected distill or grareg)"),
                }
            }
            "neighbors" => self.neighbors = parse(key, value)?,
            "span" => self.span = parse(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies the preset and the graph-term choice.
    fn finish(&mut self) {
        self.train.graph_term = match self.term {
            TermKind::Distill => GraphTerm::Distillation,
            TermKind::Grareg => GraphTerm::NeighborDistance { neighbors: self.neighbors },
        };
        if self.preset == Preset::Sasrec {
            self.model.alpha = 1.0;
            self.model.short_only = true;
            self.train.kd_weight = 0.0;
        }
    }

    pub fn data_path(&self) -> Result<&Path> {
        let path = self.data.as_deref().ok_or_else(|| anyhow!("config error: no dataset path (set `data`)"))?;
        if !path.is_file() {
            bail!("config error: dataset {} does not exist", path.display());
        }
        Ok(path)
    }

    /// Every key with its resolved value, readable back by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("model", if self.preset == Preset::Sasrec { "sasrec" } else { "mqsa" }.into());
        kv("dim", m.dim.to_string());
        kv("max_len", m.max_len.to_string());
        kv("num_blocks", m.num_blocks.to_string());
        kv("long_query_len", m.long_query_len.to_string());
        kv("alpha", m.alpha.to_string());
        kv("dropout", m.dropout.to_string());
        kv("tau", m.tau.to_string());
        kv("short_only", m.short_only.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("l2_weight", t.l2_weight.to_string());
        kv("kd_weight", t.kd_weight.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("seed", t.seed.to_string());
        kv("record_time", t.record_time.to_string());
        kv("graph_term", if self.term == TermKind::Grareg { "grareg" } else { "distill" }.into());
        kv("neighbors", self.neighbors.to_string());
        kv("span", self.span.to_string());
        out
    }
}
