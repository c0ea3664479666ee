//! Flat `key = value` run configuration with `model.*`, `head.*`, `train.*`,
//! `data.*` and `eval.*` namespaces. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind};
use crate::train::TrainConfig;
use crate::transformer::ModelConfig;

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("model.d_model", "32"),
    ("model.n_layers", "2"),
    ("model.n_heads", "2"),
    ("model.max_seq_len", "200"),
    ("model.seq2seq", "false"),
    ("model.tie_embeddings", "true"),
    ("head.kind", "softmax"),
    ("head.k1", "20"),
    ("head.k2", "100"),
    ("head.mi", "false"),
    ("head.mi_block", "3x3"),
    ("head.mos_components", "3"),
    ("head.copy_bias", "-20"),
    ("head.ptr_bias", "0"),
    ("train.profile", "default"),
    ("train.lr", "0.001"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-6"),
    ("train.weight_decay", "1.2e-6"),
    ("train.warmup_steps", "1000"),
    ("train.batch_size", "4"),
    ("train.steps", "2000"),
    ("train.seed", "0"),
    ("train.checkpoint_every", "0"),
    ("train.clip_norm", "1"),
    ("data.kind", "corpus"),
    ("data.train", ""),
    ("data.valid", ""),
    ("data.vocab_cap", "10000"),
    ("data.seq_len", "200"),
    ("eval.topk", "5"),
    ("eval.len", "20"),
];

/// Values the `paper-lm` profile changes.
const PAPER_LM: &[(&str, &str)] = &[("train.lr", "1e-5"), ("train.batch_size", "4")];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. A `train.profile` line
    /// applies its preset first, so explicit keys still win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        if let Some((_, p)) = pairs.iter().find(|(k, _)| k == "train.profile") {
            cfg.set("train.profile", p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "train.profile") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self.values.get_mut(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        *slot = value.to_string();
        if key == "train.profile" {
            match value {
                "default" => {}
                "paper-lm" => {
                    for (k, v) in PAPER_LM {
                        self.values.insert(k.to_string(), v.to_string());
                    }
                }
                _ => return Err(Error::Config(format!("unknown train.profile `{value}`"))),
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("{key} = `{v}` is not a valid value")))
    }

    /// The fully resolved configuration, one `key = value` per line.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            d_model: self.parsed("model.d_model")?,
            n_layers: self.parsed("model.n_layers")?,
            n_heads: self.parsed("model.n_heads")?,
            max_seq_len: self.parsed("model.max_seq_len")?,
            seq2seq: self.parsed("model.seq2seq")?,
            tie_embeddings: self.parsed("model.tie_embeddings")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head(&self) -> Result<HeadConfig> {
        let kind: HeadKind = self.get("head.kind").parse()?;
        let mut h = HeadConfig::new(kind, self.parsed("model.d_model")?).with_k(self.parsed("head.k1")?, self.parsed("head.k2")?);
        let block = self.get("head.mi_block");
        let (r, c) = block
            .split_once('x')
            .and_then(|(r, c)| Some((r.trim().parse().ok()?, c.trim().parse().ok()?)))
            .ok_or_else(|| Error::Config(format!("head.mi_block = `{block}` is not ROWSxCOLS")))?;
        h.mi_block = (r, c);
        h.use_mi = self.parsed("head.mi")?;
        h.mos_components = self.parsed("head.mos_components")?;
        h.copy_bias = self.parsed("head.copy_bias")?;
        h.ptr_bias = self.parsed("head.ptr_bias")?;
        h.validate(self.parsed("model.seq2seq")?)?;
        Ok(h)
    }

    /// Training settings; `SCPR_SEED`, when set, replaces `train.seed`.
    pub fn train(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::default();
        t.opt.lr = self.parsed("train.lr")?;
        t.opt.betas = (self.parsed("train.beta1")?, self.parsed("train.beta2")?);
        t.opt.eps = self.parsed("train.eps")?;
        t.opt.weight_decay = self.parsed("train.weight_decay")?;
        t.opt.warmup_steps = self.parsed("train.warmup_steps")?;
        t.batch_size = self.parsed("train.batch_size")?;
        t.steps = self.parsed("train.steps")?;
        t.seed = self.seed()?;
        t.checkpoint_every = self.parsed("train.checkpoint_every")?;
        t.clip_norm = self.parsed("train.clip_norm")?;
        Ok(t)
    }

    pub fn seed(&self) -> Result<u64> {
        match std::env::var("SCPR_SEED") {
            Ok(s) => s.trim().parse().map_err(|_| Error::Config(format!("SCPR_SEED = `{s}` is not an integer"))),
            Err(_) => self.parsed("train.seed"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let c = RunConfig::parse("# comment\nhead.kind = cpr\nhead.mi = true  # trailing\n").unwrap();
        assert_eq!(c.get("head.kind"), "cpr");
        let h = c.head().unwrap();
        assert_eq!(h.kind, HeadKind::Cpr);
        assert!(h.use_mi);
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("train.lr = 1\ntrain.colour = red").unwrap_err();
        assert!(err.to_string().contains("train.colour"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn paper_profile_sets_lr_but_explicit_keys_win() {
        let c = RunConfig::parse("train.profile = paper-lm").unwrap();
        assert_eq!(c.train().unwrap().opt.lr, 1e-5);
        let c = RunConfig::parse("train.lr = 0.01\ntrain.profile = paper-lm").unwrap();
        assert_eq!(c.train().unwrap().opt.lr, 0.01);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(RunConfig::parse("head.kind = nope").unwrap().head().is_err());
        assert!(RunConfig::parse("head.mi_block = 3by3").unwrap().head().is_err());
        assert!(RunConfig::parse("model.d_model = x").unwrap().model(10).is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }
}
