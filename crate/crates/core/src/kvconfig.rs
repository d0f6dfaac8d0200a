//! Plain-text `key = value` configuration documents.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Keys
//! are consumed by typed getters and [`KvDoc::finish`] rejects whatever is
//! left, naming the first unknown key.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::AttnConfig;
use crate::error::{Error, Result};
use crate::layer::LocalVariant;
use crate::linear::FeatureMap;
use crate::model::{FfnKind, ModelConfig};

#[derive(Clone, Debug, Default)]
pub struct KvDoc {
    /// `(key, value, line)` not yet consumed.
    entries: Vec<(String, String, usize)>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.iter().any(|(e, _, _)| e == k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            entries.push((k.to_string(), v.to_string(), i + 1));
        }
        Ok(Self { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sets or replaces a key (flag overrides).
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.retain(|(k, _, _)| k != key);
        self.entries.push((key.to_string(), value.to_string(), 0));
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        let i = self.entries.iter().position(|(k, _, _)| k == key)?;
        Some(self.entries.remove(i).1)
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Removes every key starting with `prefix`.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let (hit, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.entries)
            .into_iter()
            .partition(|(k, _, _)| k.starts_with(prefix));
        self.entries = keep;
        hit.into_iter().map(|(k, v, _)| (k, v)).collect()
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((k, _, _)) => Err(Error::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

fn parse_bool(key: &str, v: String) -> Result<bool> {
    match v.as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn take_bool(doc: &mut KvDoc, key: &str, slot: &mut bool) -> Result<()> {
    if let Some(v) = doc.take_raw(key) {
        *slot = parse_bool(key, v)?;
    }
    Ok(())
}

impl AttnConfig {
    pub fn apply_kv(&mut self, doc: &mut KvDoc) -> Result<()> {
        doc.take_into("n_heads", &mut self.n_heads)?;
        doc.take_into("n_kv_heads", &mut self.n_kv_heads)?;
        doc.take_into("head_dim", &mut self.head_dim)?;
        doc.take_into("window", &mut self.window)?;
        doc.take_into("rope_theta", &mut self.rope_theta)?;
        take_bool(doc, "use_rope", &mut self.use_rope)?;
        if let Some(v) = doc.take_raw("feature_map") {
            self.feature_map = FeatureMap::parse(&v)?;
        }
        doc.take_into("chunk_size", &mut self.chunk_size)?;
        doc.take_into("save_stride", &mut self.save_stride)?;
        take_bool(doc, "use_group_norm", &mut self.use_group_norm)?;
        take_bool(doc, "qk_norm", &mut self.qk_norm)?;
        take_bool(doc, "rla_uses_rope", &mut self.rla_uses_rope)?;
        take_bool(doc, "rla_inclusive_readout", &mut self.rla_inclusive_readout)?;
        Ok(())
    }

    pub fn write_kv(&self, out: &mut String) {
        let _ = writeln!(out, "n_heads = {}", self.n_heads);
        let _ = writeln!(out, "n_kv_heads = {}", self.n_kv_heads);
        let _ = writeln!(out, "head_dim = {}", self.head_dim);
        let _ = writeln!(out, "window = {}", self.window);
        let _ = writeln!(out, "rope_theta = {}", self.rope_theta);
        let _ = writeln!(out, "use_rope = {}", self.use_rope);
        let _ = writeln!(out, "feature_map = {}", self.feature_map.name());
        let _ = writeln!(out, "chunk_size = {}", self.chunk_size);
        let _ = writeln!(out, "save_stride = {}", self.save_stride);
        let _ = writeln!(out, "use_group_norm = {}", self.use_group_norm);
        let _ = writeln!(out, "qk_norm = {}", self.qk_norm);
        let _ = writeln!(out, "rla_uses_rope = {}", self.rla_uses_rope);
        let _ = writeln!(out, "rla_inclusive_readout = {}", self.rla_inclusive_readout);
    }
}

impl ModelConfig {
    /// Applies model keys present in `doc`; `d_model` also sets the
    /// attention width.
    pub fn apply_kv(&mut self, doc: &mut KvDoc) -> Result<()> {
        doc.take_into("vocab_size", &mut self.vocab_size)?;
        doc.take_into("d_model", &mut self.d_model)?;
        self.attn.d_model = self.d_model;
        doc.take_into("n_layers", &mut self.n_layers)?;
        doc.take_into("ffn_dim", &mut self.ffn_dim)?;
        doc.take_into("local_global_period", &mut self.local_global_period)?;
        if let Some(v) = doc.take_raw("local_variant") {
            self.local_variant = LocalVariant::parse(&v)?;
        }
        if let Some(v) = doc.take_raw("ffn") {
            self.ffn = FfnKind::parse(&v)?;
        }
        take_bool(doc, "literal_residual", &mut self.literal_residual)?;
        self.attn.apply_kv(doc)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(out, "d_model = {}", self.d_model);
        let _ = writeln!(out, "n_layers = {}", self.n_layers);
        let _ = writeln!(out, "ffn_dim = {}", self.ffn_dim);
        let _ = writeln!(out, "local_global_period = {}", self.local_global_period);
        let _ = writeln!(out, "local_variant = {}", self.local_variant.name());
        let _ = writeln!(out, "ffn = {}", self.ffn.name());
        let _ = writeln!(out, "literal_residual = {}", self.literal_residual);
        self.attn.write_kv(&mut out);
        out
    }

    /// Parses a complete model document (unknown keys are errors).
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let mut cfg = ModelConfig::desk(16);
        cfg.apply_kv(&mut doc)?;
        doc.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_types() {
        let mut d = KvDoc::parse("# header\n a = 3 # trailing\n\nb=x y\nflag = on\n").unwrap();
        assert_eq!(d.take::<usize>("a").unwrap(), Some(3));
        assert_eq!(d.take_raw("b").as_deref(), Some("x y"));
        let mut f = false;
        take_bool(&mut d, "flag", &mut f).unwrap();
        assert!(f);
        assert!(d.take::<usize>("missing").unwrap().is_none());
        d.finish().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        assert!(KvDoc::parse("novalue\n").is_err());
        assert!(KvDoc::parse("a = 1\na = 2\n").is_err());
        let mut d = KvDoc::parse("a = notanumber\n").unwrap();
        let e = d.take::<usize>("a").unwrap_err().to_string();
        assert!(e.contains("`a`"), "{e}");
        let err = ModelConfig::from_kv("d_model = 64\nwindwo = 8\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "windwo"));
        assert!(err.to_string().contains("windwo"));
    }

    #[test]
    fn model_round_trip() {
        let mut cfg = ModelConfig::desk(32);
        cfg.local_variant = LocalVariant::SwaOnly;
        cfg.ffn = FfnKind::GeGlu;
        cfg.attn.feature_map = FeatureMap::Relu;
        cfg.local_global_period = 0;
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
