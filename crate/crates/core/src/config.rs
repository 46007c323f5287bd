//! Run configuration: line-based `key = value` files with `#` comments.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::advtrain::{OptimizerKind, TrainConfig};
use crate::attrib::AttribConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::featpipe::{ChannelMask, EmptyNewsPolicy, FeatureConfig, MissingCharPolicy};
use crate::panel::SplitSpec;
use crate::sdfnet::NetConfig;
use crate::synthlab::{SignalChannel, SynthConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits `text` into `key = value` entries. Blank lines and `#` comments
/// are skipped; a key may appear only once.
pub fn parse_kv(text: &str, source: &str) -> Result<Vec<KvEntry>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{source} line {}: expected `key = value`, found `{line}`", i + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("{source} line {}: empty key", i + 1)));
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("{source} line {}: duplicate key `{key}`", i + 1)));
        }
        out.push(KvEntry {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Every tunable of a run, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub eval: EvalConfig,
    pub attrib: AttribConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            synth: SynthConfig::default(),
            features: FeatureConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::new((12, 211), (212, 261), (262, 361)).expect("default split is ordered"),
            eval: EvalConfig::default(),
            attrib: AttribConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected on/off, found `{value}`"))),
    }
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut split = [
            cfg.split.train.0,
            cfg.split.train.1,
            cfg.split.val.0,
            cfg.split.val.1,
            cfg.split.test.0,
            cfg.split.test.1,
        ];
        for e in parse_kv(text, source)? {
            let idx = ["train_start", "train_end", "val_start", "val_end", "test_start", "test_end"]
                .iter()
                .position(|k| *k == e.key);
            let r = match idx {
                Some(i) => parse(&e.key, &e.value).map(|v| split[i] = v),
                None => cfg.set(&e.key, &e.value),
            };
            r.map_err(|err| match err {
                Error::Config(m) => Error::Config(format!("{source} line {}: {m}", e.line)),
                other => other,
            })?;
        }
        cfg.split = SplitSpec::new((split[0], split[1]), (split[2], split[3]), (split[4], split[5]))
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Assigns one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        let f = &mut self.features;
        let n = &mut self.net;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "synth_assets" => s.n_assets = parse(key, v)?,
            "synth_periods" => s.n_periods = parse(key, v)?,
            "synth_first_period" => s.first_period = parse(key, v)?,
            "synth_chars" => s.d_f = parse(key, v)?,
            "synth_macro" => s.d_macro = parse(key, v)?,
            "synth_emb_dim" => s.d_emb = parse(key, v)?,
            "synth_news_min" => s.news_min = parse(key, v)?,
            "synth_news_max" => s.news_max = parse(key, v)?,
            "synth_channel" => s.channel = parse(key, v)?,
            "synth_firm_coefs" => {
                s.firm_coefs = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "synth_news_coef" => s.news_coef = parse(key, v)?,
            "synth_macro_coef" => s.macro_coef = parse(key, v)?,
            "synth_noise_std" => s.noise_std = parse(key, v)?,
            "synth_factor_ratio" => s.factor_ratio = parse(key, v)?,
            "synth_sharpe" => s.sharpe = parse(key, v)?,
            "synth_persistence" => s.persistence = parse(key, v)?,
            "synth_macro_persistence" => s.macro_persistence = parse(key, v)?,
            "synth_news_noise" => s.news_noise = parse(key, v)?,
            "synth_topics" => s.topics = parse(key, v)?,
            "synth_topic_scale" => s.topic_scale = parse(key, v)?,
            "d_a" => f.d_a = parse(key, v)?,
            "d_I" => f.d_i = parse(key, v)?,
            "d_N" => f.d_n = parse(key, v)?,
            "window_K" => f.window_k = parse(key, v)?,
            "empty_news_policy" => f.empty_news = parse(key, v)?,
            "missing_char_policy" => f.missing_chars = parse(key, v)?,
            "zero_channels" => f.zero_channels = parse(key, v)?,
            "h1" => n.h1 = parse(key, v)?,
            "h2" => n.h2 = parse(key, v)?,
            "h3" => n.h3 = parse(key, v)?,
            "h_g" => n.h_g = parse(key, v)?,
            "d_g" => n.d_g = parse(key, v)?,
            "instrument_squash" => n.instrument_squash = parse_bool(key, v)?,
            "init_seed" => {
                n.init_seed = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "lambda" => t.lambda = parse(key, v)?,
            "lr_phi" => t.lr_phi = parse(key, v)?,
            "lr_psi" => t.lr_psi = parse(key, v)?,
            "batch_periods" => t.batch_periods = parse(key, v)?,
            "iterations" => t.iterations = parse(key, v)?,
            "eval_interval" => t.eval_interval = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "optimizer" => t.optimizer = parse(key, v)?,
            "update_ratio" => t.update_ratio = parse(key, v)?,
            "recompute_forward" => t.recompute_forward = parse_bool(key, v)?,
            "beta_window" => self.eval.beta_window = parse(key, v)?,
            "periods_per_year" => self.eval.periods_per_year = parse(key, v)?,
            "shapley_permutations" => self.attrib.permutations = parse(key, v)?,
            "shapley_bucket" => self.attrib.bucket_periods = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// All keys with their resolved values, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let f = &self.features;
        let n = &self.net;
        let t = &self.train;
        let mut e = vec![
            ("seed", self.seed.to_string()),
            ("synth_assets", s.n_assets.to_string()),
            ("synth_periods", s.n_periods.to_string()),
            ("synth_first_period", s.first_period.to_string()),
            ("synth_chars", s.d_f.to_string()),
            ("synth_macro", s.d_macro.to_string()),
            ("synth_emb_dim", s.d_emb.to_string()),
            ("synth_news_min", s.news_min.to_string()),
            ("synth_news_max", s.news_max.to_string()),
            ("synth_channel", s.channel.to_string()),
            ("synth_firm_coefs", list(&s.firm_coefs)),
            ("synth_news_coef", s.news_coef.to_string()),
            ("synth_macro_coef", s.macro_coef.to_string()),
            ("synth_noise_std", s.noise_std.to_string()),
            ("synth_factor_ratio", s.factor_ratio.to_string()),
            ("synth_sharpe", s.sharpe.to_string()),
            ("synth_persistence", s.persistence.to_string()),
            ("synth_macro_persistence", s.macro_persistence.to_string()),
            ("synth_news_noise", s.news_noise.to_string()),
            ("synth_topics", s.topics.to_string()),
            ("synth_topic_scale", s.topic_scale.to_string()),
            ("d_a", f.d_a.to_string()),
            ("d_I", f.d_i.to_string()),
            ("d_N", f.d_n.to_string()),
            ("window_K", f.window_k.to_string()),
            ("empty_news_policy", f.empty_news.to_string()),
            ("missing_char_policy", f.missing_chars.to_string()),
            ("zero_channels", f.zero_channels.to_string()),
            ("h1", n.h1.to_string()),
            ("h2", n.h2.to_string()),
            ("h3", n.h3.to_string()),
            ("h_g", n.h_g.to_string()),
            ("d_g", n.d_g.to_string()),
            ("instrument_squash", on_off(n.instrument_squash)),
            ("init_seed", n.init_seed.map_or("auto".to_string(), |s| s.to_string())),
            ("lambda", t.lambda.to_string()),
            ("lr_phi", t.lr_phi.to_string()),
            ("lr_psi", t.lr_psi.to_string()),
            ("batch_periods", t.batch_periods.to_string()),
            ("iterations", t.iterations.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("patience", t.patience.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("update_ratio", t.update_ratio.to_string()),
            ("recompute_forward", on_off(t.recompute_forward)),
            ("train_start", self.split.train.0.to_string()),
            ("train_end", self.split.train.1.to_string()),
            ("val_start", self.split.val.0.to_string()),
            ("val_end", self.split.val.1.to_string()),
            ("test_start", self.split.test.0.to_string()),
            ("test_end", self.split.test.1.to_string()),
            ("beta_window", self.eval.beta_window.to_string()),
            ("periods_per_year", self.eval.periods_per_year.to_string()),
            ("shapley_permutations", self.attrib.permutations.to_string()),
            ("shapley_bucket", self.attrib.bucket_periods.to_string()),
        ];
        e.sort_by_key(|(k, _)| *k);
        e
    }

    /// Canonical text: every key, sorted, one `key = value` per line.
    pub fn canonical_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical text. Independent of key order and
    /// of which keys were left at their defaults.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let f = &self.features;
        let n = &self.net;
        let t = &self.train;
        if [f.d_a, f.d_i, f.d_n, n.h1, n.h2, n.h3, n.h_g, n.d_g].contains(&0) {
            return bad("network and feature dimensions must be positive".into());
        }
        if !(t.lambda >= 0.0 && t.lr_phi >= 0.0 && t.lr_psi >= 0.0) {
            return bad("lambda and learning rates must be nonnegative".into());
        }
        if t.batch_periods == 0 || t.eval_interval == 0 || t.update_ratio == 0 {
            return bad("batch_periods, eval_interval and update_ratio must be positive".into());
        }
        if self.eval.beta_window < 2 {
            return bad("beta_window must be at least 2".into());
        }
        if !(self.eval.periods_per_year > 0.0) {
            return bad("periods_per_year must be positive".into());
        }
        if self.attrib.permutations == 0 || self.attrib.bucket_periods == 0 {
            return bad("shapley_permutations and shapley_bucket must be positive".into());
        }
        self.synth.validate()
    }
}

// Round-trips used by `parse` and `entries`.

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd | adam)"))),
        }
    }
}

impl Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for EmptyNewsPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(EmptyNewsPolicy::Zero),
            "carry_forward" => Ok(EmptyNewsPolicy::CarryForward),
            _ => Err(Error::Config(format!("unknown empty_news_policy `{s}` (zero | carry_forward)"))),
        }
    }
}

impl Display for EmptyNewsPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmptyNewsPolicy::Zero => "zero",
            EmptyNewsPolicy::CarryForward => "carry_forward",
        })
    }
}

impl FromStr for MissingCharPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete_case" => Ok(MissingCharPolicy::CompleteCase),
            "median_impute" => Ok(MissingCharPolicy::MedianImpute),
            _ => Err(Error::Config(format!(
                "unknown missing_char_policy `{s}` (complete_case | median_impute)"
            ))),
        }
    }
}

impl Display for MissingCharPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MissingCharPolicy::CompleteCase => "complete_case",
            MissingCharPolicy::MedianImpute => "median_impute",
        })
    }
}

impl FromStr for ChannelMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut m = ChannelMask::default();
        if s == "none" || s.is_empty() {
            return Ok(m);
        }
        for part in s.split(',').map(str::trim) {
            match part {
                "macro" => m.macro_ = true,
                "firm" => m.firm = true,
                "news" => m.news = true,
                _ => return Err(Error::Config(format!("unknown channel `{part}` (macro | firm | news)"))),
            }
        }
        Ok(m)
    }
}

impl Display for ChannelMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = [(self.macro_, "macro"), (self.firm, "firm"), (self.news, "news")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(if names.is_empty() { "none".to_string() } else { names.join(",") }.as_str())
    }
}

impl FromStr for SignalChannel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "firm" => Ok(SignalChannel::Firm),
            "news" => Ok(SignalChannel::News),
            "macro" => Ok(SignalChannel::Macro),
            "mixed" => Ok(SignalChannel::Mixed),
            _ => Err(Error::Config(format!("unknown synth_channel `{s}` (firm | news | macro | mixed)"))),
        }
    }
}

impl Display for SignalChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignalChannel::Firm => "firm",
            SignalChannel::News => "news",
            SignalChannel::Macro => "macro",
            SignalChannel::Mixed => "mixed",
        })
    }
}
