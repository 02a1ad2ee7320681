//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sieve_core::grounding::{DiscoveryParams, SourceSpace};
use sieve_core::metrics::EvalParams;
use sieve_core::reward::{ActParams, Combine, RewardWeights};
use sieve_core::rollout::RolloutParams;
use sieve_core::saliency::AnchorPolicy;
use sieve_core::toy_vlm::ModelConfig;
use sieve_core::trainer::{AdamParams, TrainConfig, WarmStartConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Text,
    IntList,
    LayerSets,
    Combine,
    Space,
}

const KEYS: &[(&str, &str, Kind)] = &[
    ("seed", "0", Kind::Int),
    ("data.dir", "", Kind::Text),
    ("data.n", "1500", Kind::Int),
    ("eval.n", "200", Kind::Int),
    ("eval.temperature", "1.0", Kind::Float),
    ("eval.seeds", "3", Kind::Int),
    ("inspect.n", "4", Kind::Int),
    ("model.path", "", Kind::Text),
    ("model.d_model", "64", Kind::Int),
    ("model.n_layers", "6", Kind::Int),
    ("model.n_heads", "4", Kind::Int),
    ("model.mid_layers", "3,4", Kind::IntList),
    ("model.max_seq", "512", Kind::Int),
    ("model.init_std", "0.02", Kind::Float),
    ("warm_start.steps", "800", Kind::Int),
    ("warm_start.batch", "16", Kind::Int),
    ("warm_start.lr", "0.003", Kind::Float),
    ("warm_start.align_weight", "1.0", Kind::Float),
    ("warm_start.align_tau", "0.1", Kind::Float),
    ("warm_start.p_insert", "0.5", Kind::Float),
    ("warm_start.p_long", "0.5", Kind::Float),
    ("train.steps", "60", Kind::Int),
    ("train.prompts_per_batch", "16", Kind::Int),
    ("train.group_size", "8", Kind::Int),
    ("train.learning_rate", "0.001", Kind::Float),
    ("train.momentum", "0.9", Kind::Float),
    ("train.clip_eps", "0.2", Kind::Float),
    ("train.kl_coeff", "0.0", Kind::Float),
    ("train.refresh_period", "0", Kind::Int),
    ("reward.result", "0.6", Kind::Float),
    ("reward.format", "0.3", Kind::Float),
    ("reward.embedding", "0.5", Kind::Float),
    ("reward.action", "0.2", Kind::Float),
    ("reward.act_enabled", "true", Kind::Bool),
    ("reward.act_min_think", "8", Kind::Int),
    ("reward.act_combine", "and", Kind::Combine),
    ("rollout.max_turns", "4", Kind::Int),
    ("rollout.turn_budget", "64", Kind::Int),
    ("rollout.temperature", "1.0", Kind::Float),
    ("discovery.tau", "0.1", Kind::Float),
    ("discovery.block_size", "2", Kind::Int),
    ("discovery.k", "1", Kind::Int),
    ("discovery.margin_blocks", "1", Kind::Int),
    ("discovery.center", "true", Kind::Bool),
    ("discovery.source_space", "input", Kind::Space),
    ("discovery.layers", "", Kind::IntList),
    ("discovery.anchor_relative", "0.5", Kind::Float),
    ("discovery.max_anchors", "4", Kind::Int),
    ("sweep.k", "1,2,3,4,5,6,7", Kind::IntList),
    ("sweep.layers", "", Kind::LayerSets),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// Every setting of a run, as validated text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect() }
    }
}

pub fn valid_keys() -> Vec<&'static str> {
    KEYS.iter().map(|k| k.0).collect()
}

fn kind_of(key: &str) -> Option<(&'static str, Kind)> {
    KEYS.iter().find(|k| k.0 == key).map(|&(k, _, kind)| (k, kind))
}

fn check(key: &str, value: &str, kind: Kind) -> Result<()> {
    let bad = |what: &str| Err(ConfigError(format!("{key}: expected {what}, got {value:?}")));
    let ok = match kind {
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => value.parse::<bool>().is_ok(),
        Kind::Text => true,
        Kind::IntList => parse_list(value).is_ok(),
        Kind::LayerSets => parse_layer_sets(value).is_ok(),
        Kind::Combine => matches!(value, "and" | "or"),
        Kind::Space => matches!(value, "input" | "mid"),
    };
    if ok {
        return Ok(());
    }
    match kind {
        Kind::Int => bad("a non-negative integer"),
        Kind::Float => bad("a finite number"),
        Kind::Bool => bad("true or false"),
        Kind::IntList => bad("a comma-separated list of integers"),
        Kind::LayerSets => bad("layer sets like 1;2;3,4"),
        Kind::Combine => bad("and | or"),
        Kind::Space => bad("input | mid"),
        Kind::Text => unreachable!(),
    }
}

pub fn parse_list(s: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(usize::from_str).collect()
}

pub fn parse_layer_sets(s: &str) -> std::result::Result<Vec<Vec<usize>>, std::num::ParseIntError> {
    s.split(';').map(str::trim).filter(|x| !x.is_empty()).map(parse_list).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some((k, kind)) = kind_of(key) else {
            return Err(ConfigError(format!("unknown key {key:?}; valid keys: {}", valid_keys().join(", "))));
        };
        let value = value.trim();
        check(k, value, kind)?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            self.apply_override(line).map_err(|e| ConfigError(format!("{origin}:{}: {}", i + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// The effective configuration, one `key = value` per line in key order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn text(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no config key {key}"))
    }

    pub fn int(&self, key: &str) -> usize {
        self.text(key).parse().expect("validated on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.text(key).parse().expect("validated on set")
    }

    pub fn float(&self, key: &str) -> f64 {
        self.text(key).parse().expect("validated on set")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.text(key).parse().expect("validated on set")
    }

    pub fn list(&self, key: &str) -> Vec<usize> {
        parse_list(self.text(key)).expect("validated on set")
    }

    pub fn optional_path(&self, key: &str) -> Option<&Path> {
        Some(self.text(key)).filter(|s| !s.is_empty()).map(Path::new)
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mid = self.list("model.mid_layers");
        let [lo, hi] = mid[..] else {
            return Err(ConfigError(format!("model.mid_layers: expected lo,hi, got {:?}", self.text("model.mid_layers"))));
        };
        Ok(ModelConfig {
            d_model: self.int("model.d_model"),
            n_layers: self.int("model.n_layers"),
            n_heads: self.int("model.n_heads"),
            mid_layers: (lo, hi),
            seed: self.seed(),
            max_seq: self.int("model.max_seq"),
            init_std: self.float("model.init_std"),
            ..ModelConfig::default()
        })
    }

    pub fn discovery(&self) -> DiscoveryParams {
        let layers = self.list("discovery.layers");
        DiscoveryParams {
            anchors: AnchorPolicy {
                relative: self.float("discovery.anchor_relative"),
                max_anchors: self.int("discovery.max_anchors"),
            },
            tau: self.float("discovery.tau"),
            block_size: self.int("discovery.block_size"),
            k: self.int("discovery.k"),
            margin_blocks: self.int("discovery.margin_blocks"),
            center: self.flag("discovery.center"),
            source_space: match self.text("discovery.source_space") {
                "mid" => SourceSpace::MidLayer,
                _ => SourceSpace::InputEmbedding,
            },
            layers: (!layers.is_empty()).then_some(layers),
        }
    }

    pub fn rollout(&self) -> RolloutParams {
        RolloutParams {
            max_turns: self.int("rollout.max_turns"),
            turn_budget: self.int("rollout.turn_budget"),
            temperature: self.float("rollout.temperature"),
        }
    }

    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            result: self.float("reward.result"),
            format: self.float("reward.format"),
            embedding: self.float("reward.embedding"),
            action: self.float("reward.action"),
        }
    }

    pub fn act(&self) -> ActParams {
        ActParams {
            enabled: self.flag("reward.act_enabled"),
            min_think: self.int("reward.act_min_think"),
            combine: if self.text("reward.act_combine") == "or" { Combine::Or } else { Combine::And },
        }
    }

    pub fn train(&self) -> TrainConfig {
        let period = self.int("train.refresh_period");
        TrainConfig {
            prompts_per_batch: self.int("train.prompts_per_batch"),
            group_size: self.int("train.group_size"),
            steps: self.int("train.steps"),
            learning_rate: self.float("train.learning_rate"),
            momentum: self.float("train.momentum"),
            clip_eps: self.float("train.clip_eps"),
            kl_coeff: self.float("train.kl_coeff"),
            seed: self.seed(),
            refresh_period: (period > 0).then_some(period),
            rollout: self.rollout(),
            weights: self.weights(),
            act: self.act(),
            discovery: self.discovery(),
        }
    }

    pub fn warm_start(&self) -> WarmStartConfig {
        WarmStartConfig {
            steps: self.int("warm_start.steps"),
            batch: self.int("warm_start.batch"),
            adam: AdamParams { lr: self.float("warm_start.lr"), ..AdamParams::default() },
            align_weight: self.float("warm_start.align_weight"),
            align_tau: self.float("warm_start.align_tau"),
            p_insert: self.float("warm_start.p_insert"),
            p_long: self.float("warm_start.p_long"),
            seed: self.seed(),
        }
    }

    pub fn eval(&self) -> EvalParams {
        EvalParams {
            rollout: RolloutParams { temperature: self.float("eval.temperature"), ..self.rollout() },
            discovery: self.discovery(),
            seed: self.seed(),
        }
    }

    /// Layer sets for the layer sweep; every single layer when unset.
    pub fn sweep_layers(&self, n_layers: usize) -> Vec<Vec<usize>> {
        let sets = parse_layer_sets(self.text("sweep.layers")).expect("validated on set");
        if sets.is_empty() {
            (1..=n_layers).map(|l| vec![l]).collect()
        } else {
            sets
        }
    }
}
