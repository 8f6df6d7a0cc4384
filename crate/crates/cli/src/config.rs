//! Run configuration: flat `key = value` text with `[section]` headers, or
//! the same structure as JSON. Unknown keys are rejected with their line.

use std::path::Path;

use gram_core::inference::{DecoderMode, HaltRule, RolloutConfig, Selector, Z0Mode};
use gram_core::model::ModelConfig;
use gram_core::tasks::TaskSpec;
use gram_core::trainer::TrainConfig;
use gram_core::{GramError, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weights {
    Ema,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Supervision steps per rollout; `None` uses the model's `n_sup`.
    pub n_sup_max: Option<usize>,
    pub act: bool,
    pub halt_rule: HaltRule,
    pub decoder: DecoderMode,
    pub z0: Z0Mode,
    pub width: usize,
    pub selector: Selector,
    pub weights: Weights,
    pub split: String,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            n_sup_max: None,
            act: false,
            halt_rule: HaltRule::TwoValue,
            decoder: DecoderMode::Argmax,
            z0: Z0Mode::Fixed,
            width: 20,
            selector: Selector::Vote,
            weights: Weights::Ema,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Split whose pairs feed the periodic -ELBO probe (`test` or `train`).
    pub val_split: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = TaskSpec::from_name("nqueens-5").expect("built-in task");
        RunConfig {
            task: spec.name.clone(),
            seed: 0,
            checkpoint_every: 0,
            val_split: "test".into(),
            model: ModelConfig::desk(spec.seq_len, spec.vocab),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn spec(&self) -> Result<TaskSpec> {
        TaskSpec::from_name(&self.task)
    }

    /// Checks the task and keeps task-derived model fields consistent.
    pub fn finalize(mut self) -> Result<Self> {
        let spec = self.spec()?;
        self.model.seq_len = spec.seq_len;
        self.model.vocab = spec.vocab;
        self.model.unconditional = !spec.conditional;
        self.train.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        if !matches!(self.val_split.as_str(), "train" | "test") {
            return Err(GramError::config(format!("val_split must be `train` or `test`, got `{}`", self.val_split)));
        }
        if self.inference.width == 0 {
            return Err(GramError::config("inference.width must be at least 1"));
        }
        Ok(self)
    }

    pub fn rollout(&self) -> Result<RolloutConfig> {
        let spec = self.spec()?;
        Ok(RolloutConfig {
            n_sup_max: self.inference.n_sup_max.unwrap_or(self.model.n_sup),
            act: self.inference.act,
            halt_rule: self.inference.halt_rule,
            decoder: self.inference.decoder,
            z0: self.inference.z0,
            keep_h: false,
            output_len: Some(spec.target_len),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GramError::config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        if is_json {
            parse_json(&text)
        } else {
            parse_text(&text)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}

pub fn parse_json(text: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| GramError::config(format!("config line {}: {e}", e.line())))?;
    let mut base = defaults();
    merge(&mut base, value, "")?;
    from_value(base)
}

fn defaults() -> Value {
    serde_json::to_value(RunConfig::default()).expect("config serialises")
}

fn from_value(v: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| GramError::config(format!("config: {e}")))?;
    cfg.finalize()
}

/// Overlays `src` onto `dst`, refusing keys `dst` does not have.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = d.get_mut(&k).ok_or_else(|| GramError::config(format!("unknown config key `{full}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &full)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Parses a value as JSON when it looks like one, else as a bare string.
fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn parse_text(text: &str) -> Result<RunConfig> {
    let schema = defaults();
    let mut root = schema.clone();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !schema.get(name).is_some_and(Value::is_object) {
                return Err(GramError::config(format!("config line {ln}: unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| GramError::config(format!("config line {ln}: expected `key = value`")))?;
        let key = key.trim();
        let value = scalar(value.trim());
        let table: &mut Map<String, Value> = match &section {
            Some(s) => root[s.as_str()].as_object_mut().expect("section is an object"),
            None => root.as_object_mut().expect("root is an object"),
        };
        let qualified = section.as_ref().map_or(key.to_string(), |s| format!("{s}.{key}"));
        match table.get(key) {
            Some(existing) if existing.is_object() => {
                return Err(GramError::config(format!("config line {ln}: `{qualified}` is a section")));
            }
            Some(_) => {}
            None => return Err(GramError::config(format!("config line {ln}: unknown key `{qualified}`"))),
        }
        table.insert(key.to_string(), value);
        // type-check this key alone so errors carry its line
        let mut probe = schema.clone();
        let slot = match &section {
            Some(s) => &mut probe[s.as_str()][key],
            None => &mut probe[key],
        };
        *slot = match &section {
            Some(s) => root[s.as_str()][key].clone(),
            None => root[key].clone(),
        };
        if let Err(e) = serde_json::from_value::<RunConfig>(probe) {
            return Err(GramError::config(format!("config line {ln}: bad value for `{qualified}`: {e}")));
        }
    }
    from_value(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_sections_and_types() {
        let cfg = parse_text("task = nqueens-5\nseed = 7\n[model]\nd_model = 32\nheads = 2\nguidance = none\n[train]\nlr = 0.001\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.seq_len, 25);
        assert_eq!(cfg.model.guidance, gram_core::model::Guidance::None);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_text("task = nqueens-5\n[train]\nlearning_rate = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = parse_text("[nope]\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = parse_text("[train]\nlr = fast\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default().finalize().unwrap();
        assert_eq!(parse_json(&cfg.to_json()).unwrap(), cfg);
        assert!(parse_json("{\"bogus\": 1}").is_err());
    }
}
