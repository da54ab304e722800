//! Run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! ```text
//! # planted task
//! [task]
//! n1 = 7
//! signal_strength = 3
//!
//! [train]
//! head = attention
//! ```
//!
//! Every key has a default, unknown keys are rejected and the resolved
//! configuration serializes back to the same text.

use std::collections::HashSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synth::PlantedTaskConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "ATTNPOOL_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub sketch_dim: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: 21,
            sketch_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: PlantedTaskConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    /// Gaussian width of generated pose targets, in cells (0: none generated).
    pub pose_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: PlantedTaskConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            pose_sigma: 1.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Every recognized key in canonical order.
    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (t, tr, b) = (&mut self.task, &mut self.train, &mut self.bench);
        match key {
            "task.n1" => t.n1 = parse(key, v)?,
            "task.n2" => t.n2 = parse(key, v)?,
            "task.features" => t.features = parse(key, v)?,
            "task.classes" => t.classes = parse(key, v)?,
            "task.train_size" => t.train_size = parse(key, v)?,
            "task.val_size" => t.val_size = parse(key, v)?,
            "task.signal_strength" => t.signal_strength = parse(key, v)?,
            "task.saliency" => t.saliency = parse(key, v)?,
            "task.clutter_classes" => t.clutter_classes = parse(key, v)?,
            "task.multi_label" => t.multi_label = parse(key, v)?,
            "task.seed" => t.seed = parse(key, v)?,
            "task.pose_sigma" => self.pose_sigma = parse(key, v)?,
            "train.head" => tr.head = v.parse()?,
            "train.rank" => tr.rank = parse(key, v)?,
            "train.learning_rate" => tr.learning_rate = parse(key, v)?,
            "train.momentum" => tr.momentum = parse(key, v)?,
            "train.weight_decay" => tr.weight_decay = parse(key, v)?,
            "train.batch_size" => tr.batch_size = parse(key, v)?,
            "train.epochs" => tr.epochs = parse(key, v)?,
            "train.seed" => tr.seed = parse(key, v)?,
            "train.loss" => tr.loss = v.parse()?,
            "train.lambda_pose" => tr.lambda_pose = parse(key, v)?,
            "train.hidden" => tr.hidden = parse(key, v)?,
            "train.bottom_up_bias" => tr.bottom_up_bias = parse(key, v)?,
            "sketch.dim" => tr.sketch_dim = parse(key, v)?,
            "sketch.seed" => tr.sketch_seed = parse(key, v)?,
            "sketch.normalize" => tr.sketch_normalize = parse(key, v)?,
            "bench.repetitions" => b.repetitions = parse(key, v)?,
            "bench.sketch_dim" => b.sketch_dim = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let (t, tr, b) = (&self.task, &self.train, &self.bench);
        vec![
            ("task.n1", t.n1.to_string()),
            ("task.n2", t.n2.to_string()),
            ("task.features", t.features.to_string()),
            ("task.classes", t.classes.to_string()),
            ("task.train_size", t.train_size.to_string()),
            ("task.val_size", t.val_size.to_string()),
            ("task.signal_strength", t.signal_strength.to_string()),
            ("task.saliency", t.saliency.to_string()),
            ("task.clutter_classes", t.clutter_classes.to_string()),
            ("task.multi_label", t.multi_label.to_string()),
            ("task.seed", t.seed.to_string()),
            ("task.pose_sigma", self.pose_sigma.to_string()),
            ("train.head", tr.head.to_string()),
            ("train.rank", tr.rank.to_string()),
            ("train.learning_rate", tr.learning_rate.to_string()),
            ("train.momentum", tr.momentum.to_string()),
            ("train.weight_decay", tr.weight_decay.to_string()),
            ("train.batch_size", tr.batch_size.to_string()),
            ("train.epochs", tr.epochs.to_string()),
            ("train.seed", tr.seed.to_string()),
            ("train.loss", tr.loss.name().to_string()),
            ("train.lambda_pose", tr.lambda_pose.to_string()),
            ("train.hidden", tr.hidden.to_string()),
            ("train.bottom_up_bias", tr.bottom_up_bias.to_string()),
            ("sketch.dim", tr.sketch_dim.to_string()),
            ("sketch.seed", tr.sketch_seed.to_string()),
            ("sketch.normalize", tr.sketch_normalize.to_string()),
            ("bench.repetitions", b.repetitions.to_string()),
            ("bench.sketch_dim", b.sketch_dim.to_string()),
        ]
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies config text on top of the current values. A key may appear
    /// only once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        let mut seen = HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", no + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header `{line}`")))?
                    .trim();
                if !matches!(name, "task" | "train" | "sketch" | "bench") {
                    return Err(at(format!("unknown section `{name}`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, found `{line}`")))?;
            let k = k.trim();
            let full = match (&section, k.contains('.')) {
                (_, true) => k.to_string(),
                (Some(s), false) => format!("{s}.{k}"),
                (None, false) => return Err(at(format!("key `{k}` outside any section"))),
            };
            if !seen.insert(full.clone()) {
                return Err(at(format!("duplicate key `{full}`")));
            }
            self.set(&full, v).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `section.key=value`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Replaces every seed with `seed` (the value of `ATTNPOOL_SEED`).
    pub fn apply_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.train.seed = seed;
        self.train.sketch_seed = seed;
    }

    /// Applies `ATTNPOOL_SEED` from the environment, if set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.apply_seed(parse(SEED_ENV, v.trim())?);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    /// File text, then overrides, then the environment seed; validated.
    pub fn resolve<S: AsRef<str>>(text: Option<&str>, overrides: &[S]) -> Result<Self> {
        let mut cfg = RunConfig::parse(text.unwrap_or(""))?;
        cfg.apply_overrides(overrides)?;
        cfg.apply_seed_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if !(self.pose_sigma >= 0.0 && self.pose_sigma.is_finite()) {
            return Err(Error::Config("task.pose_sigma must be finite and ≥ 0".into()));
        }
        if self.bench.repetitions == 0 || self.bench.sketch_dim == 0 {
            return Err(Error::Config("bench settings must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text of the full configuration; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in self.entries() {
            let (section, name) = key.split_once('.').expect("keys are qualified");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    /// Only the `[task]` section, as stored beside a generated dataset.
    pub fn task_text(&self) -> String {
        let text = self.to_text();
        let end = text.find("\n[train]").map_or(text.len(), |i| i + 1);
        text[..end].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(text.starts_with("[task]\nn1 = 7\n"));
        let keys = RunConfig::keys();
        assert_eq!(keys.len(), 29);
        for key in keys {
            let (section, name) = key.split_once('.').unwrap();
            assert!(text.contains(&format!("{name} = ")), "{key} missing");
            assert!(text.contains(&format!("[{section}]")));
        }
    }

    #[test]
    fn sections_comments_and_overrides() {
        let text = "# demo\n[task]\nn1 = 5 # rows\n[train]\nhead = per_class\nlearning_rate = 0.5\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.task.n1, 5);
        assert_eq!(cfg.train.head, crate::heads::HeadKind::PerClass);
        cfg.apply_overrides(&["train.epochs=3", "sketch.dim = 16"]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.sketch_dim, 16);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors() {
        assert!(RunConfig::parse("[task]\nbogus = 1").is_err());
        assert!(RunConfig::parse("[nope]").is_err());
        assert!(RunConfig::parse("n1 = 3").is_err());
        assert!(RunConfig::parse("[task]\nn1 = x").is_err());
        assert!(RunConfig::parse("[task]\nn1 = 3\nn1 = 4").is_err());
        assert!(RunConfig::parse("[train]\nhead = attn").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["train.epochs"]).is_err());
        assert!(RunConfig::resolve(Some("[task]\nclasses = 64"), &[] as &[&str]).is_err());
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut c = RunConfig::default();
        c.apply_seed(99);
        assert_eq!((c.task.seed, c.train.seed, c.train.sketch_seed), (99, 99, 99));
    }

    #[test]
    fn task_text_is_the_task_section() {
        let c = RunConfig::default();
        let t = c.task_text();
        assert!(t.starts_with("[task]") && !t.contains("[train]"));
        let back = RunConfig::parse(&t).unwrap();
        assert_eq!(back.task, c.task);
    }
}
