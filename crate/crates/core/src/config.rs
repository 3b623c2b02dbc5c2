//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! epochs = 30
//! weights.T = 3
//! enable_dis = false
//! milestones = 18, 25.5
//! net.stages = 16x1, 32x1/2, 64x1/2
//! data.source = synthetic
//! ```
//!
//! The key set is exactly the set of leaves of [`RunConfig`]; unknown keys
//! are rejected with the list of valid ones. `net.stages` uses
//! `<channels>x<blocks>[/2]` items, `/2` marking a downsampling stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{gen_synthetic, load_cifar_binary, Dataset, Split, SyntheticSpec};
use crate::error::{config_err, Error, Result};
use crate::network::{NetConfig, StageSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR binary files (ignored for synthetic data).
    pub train_path: String,
    pub test_path: String,
    pub per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_path: String::new(),
            test_path: String::new(),
            per_class: 64,
            test_per_class: 64,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub net: NetConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.net.validate()?;
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.per_class == 0 || self.data.test_per_class == 0 {
                    return Err(config_err!("synthetic data needs per_class and test_per_class > 0"));
                }
                if self.net.in_channels != 3 {
                    return Err(config_err!("synthetic images have 3 channels"));
                }
            }
            DataSource::Cifar10 | DataSource::Cifar100 => {
                let classes = if self.data.source == DataSource::Cifar10 { 10 } else { 100 };
                if self.net.num_classes != classes
                    || (self.net.in_channels, self.net.input_height, self.net.input_width) != (3, 32, 32)
                {
                    return Err(config_err!(
                        "CIFAR needs net.num_classes = {classes} and 3x32x32 inputs"
                    ));
                }
                if self.data.train_path.is_empty() {
                    return Err(config_err!("data.train_path is required for CIFAR"));
                }
            }
        }
        Ok(())
    }

    /// `(train, test)` datasets; all randomness comes from `seed`.
    pub fn load_datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                let spec = |per_class| SyntheticSpec {
                    num_classes: self.net.num_classes,
                    per_class,
                    height: self.net.input_height,
                    width: self.net.input_width,
                    noise_sigma: d.noise_sigma,
                    seed: self.train.seed,
                };
                Ok((
                    gen_synthetic(&spec(d.per_class), Split::Train)?,
                    Some(gen_synthetic(&spec(d.test_per_class), Split::Test)?),
                ))
            }
            DataSource::Cifar10 | DataSource::Cifar100 => {
                let c = self.net.num_classes;
                let train = load_cifar_binary(Path::new(&d.train_path), c, Split::Train)?;
                let test = (!d.test_path.is_empty())
                    .then(|| load_cifar_binary(Path::new(&d.test_path), c, Split::Test))
                    .transpose()?;
                Ok((train, test))
            }
        }
    }

    fn to_tree(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Every valid key, sorted.
    pub fn keys() -> Vec<String> {
        flatten(&RunConfig::default().to_tree()).into_iter().map(|(k, _)| k).collect()
    }

    /// Applies `key = value` assignments on top of `self`.
    pub fn apply<'a>(&self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut tree = self.to_tree();
        for (key, raw) in assignments {
            let slot = lookup(&mut tree, key).ok_or_else(|| {
                config_err!("unknown key '{key}'; valid keys: {}", RunConfig::keys().join(", "))
            })?;
            *slot = parse_value(key, raw.trim(), slot)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| config_err!("config does not deserialize: {e}"))?;
        Ok(cfg)
    }

    /// Parses config text over the defaults, then `overrides`.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            pairs.push(split_assignment(line).map_err(|e| config_err!("line {}: {e}", n + 1))?);
        }
        for o in overrides {
            pairs.push(split_assignment(o).map_err(|e| config_err!("override '{o}': {e}"))?);
        }
        let cfg = RunConfig::default().apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    /// Fully resolved config in the input format; parses back to `self`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in flatten(&self.to_tree()) {
            s.push_str(&format!("{k} = {}\n", render_value(&k, &v)));
        }
        s
    }
}

fn split_assignment(line: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = line.split_once('=').ok_or("expected 'key = value'")?;
    let k = k.trim();
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn flatten(v: &Value) -> Vec<(String, Value)> {
    fn go(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, child, out);
                }
            }
            leaf => out.push((prefix.to_string(), leaf.clone())),
        }
    }
    let mut out = Vec::new();
    go("", v, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut cur = tree;
    for part in key.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    (!cur.is_object()).then_some(cur)
}

fn parse_stages(raw: &str) -> Option<Value> {
    let stages = raw
        .split(',')
        .map(|item| {
            let item = item.trim();
            let (body, down) = match item.strip_suffix("/2") {
                Some(b) => (b, true),
                None => (item, false),
            };
            let (c, b) = body.split_once('x')?;
            Some(StageSpec::new(c.trim().parse().ok()?, b.trim().parse().ok()?, down))
        })
        .collect::<Option<Vec<_>>>()?;
    serde_json::to_value(stages).ok()
}

fn parse_value(key: &str, raw: &str, current: &Value) -> Result<Value> {
    let bad = || config_err!("bad value '{raw}' for '{key}'");
    let unquoted = raw.trim_matches('"');
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(unquoted.to_string()),
        Value::Array(_) if raw.starts_with('[') => serde_json::from_str(raw).map_err(|_| bad())?,
        Value::Array(_) if key == "net.stages" => parse_stages(raw).ok_or_else(bad)?,
        Value::Array(_) if raw.is_empty() => Value::Array(Vec::new()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(|x| {
                    let f: f64 = x.trim().parse().map_err(|_| bad())?;
                    serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        Value::Null | Value::Object(_) => return Err(bad()),
    })
}

fn render_value(key: &str, v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) if key == "net.stages" => {
            let stages: Vec<StageSpec> = serde_json::from_value(v.clone()).expect("stages");
            stages
                .iter()
                .map(|s| format!("{}x{}{}", s.out_channels, s.blocks, if s.downsample { "/2" } else { "" }))
                .collect::<Vec<_>>()
                .join(", ")
        }
        Value::Array(items) if items.iter().all(Value::is_number) => {
            items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
        }
        other => other.to_string(),
    }
}

/// Keys as a JSON object (for summaries).
pub fn to_json(cfg: &RunConfig) -> Map<String, Value> {
    flatten(&cfg.to_tree()).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_echo() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.echo(), &[]).unwrap(), d);
        let keys = RunConfig::keys();
        for k in ["weights.T", "enable_feature", "enable_f_logit", "net.stages", "data.source", "grl_scale", "adv_mode"] {
            assert!(keys.iter().any(|x| x == k), "{k} missing from {keys:?}");
        }
    }

    #[test]
    fn parses_text_and_overrides() {
        let text = "# desk run\nepochs = 12\nwarmup_epochs = 1\nlr = 0.1 # inline\nenable_dis = false\n\
                    milestones = 6, 9.5\nnet.stages = 8x1, 16x2/2\nschedule = cosine\nweights.mu = 2\n";
        let c = RunConfig::parse(text, &["weights.T=4".into(), "seed = 9".into()]).unwrap();
        assert_eq!(c.train.epochs, 12);
        assert_eq!(c.train.lr, 0.1);
        assert!(!c.train.switches.dis);
        assert_eq!(c.train.milestones, vec![6.0, 9.5]);
        assert_eq!(c.net.stages, vec![StageSpec::new(8, 1, false), StageSpec::new(16, 2, true)]);
        assert_eq!(c.train.schedule, crate::trainer::ScheduleKind::Cosine);
        assert_eq!(c.train.weights.mu, 2.0);
        assert_eq!(c.train.weights.temperature, 4.0);
        assert_eq!(c.train.seed, 9);
        assert!(c.echo().contains("weights.T = 4"));
        assert_eq!(RunConfig::parse(&c.echo(), &[]).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        match RunConfig::parse("weights.tau = 3\n", &[]) {
            Err(Error::InvalidConfig(m)) => assert!(m.contains("weights.T") && m.contains("tau"), "{m}"),
            other => panic!("{other:?}"),
        }
        for bad in ["epochs = many", "enable_dis = maybe", "lr", "net = 3", "net.stages = 8y1", "lr = 0", "schedule = linear"] {
            assert!(matches!(RunConfig::parse(bad, &[]), Err(Error::InvalidConfig(_))), "{bad}");
        }
    }

    #[test]
    fn loads_synthetic_data() {
        let c = RunConfig::parse("data.per_class = 3\ndata.test_per_class = 2\n", &[]).unwrap();
        let (train, test) = c.load_datasets().unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.unwrap().len(), 8);
        assert!(RunConfig::parse("data.source = cifar10\n", &[]).is_err());
    }
}
